"""Output-dependent Gaussian-process state-space models."""

import jax

# every computation in the package is double precision
jax.config.update("jax_enable_x64", True)

from .exceptions import (  # noqa: E402
    ConfigError,
    ContractError,
    DataError,
    FactorizationError,
    GPSSMError,
    IdentifiabilityError,
    NumericalConsistencyError,
)
from .kernels import InducingSet, KernelParams  # noqa: E402
from .linalg import GaussianBelief  # noqa: E402
from .lmc import Coregionalization, check_identifiability, independent_baseline  # noqa: E402
from .model import GPSSMParams, RecognitionNet, Trajectory  # noqa: E402

__version__ = "0.1.0"
