"""Exception hierarchy shared by the library and the command line."""

import numpy as np


class GPSSMError(Exception):
    """Base class for every error raised by :mod:`odgpssm`."""


class ContractError(GPSSMError, ValueError):
    """An argument violates a documented precondition (shape, range, mode)."""


class FactorizationError(GPSSMError, np.linalg.LinAlgError):
    """Cholesky factorization failed even after the full jitter escalation."""

    def __init__(self, message, leading_minor=None):
        super().__init__(message)
        self.leading_minor = leading_minor


class NumericalConsistencyError(GPSSMError, ArithmeticError):
    """A quantity that must be non-negative (a variance) came out clearly negative,
    or a gradient / objective became non-finite."""


class IdentifiabilityError(GPSSMError, ValueError):
    """The coregionalization matrix does not admit a unique latent recovery."""


class DataError(GPSSMError, ValueError):
    """Malformed or tampered dataset."""

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class ConfigError(GPSSMError, ValueError):
    """Invalid experiment configuration."""
