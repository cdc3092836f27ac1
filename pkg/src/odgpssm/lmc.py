"""Linear model of coregionalization: mixing latent GP moments into state moments."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import jax.numpy as jnp
import numpy as np

from .exceptions import ContractError, IdentifiabilityError
from .kernels import kernel_eval
from .linalg import is_traced

RANK_RTOL = 1e-8


@dataclass(frozen=True)
class Coregionalization:
    """The (d_x, Q) mixing matrix whose row d holds the coefficients of output d."""

    A: np.ndarray

    def __post_init__(self):
        A = jnp.atleast_2d(jnp.asarray(self.A, dtype=jnp.float64))
        if A.ndim != 2:
            raise ContractError("A must be a matrix")
        object.__setattr__(self, "A", A)

    @property
    def state_dim(self) -> int:
        return int(self.A.shape[0])

    @property
    def num_latent(self) -> int:
        return int(self.A.shape[1])

    @property
    def identifiable(self) -> bool:
        return check_identifiability(self).identifiable

    @classmethod
    def initial(cls, state_dim, num_latent, rng=None, scale=0.1):
        """Identity padded/truncated to (state_dim, num_latent) plus N(0, scale^2) noise."""
        A = np.eye(state_dim, num_latent)
        if rng is not None and scale > 0:
            A = A + scale * rng.standard_normal(A.shape)
        return cls(A)


@dataclass(frozen=True)
class IdentifiabilityReport:
    num_latent: int
    state_dim: int
    rank: int
    smallest_singular_value: float
    identifiable: bool

    def to_dict(self):
        return asdict(self)


def mix_moments(c: Coregionalization, xi_h, Xi_h):
    """Push latent moments through the mixing: ``(A xi_h, A Xi_h A^T)``.

    ``Xi_h`` is the (Q, Q) diagonal covariance of the independent latent GPs;
    a length-Q vector of variances is accepted as well.
    """
    xi_h = jnp.asarray(xi_h, dtype=jnp.float64)
    Xi_h = jnp.asarray(Xi_h, dtype=jnp.float64)
    Q = c.num_latent
    if xi_h.shape != (Q,):
        raise ContractError(f"xi_h must have shape ({Q},), got {xi_h.shape}")
    if Xi_h.ndim == 1:
        var = Xi_h
    else:
        if Xi_h.shape != (Q, Q):
            raise ContractError(f"Xi_h must have shape ({Q}, {Q}), got {Xi_h.shape}")
        var = jnp.diagonal(Xi_h)
        if not is_traced(Xi_h) and np.any(np.asarray(Xi_h - jnp.diag(var)) != 0):
            raise ContractError("Xi_h must be diagonal (independent latent GPs)")
    if not is_traced(var) and np.any(np.asarray(var) < 0):
        raise ContractError("latent variances must be non-negative")
    A = c.A
    return A @ xi_h, (A * var) @ A.T


def multioutput_kernel_entry(c: Coregionalization, kernels, i, j, x, x2):
    """Entry (i, j) of the multi-output kernel: sum_q A[i, q] A[j, q] k_q(x, x2)."""
    if not (0 <= i < c.state_dim and 0 <= j < c.state_dim):
        raise ContractError("output index out of range")
    if len(kernels) != c.num_latent:
        raise ContractError("need one kernel per latent GP")
    total = 0.0
    for q, kq in enumerate(kernels):
        total = total + c.A[i, q] * c.A[j, q] * kernel_eval(kq, x, x2)
    return total


def check_identifiability(c: Coregionalization) -> IdentifiabilityReport:
    A = np.asarray(c.A)
    sv = np.linalg.svd(A, compute_uv=False)
    smax = sv[0] if sv.size else 0.0
    rank = int(np.sum(sv > RANK_RTOL * smax)) if smax > 0 else 0
    d_x, Q = A.shape
    return IdentifiabilityReport(
        num_latent=Q,
        state_dim=d_x,
        rank=rank,
        smallest_singular_value=float(sv[-1]) if sv.size else 0.0,
        identifiable=bool(Q <= d_x and rank == Q),
    )


def recover_latent(c: Coregionalization, f):
    """Least-squares latent values ``(A^T A)^-1 A^T f``; exact when ``f = A h``.

    ``f`` may be a (d_x,) vector or an (n, d_x) batch of rows.
    """
    report = check_identifiability(c)
    if not report.identifiable:
        raise IdentifiabilityError(
            f"A ({report.state_dim}x{report.num_latent}, rank {report.rank}) "
            "is not identifiable: need Q <= d_x and full column rank")
    f = np.asarray(f, dtype=float)
    # same solution as the normal equations, via QR
    Qm, R = np.linalg.qr(np.asarray(c.A))
    rhs = f @ Qm if f.ndim == 2 else Qm.T @ f
    if f.ndim == 2:
        return np.linalg.solve(R, rhs.T).T
    return np.linalg.solve(R, rhs)


def independent_baseline(state_dim: int) -> Coregionalization:
    """A = I: every state dimension gets its own latent GP (no output coupling)."""
    if state_dim < 1:
        raise ContractError("state_dim must be >= 1")
    return Coregionalization(np.eye(state_dim))
