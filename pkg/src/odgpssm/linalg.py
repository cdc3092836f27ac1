"""Dense linear algebra and Gaussian primitives.

All routines accept numpy or jax arrays and are written with ``jax.numpy`` so
they can be traced and differentiated. Cholesky factorizations follow a fixed
jitter policy: try the bare matrix, then add ``c * mean(diag) * I`` for
``c = 1e-8, 1e-7, ..., 1e-2``; if every level fails, the factor is NaN inside a
trace and :class:`FactorizationError` is raised in eager code.
"""

from __future__ import annotations

import threading

import jax
import jax.numpy as jnp
import numpy as np
import scipy.linalg
from jax import lax
from jax.scipy.linalg import cho_solve, solve_triangular

from .exceptions import ContractError, FactorizationError

JITTER_LEVELS = (0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2)
SYMMETRY_RTOL = 1e-12

__all__ = [
    "JITTER_LEVELS",
    "GaussianBelief",
    "cholesky",
    "cholesky_jittered",
    "cholesky_solve",
    "is_traced",
    "kl_gaussian",
    "kl_from_factors",
    "sample_gaussian",
    "seeded_normal_stream",
]


def is_traced(x) -> bool:
    return isinstance(x, jax.core.Tracer)


def _jitter_amount(K):
    """Smallest jitter of the escalation ladder for which ``K`` factorizes.

    Computed on ``stop_gradient(K)`` so that failed trial factorizations never
    leak NaN into gradients. Works on stacks of matrices.
    """
    Ks = lax.stop_gradient(K)
    n = Ks.shape[-1]
    eye = jnp.eye(n, dtype=Ks.dtype)
    scale = jnp.mean(jnp.diagonal(Ks, axis1=-2, axis2=-1), axis=-1)
    # an all-zero covariance still gets an absolute floor
    scale = jnp.where(scale > 0, scale, 1.0)
    chosen = jnp.full(scale.shape, jnp.nan, dtype=Ks.dtype)
    for level in reversed(JITTER_LEVELS):
        jit = level * scale
        L = jnp.linalg.cholesky(Ks + jit[..., None, None] * eye)
        ok = jnp.all(jnp.isfinite(L), axis=(-2, -1))
        chosen = jnp.where(ok, jit, chosen)
    return chosen


def cholesky_jittered(K):
    """Lower Cholesky factor of ``K`` (or a stack of them) under the jitter policy.

    Returns ``(L, jitter)``. Trace-safe; a matrix that fails every level yields NaN.
    """
    K = jnp.asarray(K)
    jit = _jitter_amount(K)
    eye = jnp.eye(K.shape[-1], dtype=K.dtype)
    return jnp.linalg.cholesky(K + jit[..., None, None] * eye), jit


def _leading_minor(K) -> int:
    """1-based order of the first non-positive leading minor (LAPACK ``potrf`` info)."""
    K = np.asarray(K, dtype=float)
    if K.ndim > 2:
        for sub in K.reshape(-1, *K.shape[-2:]):
            info = _leading_minor(sub)
            if info:
                return info
        return 0
    scale = np.mean(np.diag(K))
    scale = scale if scale > 0 else 1.0
    _, info = scipy.linalg.lapack.dpotrf(K + JITTER_LEVELS[-1] * scale * np.eye(len(K)), lower=1)
    return int(info)


def cholesky(K):
    """Jittered Cholesky factor; raises :class:`FactorizationError` in eager mode."""
    L, _ = cholesky_jittered(K)
    if not is_traced(L) and not bool(jnp.all(jnp.isfinite(L))):
        minor = _leading_minor(K)
        raise FactorizationError(
            f"matrix not positive definite after jitter escalation "
            f"(leading minor of order {minor} fails)",
            leading_minor=minor,
        )
    return L


def _check_symmetric(A, what="matrix"):
    if is_traced(A):
        return
    A = np.asarray(A)
    if A.ndim < 2 or A.shape[-1] != A.shape[-2]:
        raise ContractError(f"{what} must be square, got shape {A.shape}")
    tol = SYMMETRY_RTOL * max(1.0, float(np.max(np.abs(A))) if A.size else 1.0)
    if A.size and float(np.max(np.abs(A - np.swapaxes(A, -1, -2)))) > tol:
        raise ContractError(f"{what} is not symmetric")


def cholesky_solve(A, B):
    """Solve ``A X = B`` for symmetric PSD ``A`` through its Cholesky factor.

    Args:
        A: (n, n) symmetric positive semi-definite matrix.
        B: (n,) vector or (n, k) matrix.

    Returns:
        X with the shape of ``B``.
    """
    A = jnp.asarray(A)
    B = jnp.asarray(B)
    _check_symmetric(A, "A")
    if B.shape[0] != A.shape[0]:
        raise ContractError(f"B has {B.shape[0]} rows, A has dimension {A.shape[0]}")
    L = cholesky(A)
    return cho_solve((L, True), B)


class GaussianBelief:
    """Multivariate normal ``N(mean, cov)`` with a lazily cached Cholesky factor.

    Immutable. The factor is computed at most once even under concurrent access.
    """

    __slots__ = ("mean", "cov", "_chol", "_lock")

    def __init__(self, mean, cov):
        mean = jnp.atleast_1d(jnp.asarray(mean, dtype=jnp.float64))
        cov = jnp.atleast_2d(jnp.asarray(cov, dtype=jnp.float64))
        if mean.ndim != 1 or cov.shape != (mean.shape[0], mean.shape[0]):
            raise ContractError(
                f"mean shape {mean.shape} and cov shape {cov.shape} are inconsistent")
        _check_symmetric(cov, "cov")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "_chol", None)
        object.__setattr__(self, "_lock", threading.Lock())

    @classmethod
    def diagonal(cls, mean, var):
        return cls(mean, jnp.diag(jnp.asarray(var, dtype=jnp.float64)))

    @classmethod
    def standard(cls, n):
        return cls(jnp.zeros(n), jnp.eye(n))

    def __setattr__(self, name, value):
        raise AttributeError("GaussianBelief is immutable")

    def __repr__(self):
        return f"GaussianBelief(dim={self.dim})"

    @property
    def dim(self) -> int:
        return int(self.mean.shape[0])

    @property
    def chol(self):
        if self._chol is None:
            with self._lock:
                if self._chol is None:
                    object.__setattr__(self, "_chol", cholesky(self.cov))
        return self._chol

    @property
    def var(self):
        return jnp.diagonal(self.cov)

    def log_density(self, x):
        x = jnp.asarray(x, dtype=jnp.float64)
        r = solve_triangular(self.chol, x - self.mean, lower=True)
        logdet = 2.0 * jnp.sum(jnp.log(jnp.diagonal(self.chol)))
        return -0.5 * (self.dim * jnp.log(2 * jnp.pi) + logdet + r @ r)


def kl_from_factors(mu_q, L_q, mu_p, L_p):
    """KL(N(mu_q, L_q L_q^T) || N(mu_p, L_p L_p^T)) from Cholesky factors.

    Supports leading batch dimensions (e.g. one KL per latent GP).
    """
    n = mu_q.shape[-1]
    M = solve_triangular(L_p, L_q, lower=True)
    diff = solve_triangular(L_p, (mu_p - mu_q)[..., None], lower=True)[..., 0]
    trace = jnp.sum(M**2, axis=(-2, -1))
    maha = jnp.sum(diff**2, axis=-1)
    logdet_p = 2.0 * jnp.sum(jnp.log(jnp.diagonal(L_p, axis1=-2, axis2=-1)), axis=-1)
    logdet_q = 2.0 * jnp.sum(jnp.log(jnp.diagonal(L_q, axis1=-2, axis2=-1)), axis=-1)
    return 0.5 * (trace + maha - n + logdet_p - logdet_q)


def kl_gaussian(q: GaussianBelief, p: GaussianBelief):
    """Closed-form KL divergence ``KL(q || p)`` between two Gaussians."""
    if q.dim != p.dim:
        raise ContractError(f"dimension mismatch: q has {q.dim}, p has {p.dim}")
    return kl_from_factors(q.mean, q.chol, p.mean, p.chol)


def sample_gaussian(g: GaussianBelief, eps):
    """Reparameterized draw ``mean + chol @ eps``; ``eps`` is supplied by the caller."""
    eps = jnp.asarray(eps, dtype=jnp.float64)
    if eps.shape != g.mean.shape:
        raise ContractError(f"eps has shape {eps.shape}, belief has dimension {g.dim}")
    return g.mean + g.chol @ eps


def seeded_normal_stream(seed: int, count: int) -> np.ndarray:
    """``count`` standard-normal values, bit-reproducible for a given seed."""
    if count < 0:
        raise ContractError("count must be non-negative")
    return np.random.default_rng(seed).standard_normal(count)
