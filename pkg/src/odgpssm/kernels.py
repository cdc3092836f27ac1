"""Squared-exponential ARD kernels and (sparse) GP predictive moments."""

from __future__ import annotations

from dataclasses import dataclass

import jax.numpy as jnp
import numpy as np
from jax.scipy.linalg import cho_solve, solve_triangular

from .exceptions import ContractError, NumericalConsistencyError
from .linalg import cholesky, cholesky_jittered, is_traced

# variances in [-VAR_CLAMP_TOL, 0) are roundoff and clamp to zero
VAR_CLAMP_TOL = 1e-6


@dataclass(frozen=True)
class KernelParams:
    """Hyperparameters of one squared-exponential ARD kernel.

    Attributes:
        signal_variance: positive scalar.
        lengthscales: positive vector, one entry per input dimension.
    """

    signal_variance: float
    lengthscales: np.ndarray

    def __post_init__(self):
        ell = jnp.atleast_1d(jnp.asarray(self.lengthscales, dtype=jnp.float64))
        object.__setattr__(self, "lengthscales", ell)
        if not is_traced(ell) and (np.any(np.asarray(ell) <= 0) or float(self.signal_variance) <= 0):
            raise ContractError("kernel hyperparameters must be strictly positive")

    @property
    def input_dim(self) -> int:
        return int(self.lengthscales.shape[0])


@dataclass(frozen=True)
class InducingSet:
    """Inducing inputs shared by all latent GPs plus per-GP variational moments.

    Attributes:
        z: (m, d_in) inducing inputs.
        means: (Q, m) variational means, one row per latent GP.
        chol_factors: (Q, m, m) lower-triangular factors of the variational
            covariances, positive diagonal.
    """

    z: np.ndarray
    means: np.ndarray
    chol_factors: np.ndarray

    @property
    def num_inducing(self) -> int:
        return int(self.z.shape[0])

    @property
    def num_latent(self) -> int:
        return int(self.means.shape[0])

    def covariance(self, q):
        L = self.chol_factors[q]
        return L @ L.T

    def covariances(self):
        return self.chol_factors @ jnp.swapaxes(self.chol_factors, -1, -2)

    def check_distinct(self, tol=1e-10):
        """Raise if two inducing inputs coincide (distance <= tol after standardization)."""
        z = np.asarray(self.z)
        sd = z.std(axis=0)
        zs = z / np.where(sd > 0, sd, 1.0)
        d = np.sqrt(((zs[:, None, :] - zs[None, :, :]) ** 2).sum(-1))
        d[np.diag_indices_from(d)] = np.inf
        if d.size and d.min() <= tol:
            raise ContractError("duplicate inducing inputs")


def se_kernel(X, X2, signal_variance, lengthscales):
    """Squared-exponential ARD Gram matrix; broadcasts over leading batch axes.

    ``X`` is (..., n, d), ``X2`` is (..., n2, d), ``signal_variance`` (...,) and
    ``lengthscales`` (..., d).
    """
    ell = lengthscales[..., None, :]
    diff = X[..., :, None, :] / ell[..., None, :] - X2[..., None, :, :] / ell[..., None, :]
    sq = jnp.sum(diff**2, axis=-1)
    return signal_variance[..., None, None] * jnp.exp(-0.5 * sq)


def kernel_eval(p: KernelParams, x, x2):
    """k(x, x2) = s2 * exp(-1/2 sum_i (x_i - x2_i)^2 / l_i^2)."""
    x = jnp.atleast_1d(jnp.asarray(x, dtype=jnp.float64))
    x2 = jnp.atleast_1d(jnp.asarray(x2, dtype=jnp.float64))
    if x.shape != p.lengthscales.shape or x2.shape != p.lengthscales.shape:
        raise ContractError("input dimension does not match the lengthscale vector")
    r = (x - x2) / p.lengthscales
    return p.signal_variance * jnp.exp(-0.5 * jnp.sum(r**2))


def kernel_matrix(p: KernelParams, X, X2=None):
    X = jnp.atleast_2d(jnp.asarray(X, dtype=jnp.float64))
    X2 = X if X2 is None else jnp.atleast_2d(jnp.asarray(X2, dtype=jnp.float64))
    if X.shape[1] != p.input_dim or X2.shape[1] != p.input_dim:
        raise ContractError("column count must equal the kernel input dimension")
    return se_kernel(X, X2, jnp.asarray(p.signal_variance, dtype=jnp.float64), p.lengthscales)


def _clamp_variance(var):
    """Clamp roundoff-negative variances; raise on clearly negative ones (eager only)."""
    if not is_traced(var):
        vmin = float(jnp.min(var))
        if vmin < -VAR_CLAMP_TOL:
            raise NumericalConsistencyError(f"predictive variance {vmin:.3e} is negative")
    return jnp.maximum(var, 0.0)


def exact_gp_posterior(p: KernelParams, X, f, xstar):
    """Noise-free, zero-mean GP posterior mean and variance at a single test input."""
    X = jnp.atleast_2d(jnp.asarray(X, dtype=jnp.float64))
    f = jnp.asarray(f, dtype=jnp.float64).reshape(-1)
    if X.shape[0] != f.shape[0]:
        raise ContractError("X rows and f length differ")
    xs = jnp.atleast_2d(jnp.asarray(xstar, dtype=jnp.float64))
    L = cholesky(kernel_matrix(p, X))
    ksx = kernel_matrix(p, xs, X)[0]
    mean = ksx @ cho_solve((L, True), f)
    v = solve_triangular(L, ksx, lower=True)
    var = p.signal_variance - v @ v
    return mean, _clamp_variance(var)


def sparse_moments(x, z, signal_variance, lengthscales, means, chol_factors, kzz_chol=None):
    """Batched sparse-GP predictive moments for all latent GPs at once.

    Computes, for every latent GP q and every row of ``x``,
    ``K_xz Kzz^-1 m_q`` and ``k_xx - K_xz Kzz^-1 [Kzz - S_q] Kzz^-1 K_zx``.

    Args:
        x: (n, d_in) test inputs.
        z: (m, d_in) shared inducing inputs.
        signal_variance: (Q,).
        lengthscales: (Q, d_in).
        means: (Q, m).
        chol_factors: (Q, m, m) factors of S_q.
        kzz_chol: optional precomputed (Q, m, m) factors of Kzz.

    Returns:
        (mean, var), each (Q, n); ``var`` is not clamped.
    """
    if kzz_chol is None:
        Kzz = se_kernel(z, z, signal_variance, lengthscales)
        kzz_chol, _ = cholesky_jittered(Kzz)
    Kzx = se_kernel(z, x, signal_variance, lengthscales)  # (Q, m, n)
    a = solve_triangular(kzz_chol, Kzx, lower=True)  # L^-1 K_zx
    alpha = solve_triangular(kzz_chol, means[..., None], lower=True)[..., 0]
    mean = jnp.einsum("qmn,qm->qn", a, alpha)
    b = solve_triangular(jnp.swapaxes(kzz_chol, -1, -2), a, lower=False)  # Kzz^-1 K_zx
    c = jnp.swapaxes(chol_factors, -1, -2) @ b
    var = signal_variance[:, None] - jnp.sum(a**2, axis=-2) + jnp.sum(c**2, axis=-2)
    return mean, var


def sparse_gp_predict(p: KernelParams, ind: InducingSet, q_index: int, xstar):
    """Predictive mean and variance of latent GP ``q_index`` at ``xstar``."""
    if not 0 <= q_index < ind.num_latent:
        raise ContractError(f"q_index {q_index} outside [0, {ind.num_latent})")
    xs = jnp.atleast_2d(jnp.asarray(xstar, dtype=jnp.float64))
    if xs.shape[1] != p.input_dim:
        raise ContractError("xstar dimension does not match the kernel")
    Kzz = kernel_matrix(p, ind.z)
    L = cholesky(Kzz)
    mean, var = sparse_moments(
        xs, jnp.asarray(ind.z), jnp.atleast_1d(jnp.asarray(p.signal_variance, dtype=jnp.float64)),
        p.lengthscales[None], jnp.asarray(ind.means)[q_index][None],
        jnp.asarray(ind.chol_factors)[q_index][None], kzz_chol=L[None])
    return mean[0, 0], _clamp_variance(var[0, 0])
