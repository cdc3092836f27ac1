"""Exact linear-Gaussian machinery: simulation, Kalman filter and RTS smoother.

These are the ground-truth references for the synthetic car-tracking study and
for the evidence bound checks, so they are plain numpy/scipy and share no code
with the variational model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .exceptions import ContractError, FactorizationError
from .model import Trajectory


@dataclass(frozen=True)
class LGSSMSpec:
    """x_t = F x_{t-1} + v_t, y_t = C x_t + e_t, v ~ N(0, Q_cov), e ~ N(0, R_cov).

    ``x0`` is the initial state; ``P0`` its covariance (zeros = known exactly).
    """

    F: np.ndarray
    C: np.ndarray
    Q_cov: np.ndarray
    R_cov: np.ndarray
    x0: np.ndarray
    P0: np.ndarray = None

    def __post_init__(self):
        F = np.atleast_2d(np.asarray(self.F, dtype=float))
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        Qc = np.atleast_2d(np.asarray(self.Q_cov, dtype=float))
        Rc = np.atleast_2d(np.asarray(self.R_cov, dtype=float))
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        n = F.shape[0]
        P0 = np.zeros((n, n)) if self.P0 is None else np.atleast_2d(np.asarray(self.P0, dtype=float))
        if F.shape != (n, n) or C.shape[1] != n or Qc.shape != (n, n) or x0.shape != (n,):
            raise ContractError("inconsistent LGSSM dimensions")
        if Rc.shape != (C.shape[0],) * 2 or P0.shape != (n, n):
            raise ContractError("inconsistent LGSSM dimensions")
        for name, M in (("Q_cov", Qc), ("R_cov", Rc), ("P0", P0)):
            if not np.allclose(M, M.T, atol=1e-12):
                raise ContractError(f"{name} must be symmetric")
            if M.size and np.linalg.eigvalsh(M).min() < -1e-10 * max(1.0, np.abs(M).max()):
                raise ContractError(f"{name} must be positive semi-definite")
        for name, v in (("F", F), ("C", C), ("Q_cov", Qc), ("R_cov", Rc), ("x0", x0), ("P0", P0)):
            object.__setattr__(self, name, v)

    @property
    def state_dim(self) -> int:
        return self.F.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.C.shape[0]


def car_model(process_noise=(0.01, 0.01, 0.1, 0.1), obs_noise=0.1, x0=(0.0, 0.0, 1.0, -1.0)):
    """2-D constant-velocity car: state (px, py, vx, vy), positions observed."""
    F = np.block([[np.eye(2), np.eye(2)], [np.zeros((2, 2)), np.eye(2)]])
    C = np.hstack([np.eye(2), np.zeros((2, 2))])
    return LGSSMSpec(F, C, np.diag(process_noise), obs_noise * np.eye(2), np.asarray(x0))


def _psd_draws(rng, cov, n):
    # eigh tolerates singular (e.g. zero) covariances
    return rng.multivariate_normal(np.zeros(len(cov)), cov, size=n, method="eigh")


def lgssm_generate(spec: LGSSMSpec, T: int, seed: int) -> Trajectory:
    """Simulate T steps; the trajectory keeps x_{0:T} as ``true_states``."""
    if T < 1:
        raise ContractError("T must be >= 1")
    rng = np.random.default_rng(seed)
    n = spec.state_dim
    x = np.empty((T + 1, n))
    x[0] = spec.x0 + _psd_draws(rng, spec.P0, 1)[0]
    v = _psd_draws(rng, spec.Q_cov, T)
    e = _psd_draws(rng, spec.R_cov, T)
    for t in range(1, T + 1):
        x[t] = spec.F @ x[t - 1] + v[t - 1]
    y = x[1:] @ spec.C.T + e
    return Trajectory(y, None, x)


@dataclass
class FilterResult:
    """Filtered and one-step predicted moments for t = 1..T plus log p(y_{1:T})."""

    means: np.ndarray
    covs: np.ndarray
    pred_means: np.ndarray
    pred_covs: np.ndarray
    loglik: float
    step_loglik: np.ndarray = field(default=None)


def _chol(S, what):
    try:
        return scipy.linalg.cho_factor(S, lower=True)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError(f"{what} is not positive definite") from exc


def kalman_filter(spec: LGSSMSpec, y) -> FilterResult:
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if y.shape[1] != spec.obs_dim:
        y = y.reshape(-1, spec.obs_dim)
    T, n = y.shape[0], spec.state_dim
    F, C, Qc, Rc = spec.F, spec.C, spec.Q_cov, spec.R_cov
    means = np.empty((T, n))
    covs = np.empty((T, n, n))
    pm = np.empty((T, n))
    pc = np.empty((T, n, n))
    lls = np.empty(T)
    m, P = spec.x0, spec.P0
    d = spec.obs_dim
    for t in range(T):
        m_pred = F @ m
        P_pred = F @ P @ F.T + Qc
        S = C @ P_pred @ C.T + Rc
        cf = _chol(S, f"innovation covariance at t={t + 1}")
        r = y[t] - C @ m_pred
        K = scipy.linalg.cho_solve(cf, C @ P_pred).T
        m = m_pred + K @ r
        P = P_pred - K @ S @ K.T
        P = 0.5 * (P + P.T)
        logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
        lls[t] = -0.5 * (d * np.log(2 * np.pi) + logdet + r @ scipy.linalg.cho_solve(cf, r))
        means[t], covs[t], pm[t], pc[t] = m, P, m_pred, P_pred
    return FilterResult(means, covs, pm, pc, float(lls.sum()), lls)


@dataclass
class SmootherResult:
    means: np.ndarray
    covs: np.ndarray


def rts_smoother(spec: LGSSMSpec, filtered: FilterResult) -> SmootherResult:
    """Rauch-Tung-Striebel backward pass over the filter output."""
    T = filtered.means.shape[0]
    ms = filtered.means.copy()
    Ps = filtered.covs.copy()
    F = spec.F
    for t in range(T - 2, -1, -1):
        P_pred = filtered.pred_covs[t + 1]
        # gain G = P_f F^T P_pred^-1
        try:
            G = scipy.linalg.cho_solve(scipy.linalg.cho_factor(P_pred, lower=True), F @ filtered.covs[t]).T
        except np.linalg.LinAlgError:
            G = np.linalg.lstsq(P_pred, F @ filtered.covs[t], rcond=None)[0].T
        ms[t] = filtered.means[t] + G @ (ms[t + 1] - filtered.pred_means[t + 1])
        Ps[t] = filtered.covs[t] + G @ (Ps[t + 1] - P_pred) @ G.T
        Ps[t] = 0.5 * (Ps[t] + Ps[t].T)
    return SmootherResult(ms, Ps)
