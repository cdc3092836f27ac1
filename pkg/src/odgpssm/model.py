"""Output-dependent GPSSM: generative model, variational family and ELBO.

The transition of state dimension ``d`` is ``f_d(x) = sum_q A[d, q] h_q(x)``
with Q independent sparse GPs ``h_q`` sharing inducing inputs. Emission is
fixed to ``y_t = x_t[:d_y] + e_t``.

The ``*_impl`` functions below are pure jax and are what the training engine
traces and differentiates; the public functions add argument checks and
raise descriptive errors.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import jax.numpy as jnp
import numpy as np
from jax import lax
from jax.scipy.linalg import solve_triangular

from .exceptions import ContractError, NumericalConsistencyError
from .kernels import VAR_CLAMP_TOL, InducingSet, KernelParams, se_kernel, sparse_moments
from .linalg import GaussianBelief, cholesky_jittered, is_traced, kl_from_factors
from .lmc import Coregionalization

KNOWN_X0_VARIANCE = 1e-8
DEFAULT_WINDOW = 10
DEFAULT_HIDDEN = 32
LOG_2PI = float(np.log(2 * np.pi))


@dataclass(frozen=True)
class Trajectory:
    """Observed sequence with optional controls and (synthetic only) true states.

    Attributes:
        observations: (T, d_y).
        controls: (T, d_c) or None; row t drives the transition into x_t.
        true_states: (T + 1, d_x) or None.
    """

    observations: np.ndarray
    controls: Optional[np.ndarray] = None
    true_states: Optional[np.ndarray] = None

    def __post_init__(self):
        y = np.atleast_2d(np.asarray(self.observations, dtype=float))
        if y.shape[0] < 1 or y.shape[1] < 1:
            raise ContractError("a trajectory needs T >= 1 observations")
        if not np.all(np.isfinite(y)):
            raise ContractError("observations contain missing or non-finite values")
        object.__setattr__(self, "observations", y)
        if self.controls is not None:
            c = np.asarray(self.controls, dtype=float)
            c = c.reshape(len(c), -1)
            if c.shape[0] != y.shape[0] or not np.all(np.isfinite(c)):
                raise ContractError("controls must be finite with one row per observation")
            object.__setattr__(self, "controls", c if c.shape[1] else None)
        if self.true_states is not None:
            x = np.atleast_2d(np.asarray(self.true_states, dtype=float))
            if x.shape[0] != y.shape[0] + 1:
                raise ContractError("true_states must have T + 1 rows")
            object.__setattr__(self, "true_states", x)

    @property
    def length(self) -> int:
        return self.observations.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.observations.shape[1]

    @property
    def control_dim(self) -> int:
        return 0 if self.controls is None else self.controls.shape[1]

    def segment(self, start, stop):
        """Rows ``start:stop`` of observations/controls; true states keep the extra leading row."""
        return Trajectory(
            self.observations[start:stop],
            None if self.controls is None else self.controls[start:stop],
            None if self.true_states is None else self.true_states[start:stop + 1],
        )


@dataclass(frozen=True)
class RecognitionNet:
    """Two-layer tanh network mapping the first ``window`` observations to q(x0).

    Outputs the mean and the log of the diagonal covariance.
    """

    window: int
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    @classmethod
    def init(cls, window, obs_dim, state_dim, hidden=DEFAULT_HIDDEN, rng=None, scale=0.1):
        rng = np.random.default_rng(0) if rng is None else rng
        n_in = window * obs_dim
        return cls(
            window=window,
            W1=scale * rng.standard_normal((hidden, n_in)) / np.sqrt(n_in),
            b1=np.zeros(hidden),
            W2=scale * rng.standard_normal((2 * state_dim, hidden)) / np.sqrt(hidden),
            b2=np.zeros(2 * state_dim),
        )

    @classmethod
    def zeros(cls, window, obs_dim, state_dim, hidden=DEFAULT_HIDDEN):
        return cls(window, np.zeros((hidden, window * obs_dim)), np.zeros(hidden),
                   np.zeros((2 * state_dim, hidden)), np.zeros(2 * state_dim))

    @property
    def state_dim(self) -> int:
        return self.W2.shape[0] // 2

    def __call__(self, y_window):
        h = jnp.tanh(self.W1 @ y_window + self.b1)
        out = self.W2 @ h + self.b2
        d = self.state_dim
        return out[:d], out[d:]


@dataclass(frozen=True)
class GPSSMParams:
    """Full parameter set of the output-dependent GPSSM.

    Attributes:
        coreg: mixing matrix A (d_x, Q).
        signal_variance: (Q,) kernel variances, one per latent GP.
        lengthscales: (Q, d_in) ARD lengthscales, d_in = d_x + d_c.
        inducing: shared inducing inputs and per-GP q(u_q).
        process_noise: (d_x,) diagonal of the transition noise covariance.
        obs_noise: (d_y,) diagonal of the emission noise covariance.
        recognition: network producing q(x0); ignored when ``x0`` is set.
        x0: known initial state, or None to infer it with ``recognition``.
    """

    coreg: Coregionalization
    signal_variance: np.ndarray
    lengthscales: np.ndarray
    inducing: InducingSet
    process_noise: np.ndarray
    obs_noise: np.ndarray
    recognition: RecognitionNet
    x0: Optional[np.ndarray] = None

    @property
    def state_dim(self) -> int:
        return self.coreg.state_dim

    @property
    def obs_dim(self) -> int:
        return int(self.obs_noise.shape[0])

    @property
    def num_latent(self) -> int:
        return self.coreg.num_latent

    @property
    def input_dim(self) -> int:
        return int(self.lengthscales.shape[-1])

    @property
    def control_dim(self) -> int:
        return self.input_dim - self.state_dim

    @property
    def num_inducing(self) -> int:
        return self.inducing.num_inducing

    @property
    def emission(self):
        return np.eye(self.obs_dim, self.state_dim)

    @property
    def kernels(self):
        return [KernelParams(self.signal_variance[q], self.lengthscales[q])
                for q in range(self.num_latent)]

    def with_changes(self, **kwargs):
        return replace(self, **kwargs)

    def validate(self):
        if is_traced(self.process_noise):
            return self
        if np.any(np.asarray(self.process_noise) <= 0) or np.any(np.asarray(self.obs_noise) <= 0):
            raise ContractError("noise variances must be strictly positive")
        if self.obs_dim > self.state_dim:
            raise ContractError("d_y must not exceed d_x")
        if self.inducing.num_latent != self.num_latent:
            raise ContractError("inducing set and A disagree on Q")
        if self.x0 is not None and np.asarray(self.x0).shape != (self.state_dim,):
            raise ContractError("known x0 has the wrong dimension")
        return self

    @classmethod
    def initial(cls, state_dim, obs_dim, num_latent, num_inducing, control_dim=0, *,
                rng=None, z=None, x0=None, window=DEFAULT_WINDOW, hidden=DEFAULT_HIDDEN,
                independent=False, process_noise=0.05**2, obs_noise=0.1**2,
                signal_variance=1.0, lengthscale=1.0, a_scale=0.1):
        """Default initialization.

        A is the identity padded or truncated to (d_x, Q) plus N(0, a_scale^2)
        entries (exactly the identity when ``independent``). Variational means are
        zero and every S_q is ``0.1 * signal_variance * I``.
        """
        rng = np.random.default_rng(0) if rng is None else rng
        d_in = state_dim + control_dim
        if independent:
            if num_latent != state_dim:
                raise ContractError("the independent model needs Q = d_x")
            coreg = Coregionalization(np.eye(state_dim))
        else:
            coreg = Coregionalization.initial(state_dim, num_latent, rng, a_scale)
        if z is None:
            z = rng.uniform(-2.0, 2.0, size=(num_inducing, d_in))
        z = np.asarray(z, dtype=float)
        ell = np.full((num_latent, d_in), float(lengthscale))
        s2 = np.full(num_latent, float(signal_variance))
        L = np.tile(np.sqrt(0.1 * signal_variance) * np.eye(num_inducing), (num_latent, 1, 1))
        inducing = InducingSet(z, np.zeros((num_latent, num_inducing)), L)
        return cls(
            coreg=coreg,
            signal_variance=s2,
            lengthscales=ell,
            inducing=inducing,
            process_noise=np.full(state_dim, float(process_noise)),
            obs_noise=np.full(obs_dim, float(obs_noise)),
            recognition=RecognitionNet.init(window, obs_dim, state_dim, hidden, rng),
            x0=None if x0 is None else np.asarray(x0, dtype=float),
        ).validate()


# ----------------------------------------------------------------------------
# pure jax building blocks


def kzz_factors(params: GPSSMParams):
    z = jnp.asarray(params.inducing.z)
    Kzz = se_kernel(z, z, jnp.asarray(params.signal_variance), jnp.asarray(params.lengthscales))
    L, _ = cholesky_jittered(Kzz)
    return Kzz, L


def kl_inducing_impl(params: GPSSMParams, kzz_chol):
    """Sum over latent GPs of KL(N(m_q, S_q) || N(0, Kzz_q))."""
    means = jnp.asarray(params.inducing.means)
    return jnp.sum(kl_from_factors(means, jnp.asarray(params.inducing.chol_factors),
                                   jnp.zeros_like(means), kzz_chol))


def step_operators(params: GPSSMParams, kzz_chol):
    """Per-ELBO precomputation so each time step costs one batched product.

    With ``Kzz = L L^T`` and ``S_q = L_S L_S^T`` let ``P = L^-1`` and
    ``M = L_S^T Kzz^-1``. Returns the stacked (Q, 1 + 2m, m) operator
    ``[m_q^T Kzz^-1; P; M]`` and the sign vector that turns the squared rows
    into ``-|P k|^2 + |M k|^2``.
    """
    Q, m = kzz_chol.shape[0], kzz_chol.shape[-1]
    eye = jnp.broadcast_to(jnp.eye(m), (Q, m, m))
    P = solve_triangular(kzz_chol, eye, lower=True)
    kinv = jnp.swapaxes(P, -1, -2) @ P
    M = jnp.swapaxes(jnp.asarray(params.inducing.chol_factors), -1, -2) @ kinv
    mean_row = jnp.einsum("qj,qjk->qk", jnp.asarray(params.inducing.means), kinv)[:, None, :]
    signs = jnp.concatenate([-jnp.ones(m), jnp.ones(m)])
    zs = jnp.asarray(params.inducing.z)[None] / jnp.asarray(params.lengthscales)[:, None, :]
    return jnp.concatenate([mean_row, P, M], axis=1), signs, zs


def step_moments_impl(params: GPSSMParams, kzz_chol, x_prev, control=None, ops=None):
    """Moments of q(x_t | x_{t-1}) for a batch of previous states.

    Args:
        x_prev: (n, d_x).
        control: (n, d_c) or None.
        ops: optional output of :func:`step_operators`; when given, the fast
            product form is used instead of triangular solves.

    Returns:
        mean (n, d_x), cov (n, d_x, d_x) and the smallest raw latent variance.
    """
    gp_in = x_prev if control is None else jnp.concatenate([x_prev, control], axis=-1)
    s2 = jnp.asarray(params.signal_variance)
    if ops is None:
        m_h, v_h = sparse_moments(
            gp_in, jnp.asarray(params.inducing.z), s2, jnp.asarray(params.lengthscales),
            jnp.asarray(params.inducing.means), jnp.asarray(params.inducing.chol_factors),
            kzz_chol=kzz_chol)
    else:
        op, signs, zs = ops
        xs = gp_in[None] / jnp.asarray(params.lengthscales)[:, None, :]  # (Q, n, d_in)
        diff = zs[:, :, None, :] - xs[:, None, :, :]
        Kzx = s2[:, None, None] * jnp.exp(-0.5 * jnp.sum(diff**2, axis=-1))
        proj = op @ Kzx  # (Q, 1 + 2m, n)
        m_h = proj[:, 0, :]
        v_h = s2[:, None] + jnp.einsum("k,qkn->qn", signs, proj[:, 1:, :] ** 2)
    v_min = jnp.min(v_h)
    v_h = jnp.maximum(v_h, 0.0)
    A = jnp.asarray(params.coreg.A)
    mean = m_h.T @ A.T
    cov = jnp.einsum("dq,qn,eq->nde", A, v_h, A) + jnp.diag(jnp.asarray(params.process_noise))
    return mean, cov, v_min


def x0_moments_impl(params: GPSSMParams, observations):
    """Mean and diagonal variance of q(x0)."""
    if params.x0 is not None:
        mean = jnp.asarray(params.x0, dtype=jnp.float64)
        return mean, jnp.full(mean.shape, KNOWN_X0_VARIANCE)
    net = params.recognition
    mean, logvar = net(jnp.reshape(observations[:net.window], -1))
    return mean, jnp.exp(logvar)


def kl_x0_impl(params: GPSSMParams, mean, var):
    if params.x0 is not None:
        return jnp.zeros(())
    return 0.5 * jnp.sum(var + mean**2 - 1.0 - jnp.log(var))


def rollout_impl(params: GPSSMParams, kzz_chol, x0, eps, controls=None):
    """Reparameterized rollout of a batch of paths.

    Args:
        x0: (S, d_x) initial states.
        eps: (T, S, d_x) standard-normal noise for steps 1..T.
        controls: (T, d_c) or None.

    Returns:
        states (T, S, d_x) for t = 1..T and the smallest raw latent variance.
    """

    ops = step_operators(params, kzz_chol)

    def body(x_prev, inputs):
        e, c = inputs
        cc = None if c is None else jnp.broadcast_to(c, (x_prev.shape[0], c.shape[-1]))
        mean, cov, vmin = step_moments_impl(params, kzz_chol, x_prev, cc, ops)
        # process noise keeps cov positive definite
        L = jnp.linalg.cholesky(cov)
        x = mean + jnp.einsum("sde,se->sd", L, e)
        return x, (x, vmin)

    _, (xs, vmins) = lax.scan(body, x0, (eps, controls))
    return xs, jnp.min(vmins)


def emission_loglik_impl(obs_noise, x, y):
    d_y = y.shape[-1]
    r = y - x[..., :d_y]
    return -0.5 * jnp.sum(LOG_2PI + jnp.log(obs_noise) + r**2 / obs_noise, axis=-1)


def elbo_impl(params: GPSSMParams, observations, controls, eps):
    """ELBO terms with supplied noise ``eps`` of shape (S, T + 1, d_x)."""
    Kzz, kzz_chol = kzz_factors(params)
    kl_u = kl_inducing_impl(params, kzz_chol)
    m0, v0 = x0_moments_impl(params, observations)
    kl_x0 = kl_x0_impl(params, m0, v0)
    x0 = m0 + jnp.sqrt(v0) * eps[:, 0, :]
    xs, vmin = rollout_impl(params, kzz_chol, x0, jnp.swapaxes(eps[:, 1:, :], 0, 1), controls)
    ll = emission_loglik_impl(jnp.asarray(params.obs_noise), xs, observations[:, None, :])
    expectation = jnp.mean(jnp.sum(ll, axis=0))
    return {
        "elbo": expectation - kl_u - kl_x0,
        "expectation": expectation,
        "kl_u": kl_u,
        "kl_x0": kl_x0,
        "min_var": vmin,
    }


# ----------------------------------------------------------------------------
# public operations


def _controls_array(params, traj):
    if params.control_dim != traj.control_dim:
        raise ContractError(
            f"model expects {params.control_dim} control channels, trajectory has {traj.control_dim}")
    return None if traj.controls is None else jnp.asarray(traj.controls)


def _check_min_var(vmin, where=""):
    if not is_traced(vmin) and float(vmin) < -VAR_CLAMP_TOL:
        raise NumericalConsistencyError(f"negative latent variance {float(vmin):.3e}{where}")


def recognize_x0(params: GPSSMParams, traj: Trajectory) -> GaussianBelief:
    """q(x0): a near point mass at the known x0, otherwise the recognition network output."""
    if params.x0 is None and traj.length < params.recognition.window:
        raise ContractError(
            f"trajectory length {traj.length} is shorter than the recognition window "
            f"{params.recognition.window}")
    mean, var = x0_moments_impl(params, jnp.asarray(traj.observations))
    return GaussianBelief.diagonal(mean, var)


def conditional_step(params: GPSSMParams, x_prev, control=None) -> GaussianBelief:
    """q(x_t | x_{t-1}) = N(A m_h, A S_h A^T + Q)."""
    x_prev = jnp.asarray(x_prev, dtype=jnp.float64).reshape(1, -1)
    if x_prev.shape[1] != params.state_dim:
        raise ContractError("x_prev has the wrong dimension")
    if not np.all(np.isfinite(np.asarray(x_prev))):
        raise ContractError("x_prev must be finite")
    if (control is None) != (params.control_dim == 0):
        raise ContractError("control must be given iff the model has control inputs")
    c = None if control is None else jnp.asarray(control, dtype=jnp.float64).reshape(1, -1)
    _, L = kzz_factors(params)
    mean, cov, vmin = step_moments_impl(params, L, x_prev, c)
    _check_min_var(vmin)
    return GaussianBelief(mean[0], cov[0])


def sample_states(params: GPSSMParams, traj: Trajectory, eps_stream):
    """One reparameterized state path x_{0:T}, shape (T + 1, d_x)."""
    T, d_x = traj.length, params.state_dim
    eps = jnp.asarray(eps_stream, dtype=jnp.float64).reshape(-1)
    if eps.shape[0] != (T + 1) * d_x:
        raise ContractError(f"eps_stream must hold exactly {(T + 1) * d_x} values")
    eps = eps.reshape(T + 1, d_x)
    q0 = recognize_x0(params, traj)
    controls = _controls_array(params, traj)
    _, L = kzz_factors(params)
    x0 = q0.mean + jnp.sqrt(q0.var) * eps[0]
    xs, vmin = rollout_impl(params, L, x0[None], eps[1:, None, :], controls)
    path = jnp.concatenate([x0[None], xs[:, 0, :]], axis=0)
    _check_min_var(vmin)
    bad = ~np.all(np.isfinite(np.asarray(path)), axis=1)
    if bad.any():
        raise NumericalConsistencyError(f"state sample became non-finite at t={int(np.argmax(bad))}")
    return path


def sample_paths(params: GPSSMParams, traj: Trajectory, eps):
    """A batch of state paths x_{0:T} from (S, T + 1, d_x) standard-normal noise."""
    eps = jnp.asarray(eps, dtype=jnp.float64)
    T, d_x = traj.length, params.state_dim
    if eps.ndim != 3 or eps.shape[1:] != (T + 1, d_x):
        raise ContractError(f"eps must have shape (S, {T + 1}, {d_x})")
    q0 = recognize_x0(params, traj)
    _, L = kzz_factors(params)
    x0 = q0.mean + jnp.sqrt(q0.var) * eps[:, 0, :]
    xs, vmin = rollout_impl(params, L, x0, jnp.swapaxes(eps[:, 1:, :], 0, 1),
                            _controls_array(params, traj))
    _check_min_var(vmin)
    return np.concatenate([np.asarray(x0)[:, None, :], np.swapaxes(np.asarray(xs), 0, 1)], axis=1)


def mean_path(params: GPSSMParams, traj: Trajectory):
    """Noise-free rollout x_{0:T}: every state is the mean of the previous step's conditional."""
    return sample_states(params, traj, np.zeros((traj.length + 1) * params.state_dim))


def emission_loglik(params: GPSSMParams, x_t, y_t):
    """log N(y_t | C x_t, diag(R))."""
    x_t = jnp.asarray(x_t, dtype=jnp.float64)
    y_t = jnp.asarray(y_t, dtype=jnp.float64)
    if x_t.shape != (params.state_dim,) or y_t.shape != (params.obs_dim,):
        raise ContractError("x_t / y_t have the wrong dimension")
    return emission_loglik_impl(jnp.asarray(params.obs_noise), x_t, y_t)


def elbo(params: GPSSMParams, traj: Trajectory, n_samples: int, eps, *, terms=False):
    """Monte-Carlo ELBO with caller-supplied noise of n_samples * (T + 1) * d_x values.

    Returns the scalar ELBO, or the dict of its terms when ``terms`` is true.
    """
    if n_samples < 1:
        raise ContractError("n_samples must be >= 1")
    T, d_x = traj.length, params.state_dim
    eps = jnp.asarray(eps, dtype=jnp.float64)
    if eps.size != n_samples * (T + 1) * d_x:
        raise ContractError(f"eps must hold n_samples * (T + 1) * d_x = {n_samples * (T + 1) * d_x} values")
    if params.x0 is None and T < params.recognition.window:
        raise ContractError("trajectory shorter than the recognition window")
    out = elbo_impl(params, jnp.asarray(traj.observations), _controls_array(params, traj),
                    eps.reshape(n_samples, T + 1, d_x))
    _check_min_var(out["min_var"])
    return out if terms else out["elbo"]


def forecast(params: GPSSMParams, traj: Trajectory, horizon: int, controls=None):
    """Free-running mean-path forecast of the next ``horizon`` observations.

    The state is rolled over ``traj`` with zero noise, then ``horizon`` further
    steps driven by ``controls`` (required when the model has control inputs).

    Returns:
        (horizon, d_y) predicted observations.
    """
    if horizon < 1:
        raise ContractError("horizon must be >= 1")
    if params.control_dim:
        if controls is None or np.asarray(controls).shape[0] < horizon:
            raise ContractError(f"forecasting needs {horizon} rows of future controls")
        controls = jnp.asarray(np.asarray(controls, dtype=float)[:horizon].reshape(horizon, -1))
    else:
        controls = None
    x_end = mean_path(params, traj)[-1]
    _, L = kzz_factors(params)
    xs, vmin = rollout_impl(params, L, x_end[None], jnp.zeros((horizon, 1, params.state_dim)), controls)
    _check_min_var(vmin)
    return np.asarray(xs[:, 0, :params.obs_dim])

