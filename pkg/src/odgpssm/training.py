"""Parameter flattening, gradients, Adam and the training loop."""

from __future__ import annotations

import functools
import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import jax
import jax.numpy as jnp
import numpy as np

from .exceptions import ContractError, NumericalConsistencyError
from .kernels import VAR_CLAMP_TOL, InducingSet, se_kernel
from .linalg import cholesky_jittered
from .lmc import Coregionalization, recover_latent
from .model import GPSSMParams, RecognitionNet, Trajectory, elbo_impl

logger = logging.getLogger(__name__)

IDENTITY, LOG, TRIL = "identity", "log", "tril_logdiag"


@dataclass(frozen=True)
class Segment:
    name: str
    shape: tuple
    transform: str

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=int))


@dataclass(frozen=True)
class Layout:
    """Ordered parameter segments plus the static (non-trainable) model settings."""

    segments: tuple
    x0: Optional[tuple] = None
    window: int = 1

    @property
    def size(self) -> int:
        return sum(s.size for s in self.segments)

    def offsets(self):
        out, start = {}, 0
        for s in self.segments:
            out[s.name] = (start, start + s.size)
            start += s.size
        return out

    def segment_of(self, index):
        for name, (a, b) in self.offsets().items():
            if a <= index < b:
                return name
        raise IndexError(index)


@dataclass(frozen=True)
class FlatParams:
    """Unconstrained parameter vector with the layout needed to rebuild the model."""

    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).reshape(-1)
        if v.shape[0] != self.layout.size:
            raise ContractError(f"expected {self.layout.size} values, got {v.shape[0]}")
        object.__setattr__(self, "values", v)

    def to_model(self) -> GPSSMParams:
        return unpack(self.values, self.layout)

    def segment(self, name):
        a, b = self.layout.offsets()[name]
        return self.values[a:b]


def _tril_size(m):
    return m * (m + 1) // 2


def layout_for(params: GPSSMParams) -> Layout:
    d_x, d_y, Q = params.state_dim, params.obs_dim, params.num_latent
    m, d_in = params.num_inducing, params.input_dim
    net = params.recognition
    segs = (
        Segment("A", (d_x, Q), IDENTITY),
        Segment("signal_variance", (Q,), LOG),
        Segment("lengthscales", (Q, d_in), LOG),
        Segment("z", (m, d_in), IDENTITY),
        Segment("u_mean", (Q, m), IDENTITY),
        Segment("u_chol", (Q, _tril_size(m)), TRIL),
        Segment("process_noise", (d_x,), LOG),
        Segment("obs_noise", (d_y,), LOG),
        Segment("rec_W1", tuple(np.shape(net.W1)), IDENTITY),
        Segment("rec_b1", tuple(np.shape(net.b1)), IDENTITY),
        Segment("rec_W2", tuple(np.shape(net.W2)), IDENTITY),
        Segment("rec_b2", tuple(np.shape(net.b2)), IDENTITY),
    )
    x0 = None if params.x0 is None else tuple(float(v) for v in np.asarray(params.x0))
    return Layout(segs, x0, int(net.window))


def _to_unconstrained(seg: Segment, value):
    value = np.asarray(value, dtype=float)
    if seg.transform == LOG:
        return np.log(value)
    if seg.transform == TRIL:
        m = value.shape[-1]
        rows, cols = np.tril_indices(m)
        out = value[..., rows, cols].copy()
        diag = rows == cols
        out[..., diag] = np.log(out[..., diag])
        return out
    return value


def _to_constrained(seg: Segment, raw):
    if seg.transform == LOG:
        return jnp.exp(raw)
    if seg.transform == TRIL:
        k = seg.shape[-1]
        m = int(round((np.sqrt(8 * k + 1) - 1) / 2))
        rows, cols = np.tril_indices(m)
        diag = rows == cols
        raw = jnp.where(diag, jnp.exp(raw), raw)
        L = jnp.zeros(seg.shape[:-1] + (m, m), dtype=raw.dtype)
        return L.at[..., rows, cols].set(raw)
    return raw


def pack(params: GPSSMParams) -> FlatParams:
    """Map a model to its unconstrained vector (log for positives, log-diagonal for factors)."""
    layout = layout_for(params)
    net = params.recognition
    values = {
        "A": params.coreg.A,
        "signal_variance": params.signal_variance,
        "lengthscales": params.lengthscales,
        "z": params.inducing.z,
        "u_mean": params.inducing.means,
        "u_chol": params.inducing.chol_factors,
        "process_noise": params.process_noise,
        "obs_noise": params.obs_noise,
        "rec_W1": net.W1, "rec_b1": net.b1, "rec_W2": net.W2, "rec_b2": net.b2,
    }
    parts = [_to_unconstrained(s, values[s.name]).reshape(-1) for s in layout.segments]
    return FlatParams(np.concatenate(parts), layout)


def unpack(values, layout: Layout) -> GPSSMParams:
    """Inverse of :func:`pack`; traceable, so gradients flow to ``values``."""
    values = jnp.asarray(values)
    p, start = {}, 0
    for s in layout.segments:
        raw = values[start:start + s.size].reshape(s.shape)
        p[s.name] = _to_constrained(s, raw)
        start += s.size
    return GPSSMParams(
        coreg=Coregionalization(p["A"]),
        signal_variance=p["signal_variance"],
        lengthscales=p["lengthscales"],
        inducing=InducingSet(p["z"], p["u_mean"], p["u_chol"]),
        process_noise=p["process_noise"],
        obs_noise=p["obs_noise"],
        recognition=RecognitionNet(layout.window, p["rec_W1"], p["rec_b1"], p["rec_W2"], p["rec_b2"]),
        x0=None if layout.x0 is None else np.asarray(layout.x0),
    )


@functools.lru_cache(maxsize=64)
def _objective(layout: Layout):
    def terms(values, y, controls, eps):
        return elbo_impl(unpack(values, layout), y, controls, eps)

    def loss(values, y, controls, eps):
        out = terms(values, y, controls, eps)
        return out["elbo"], out

    return jax.jit(terms), jax.jit(jax.value_and_grad(loss, has_aux=True))


def _eps_shape(traj: Trajectory, n_samples, layout):
    d_x = layout.segments[0].shape[0]
    return (n_samples, traj.length + 1, d_x)


def _as_inputs(traj: Trajectory):
    y = jnp.asarray(traj.observations)
    c = None if traj.controls is None else jnp.asarray(traj.controls)
    return y, c


def elbo_terms(flat: FlatParams, traj: Trajectory, eps):
    """ELBO and its terms (expectation, kl_u, kl_x0) as floats, for fixed noise."""
    eps = np.asarray(eps, dtype=float)
    n = eps.size // ((traj.length + 1) * flat.layout.segments[0].shape[0])
    fn, _ = _objective(flat.layout)
    out = fn(flat.values, *_as_inputs(traj), eps.reshape(_eps_shape(traj, n, flat.layout)))
    return {k: float(v) for k, v in out.items()}


def grad_elbo(flat: FlatParams, traj: Trajectory, eps, *, return_terms=False):
    """Exact gradient of the eps-fixed ELBO with respect to the unconstrained vector.

    Raises:
        NumericalConsistencyError: naming the parameter segment holding the first
            non-finite gradient entry.
    """
    eps = np.asarray(eps, dtype=float)
    d_x = flat.layout.segments[0].shape[0]
    per = (traj.length + 1) * d_x
    if eps.size == 0 or eps.size % per:
        raise ContractError(f"eps size must be a positive multiple of (T + 1) * d_x = {per}")
    _, vg = _objective(flat.layout)
    (_, out), g = vg(flat.values, *_as_inputs(traj), eps.reshape(-1, traj.length + 1, d_x))
    g = np.asarray(g)
    bad = ~np.isfinite(g)
    if bad.any():
        seg = flat.layout.segment_of(int(np.argmax(bad)))
        raise NumericalConsistencyError(f"non-finite gradient in parameter segment '{seg}'")
    if return_terms:
        return g, {k: float(v) for k, v in out.items()}
    return g


@dataclass(frozen=True)
class AdamState:
    step: int
    m: np.ndarray
    v: np.ndarray
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n, **hyper):
        return cls(0, np.zeros(n), np.zeros(n), **hyper)


def adam_step(state: AdamState, params, grad):
    """One bias-corrected Adam *ascent* step.

    ``params`` is a :class:`FlatParams` or a plain vector; the same type is returned.
    """
    values = params.values if isinstance(params, FlatParams) else np.asarray(params, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if grad.shape != values.shape or state.m.shape != values.shape:
        raise ContractError("gradient, moments and parameters must have equal length")
    t = state.step + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grad
    v = state.beta2 * state.v + (1 - state.beta2) * grad**2
    m_hat = m / (1 - state.beta1**t)
    v_hat = v / (1 - state.beta2**t)
    new_values = values + state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(t, m, v, state.learning_rate, state.beta1, state.beta2, state.eps)
    if isinstance(params, FlatParams):
        return new_state, FlatParams(new_values, params.layout)
    return new_state, new_values


# ----------------------------------------------------------------------------
# pretraining on true state pairs


def _gp_marglik(log_theta, X, y):
    """Exact log marginal likelihood of a zero-mean SE GP with Gaussian noise."""
    s2, noise = jnp.exp(log_theta[0]), jnp.exp(log_theta[1])
    ell = jnp.exp(log_theta[2:])
    K = se_kernel(X, X, s2[None], ell[None])[0] + noise * jnp.eye(X.shape[0])
    L, _ = cholesky_jittered(K)
    alpha = jax.scipy.linalg.cho_solve((L, True), y)
    return -0.5 * y @ alpha - jnp.sum(jnp.log(jnp.diagonal(L))) - 0.5 * X.shape[0] * jnp.log(2 * jnp.pi)


_marglik_grad = jax.jit(jax.value_and_grad(_gp_marglik))


def fit_kernel_hyperparameters(X, y, *, steps=500, learning_rate=0.01, init=None):
    """Maximize the exact marginal likelihood with Adam.

    Returns ``(signal_variance, lengthscales, noise_variance)``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if init is None:
        var = max(float(np.var(y)), 1e-6)
        spread = np.maximum(X.std(axis=0), 1e-3) if X.shape[0] > 1 else np.ones(X.shape[1])
        init = np.concatenate([[np.log(var), np.log(0.01 * var)], np.log(spread)])
    theta = np.asarray(init, dtype=float)
    state = AdamState.zeros(theta.size, learning_rate=learning_rate)
    for _ in range(steps):
        _, g = _marglik_grad(theta, X, y)
        g = np.asarray(g)
        if not np.all(np.isfinite(g)):
            break
        state, theta = adam_step(state, theta, g)
    return float(np.exp(theta[0])), np.exp(theta[2:]), float(np.exp(theta[1]))


def _optimal_inducing(z, X, h, s2, ell, noise):
    """Optimal Gaussian q(u) for Gaussian-noise regression of ``h`` on ``X``.

    ``S = Kzz (Kzz + Kzx Kxz / noise)^-1 Kzz``, ``m = S Kzz^-1 Kzx h / noise``.
    """
    Kzz = np.asarray(se_kernel(z, z, np.array([s2]), ell[None])[0])
    Kzx = np.asarray(se_kernel(z, X, np.array([s2]), ell[None])[0])
    Kzz = Kzz + 1e-8 * s2 * np.eye(len(z))
    B = Kzz + Kzx @ Kzx.T / noise
    Lb = np.asarray(cholesky_jittered(B)[0])
    # Kzz B^-1 Kzz
    W = np.linalg.solve(Lb, Kzz)
    S = W.T @ W
    mean = Kzz @ np.linalg.solve(B, Kzx @ h) / noise
    S = 0.5 * (S + S.T)
    L, _ = cholesky_jittered(S)
    return mean, np.asarray(L)


def pretrain_transition(params: GPSSMParams, inputs, outputs, *, steps=500, rng=None,
                        learning_rate=0.01) -> GPSSMParams:
    """Initialize the transition GPs from observed (x_{t-1}, x_t) state pairs.

    Inducing inputs are drawn from the pair inputs (with replacement only when
    there are fewer pairs than inducing points), latent targets are recovered
    through the mixing matrix, each latent GP's hyperparameters are fitted by
    marginal likelihood and q(u_q) is set to the matching optimal conditional.

    Args:
        inputs: (n, d_in) GP inputs (previous state, plus controls if any).
        outputs: (n, d_x) next states.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    X = np.atleast_2d(np.asarray(inputs, dtype=float))
    F = np.atleast_2d(np.asarray(outputs, dtype=float))
    n = X.shape[0]
    if n < 1 or F.shape[0] != n:
        raise ContractError("need n >= 1 matching input/output pairs")
    if X.shape[1] != params.input_dim or F.shape[1] != params.state_dim:
        raise ContractError("pair dimensions do not match the model")
    H = recover_latent(params.coreg, F)  # (n, Q)
    m = params.num_inducing
    if n >= m:
        idx = rng.choice(n, size=m, replace=False)
        z = X[idx]
    else:
        idx = rng.choice(n, size=m, replace=True)
        z = X[idx].copy()
        # repeated draws get a small offset so that Kzz stays well conditioned
        seen = set()
        scale = 1e-2 * (X.std(axis=0) + 1e-3)
        for i, j in enumerate(idx):
            if j in seen:
                z[i] = z[i] + scale * rng.standard_normal(X.shape[1])
            seen.add(j)
    Q = params.num_latent
    s2 = np.empty(Q)
    ell = np.empty((Q, X.shape[1]))
    means = np.empty((Q, m))
    chols = np.empty((Q, m, m))
    for q in range(Q):
        s2[q], ell[q], noise = fit_kernel_hyperparameters(X, H[:, q], steps=steps,
                                                          learning_rate=learning_rate)
        means[q], chols[q] = _optimal_inducing(z, X, H[:, q], s2[q], ell[q], noise)
    return params.with_changes(signal_variance=s2, lengthscales=ell,
                               inducing=InducingSet(z, means, chols))


# ----------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    epochs: int = 3000
    learning_rate: float = 0.01
    n_samples: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    frozen: tuple = ()

    def __post_init__(self):
        if self.epochs < 0:
            raise ContractError("epochs must be >= 0")
        if self.learning_rate <= 0:
            raise ContractError("learning rate must be positive")
        if self.n_samples < 1:
            raise ContractError("n_samples must be >= 1")


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)
    status: str = "ok"
    message: str = ""

    COLUMNS = ("epoch", "elbo", "expectation", "kl_u", "kl_x0", "wall_ms")

    def append(self, epoch, terms, wall_ms):
        self.rows.append((epoch, terms["elbo"], terms["expectation"], terms["kl_u"],
                          terms["kl_x0"], wall_ms))

    @property
    def elbo(self):
        return np.array([r[1] for r in self.rows])

    def write_csv(self, path):
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for r in self.rows:
                w.writerow([r[0]] + [repr(float(v)) for v in r[1:]])


def trainable_mask(layout: Layout, frozen=()):
    """1.0 for trainable entries, 0.0 for entries of the ``frozen`` segments."""
    offsets = layout.offsets()
    unknown = set(frozen) - set(offsets)
    if unknown:
        raise ContractError(f"unknown parameter segments {sorted(unknown)}")
    mask = np.ones(layout.size)
    for name in frozen:
        a, b = offsets[name]
        mask[a:b] = 0.0
    return mask


class TrainingAborted(NumericalConsistencyError):
    """Training hit a non-finite objective; carries the last good snapshot."""

    def __init__(self, message, params, log):
        super().__init__(message)
        self.params = params
        self.log = log


def train(config: TrainConfig, traj: Trajectory, seed: int, params: GPSSMParams,
          *, callback=None):
    """Maximize the ELBO with Adam, drawing fresh noise every epoch.

    Returns:
        (final GPSSMParams, TrainingLog). Logged terms are those of the noise
        draw used for each step, evaluated before the update.

    Raises:
        TrainingAborted: non-finite objective or gradient.
    """
    params.validate()
    if params.x0 is None and traj.length < params.recognition.window:
        raise ContractError("trajectory shorter than the recognition window")
    if params.control_dim != traj.control_dim:
        raise ContractError("trajectory and model disagree on control inputs")
    flat = pack(params)
    log = TrainingLog()
    if config.epochs == 0:
        return params, log
    rng = np.random.default_rng(seed)
    state = AdamState.zeros(flat.values.size, learning_rate=config.learning_rate,
                            beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps)
    _, vg = _objective(flat.layout)
    y, c = _as_inputs(traj)
    shape = _eps_shape(traj, config.n_samples, flat.layout)
    mask = trainable_mask(flat.layout, config.frozen)
    values = flat.values
    t0 = time.perf_counter()
    for epoch in range(config.epochs):
        eps = rng.standard_normal(shape)
        (_, out), g = vg(values, y, c, eps)
        g = np.asarray(g)
        terms = {k: float(v) for k, v in out.items()}
        if not np.isfinite(terms["elbo"]) or not np.all(np.isfinite(g)):
            log.status = "aborted"
            log.message = f"non-finite objective at epoch {epoch}"
            logger.warning(log.message)
            raise TrainingAborted(log.message, unpack(values, flat.layout), log)
        if terms["min_var"] < -VAR_CLAMP_TOL:
            log.status = "aborted"
            log.message = f"negative latent variance {terms['min_var']:.3e} at epoch {epoch}"
            raise TrainingAborted(log.message, unpack(values, flat.layout), log)
        log.append(epoch, terms, 1e3 * (time.perf_counter() - t0))
        state, values = adam_step(state, values, g * mask)
        if callback is not None:
            callback(epoch, terms)
    return unpack(values, flat.layout), log


# ----------------------------------------------------------------------------
# checkpoints

CHECKPOINT_SCHEMA = 1


def checkpoint_dict(params: GPSSMParams) -> dict:
    """JSON-ready snapshot; parameters are stored in unconstrained space."""
    flat = pack(params)
    return {
        "schema_version": CHECKPOINT_SCHEMA,
        "kernel": "squared_exponential_ard",
        "state_dim": params.state_dim,
        "obs_dim": params.obs_dim,
        "control_dim": params.control_dim,
        "num_latent": params.num_latent,
        "num_inducing": params.num_inducing,
        "recognition_window": flat.layout.window,
        "x0": None if flat.layout.x0 is None else list(flat.layout.x0),
        "segments": [
            {"name": s.name, "shape": list(s.shape), "transform": s.transform,
             "values": flat.segment(s.name).tolist()}
            for s in flat.layout.segments
        ],
    }


def params_from_checkpoint(doc: dict) -> GPSSMParams:
    if doc.get("schema_version") != CHECKPOINT_SCHEMA:
        raise ContractError(f"unsupported checkpoint schema {doc.get('schema_version')}")
    segs = tuple(Segment(s["name"], tuple(s["shape"]), s["transform"]) for s in doc["segments"])
    x0 = None if doc["x0"] is None else tuple(doc["x0"])
    layout = Layout(segs, x0, int(doc["recognition_window"]))
    values = np.concatenate([np.asarray(s["values"], dtype=float) for s in doc["segments"]])
    return unpack(values, layout)


def save_checkpoint(params: GPSSMParams, path):
    import json

    with open(path, "w") as fh:
        json.dump(checkpoint_dict(params), fh)


def load_checkpoint(path) -> GPSSMParams:
    import json

    with open(path) as fh:
        return params_from_checkpoint(json.load(fh))
