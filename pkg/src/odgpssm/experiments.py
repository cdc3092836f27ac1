"""Experiment orchestration: configs, result records and the four study runners.

Every runner is a pure function of (config, seed list): data generation,
initialization, the Adam noise stream and evaluation noise are all derived
from the seeds, so re-running a config reproduces its numbers.
"""

from __future__ import annotations

import csv
import gc
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import load_dataset, standardize, verify_dataset
from .exceptions import ConfigError, ContractError
from .lmc import Coregionalization, check_identifiability
from .model import GPSSMParams, Trajectory, forecast, sample_paths
from .oracles import car_model, kalman_filter, lgssm_generate, rts_smoother
from .training import (TrainConfig, _objective, checkpoint_dict, pack, pretrain_transition,
                       train)

logger = logging.getLogger(__name__)

TASKS = ("synthetic-car", "sid-dataset", "q-sweep", "probe")
X0_MODES = ("known", "recognized")


@dataclass
class ExperimentConfig:
    """JSON-serializable description of one experiment.

    Keys of the JSON file are the field names below; unknown keys are rejected.
    """

    task: str = "synthetic-car"
    dataset: str = None
    state_dim: int = 4
    num_latent: int = 4
    num_inducing: int = 20
    n_samples: int = 8
    epochs: int = 3000
    learning_rate: float = 0.01
    seeds: tuple = (0, 1, 2, 3, 4)
    x0_mode: str = "known"
    controls: bool = True
    horizon: int = 100
    out_dir: str = "results"
    split: float = 0.5
    window: int = 10
    # synthetic car task
    length: int = 120
    pretrain_pairs: int = 20
    process_noise: tuple = (0.01, 0.01, 0.1, 0.1)
    obs_noise: float = 0.1
    eval_samples: int = 64
    # q-sweep
    q_values: tuple = (1, 2, 3, 4, 5, 6)
    # complexity probe
    probe_lengths: tuple = (100, 200, 400)
    probe_latent: tuple = (2, 4)
    probe_repeats: int = 7

    def __post_init__(self):
        for name in ("seeds", "process_noise", "q_values", "probe_lengths", "probe_latent"):
            value = getattr(self, name)
            if isinstance(value, (list, tuple)):
                setattr(self, name, tuple(value))
        self.validate()

    def validate(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.x0_mode not in X0_MODES:
            raise ConfigError(f"x0_mode must be one of {X0_MODES}, got {self.x0_mode!r}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if any(int(s) != s or s < 0 for s in self.seeds):
            raise ConfigError("seeds must be non-negative integers")
        for name in ("state_dim", "num_latent", "num_inducing", "n_samples", "horizon",
                     "length", "eval_samples", "window", "probe_repeats"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not 0.0 < self.split < 1.0:
            raise ConfigError("split must lie in (0, 1)")
        if self.task in ("sid-dataset", "q-sweep") and not self.dataset:
            raise ConfigError(f"task {self.task} needs a dataset path")
        if self.task == "synthetic-car":
            if self.state_dim != 4:
                raise ConfigError("the car model has state_dim = 4")
            if len(self.process_noise) != 4 or min(self.process_noise) < 0 or self.obs_noise <= 0:
                raise ConfigError("process_noise needs 4 non-negative variances, obs_noise > 0")
            if not 1 <= self.pretrain_pairs <= self.length:
                raise ConfigError("pretrain_pairs must lie in [1, length]")
        if self.task == "q-sweep" and (not self.q_values or min(self.q_values) < 1):
            raise ConfigError("q_values must be a non-empty list of positive integers")
        if self.task == "probe" and (not self.probe_lengths or not self.probe_latent):
            raise ConfigError("probe_lengths and probe_latent must be non-empty")

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        return cls.from_dict(cls.read_json(path))

    @staticmethod
    def read_json(path) -> dict:
        """Raw config document, unvalidated (callers may still override keys)."""
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return doc

    def to_dict(self) -> dict:
        out = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in out.items()}

    def replace(self, **changes) -> "ExperimentConfig":
        doc = self.to_dict()
        doc.update(changes)
        return ExperimentConfig.from_dict(doc)


@dataclass
class ResultRecord:
    """Outcome of one experiment.

    ``per_seed`` maps a model name to one entry per seed (a float, or a list of
    per-dimension values); ``summary`` holds the matching mean/std.
    """

    config: dict
    per_seed: dict
    summary: dict
    identifiability: dict = field(default_factory=dict)
    training_log: str = None
    checkpoint: str = None
    wall_clock_s: float = 0.0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for model, values in self.per_seed.items():
            if np.any(np.asarray(values, dtype=float) < 0):
                raise ContractError(f"negative RMSE recorded for {model}")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "ResultRecord":
        return cls(**doc)

    @classmethod
    def from_json(cls, text: str) -> "ResultRecord":
        return cls.from_dict(json.loads(text))

    def write(self, path) -> Path:
        """Write once; an existing record is never overwritten."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        try:
            with open(path, "x") as fh:
                fh.write(self.to_json() + "\n")
        except FileExistsError:
            raise ContractError(f"{path} already exists; result records are append-only") from None
        return path


def rmse(pred, truth) -> float:
    """Root mean square over all entries."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ContractError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise ContractError("rmse of an empty array")
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def _summary(values):
    arr = np.asarray(values, dtype=float)
    return {"mean": np.mean(arr, axis=0).tolist(), "std": np.std(arr, axis=0).tolist()}


def _prepare_out(out_dir):
    if out_dir is None:
        return None
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if (out / "result.json").exists():
        raise ContractError(f"{out / 'result.json'} already exists; choose a fresh output directory")
    return out


class _LogWriter:
    """Collects per-run training logs into one long-format CSV."""

    COLUMNS = ("model", "seed", "epoch", "elbo", "expectation", "kl_u", "kl_x0", "wall_ms")

    def __init__(self):
        self.rows = []

    def add(self, model, seed, log):
        for r in log.rows:
            self.rows.append((model, seed) + tuple(r))

    def write(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for r in self.rows:
                w.writerow(list(r[:3]) + [repr(float(v)) for v in r[3:]])


def _write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh)


# ----------------------------------------------------------------------------
# synthetic car tracking


def _fit(config: ExperimentConfig, traj, seed, params, frozen=()):
    tc = TrainConfig(epochs=config.epochs, learning_rate=config.learning_rate,
                     n_samples=config.n_samples, frozen=frozen)
    return train(tc, traj, seed, params)


def run_synthetic(config: ExperimentConfig, out_dir=None) -> ResultRecord:
    """Car tracking: infer all four states from noisy positions, dependent vs independent GPs.

    Per seed: simulate the car, pretrain both models on true state pairs,
    train them with identical budgets and score the mean of sampled state
    paths against the true states per dimension. The RTS smoother is the
    exact-posterior reference.
    """
    if config.task != "synthetic-car":
        raise ConfigError("run_synthetic needs task = synthetic-car")
    out = _prepare_out(out_dir)
    t_start = time.perf_counter()
    spec = car_model(process_noise=config.process_noise, obs_noise=config.obs_noise)
    d_x, d_y, T = spec.state_dim, spec.obs_dim, config.length
    models = {"odgpssm": False, "baseline": True}
    per_seed = {name: [] for name in ("odgpssm", "baseline", "smoother")}
    traces = {d: [] for d in range(d_x)}
    logs = _LogWriter()
    checkpoints = {name: {} for name in models}
    ident = {}
    for seed in config.seeds:
        traj = lgssm_generate(spec, T, seed)
        X = traj.true_states
        smooth = rts_smoother(spec, kalman_filter(spec, traj.observations)).means
        rng = np.random.default_rng(seed)
        idx = np.sort(rng.choice(T, size=config.pretrain_pairs, replace=False))
        x0 = X[0] if config.x0_mode == "known" else None
        eval_eps = np.random.default_rng(seed).standard_normal((config.eval_samples, T + 1, d_x))
        paths = {}
        for name, independent in models.items():
            p = GPSSMParams.initial(d_x, d_y, d_x, config.num_inducing,
                                    rng=np.random.default_rng(seed), x0=x0,
                                    window=config.window, independent=independent)
            p = pretrain_transition(p, X[idx], X[idx + 1], rng=np.random.default_rng(seed))
            fitted, log = _fit(config, traj, seed, p, frozen=("A",) if independent else ())
            logs.add(name, seed, log)
            checkpoints[name][str(seed)] = checkpoint_dict(fitted)
            paths[name] = sample_paths(fitted, traj, eval_eps).mean(axis=0)[1:]
            per_seed[name].append([rmse(paths[name][:, d], X[1:, d]) for d in range(d_x)])
            if name == "odgpssm":
                ident[str(seed)] = check_identifiability(fitted.coreg).to_dict()
        per_seed["smoother"].append([rmse(smooth[:, d], X[1:, d]) for d in range(d_x)])
        for d in range(d_x):
            for t in range(T):
                traces[d].append((seed, t + 1, X[t + 1, d], paths["odgpssm"][t, d],
                                  paths["baseline"][t, d], smooth[t, d]))
        logger.info("seed %d: odgpssm %s baseline %s", seed,
                    np.round(per_seed["odgpssm"][-1], 4), np.round(per_seed["baseline"][-1], 4))
    od = np.asarray(per_seed["odgpssm"])
    base = np.asarray(per_seed["baseline"])
    sm = np.asarray(per_seed["smoother"])
    wins = int(np.sum(np.all(od[:, 2:] < base[:, 2:], axis=1)))
    extra = {
        "unobserved_dims_wins": wins,
        "smoother_dominates": bool(np.all(sm <= od + 0.02) and np.all(sm <= base + 0.02)),
        "pretrain_pairs": config.pretrain_pairs,
    }
    record = ResultRecord(
        config=config.to_dict(), per_seed=per_seed,
        summary={k: _summary(v) for k, v in per_seed.items()},
        identifiability=ident, wall_clock_s=time.perf_counter() - t_start, extra=extra)
    if out is not None:
        for d in range(d_x):
            with open(out / f"traces_dim{d + 1}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(("seed", "time", "true", "odgpssm", "baseline", "smoother"))
                for row in traces[d]:
                    w.writerow(list(row[:2]) + [repr(float(v)) for v in row[2:]])
        logs.write(out / "training_log.csv")
        _write_json(out / "checkpoint.json", checkpoints)
        record.training_log = str(out / "training_log.csv")
        record.checkpoint = str(out / "checkpoint.json")
        record.write(out / "result.json")
    return record


# ----------------------------------------------------------------------------
# system identification


def uniform_inducing_inputs(observations, num_inducing, input_dim, rng):
    """Inducing inputs uniform over the observation box, zero in the other coordinates."""
    y = np.asarray(observations, dtype=float)
    lo, hi = y.min(axis=0), y.max(axis=0)
    z = np.zeros((num_inducing, input_dim))
    d = min(y.shape[1], input_dim)
    z[:, :d] = rng.uniform(lo[:d], hi[:d], size=(num_inducing, d))
    return z


def _sid_params(config, train_part: Trajectory, num_latent, seed, independent):
    d_y, d_c = train_part.obs_dim, train_part.control_dim
    d_x = config.state_dim
    rng = np.random.default_rng(seed)
    z = uniform_inducing_inputs(train_part.observations, config.num_inducing, d_x + d_c, rng)
    p = GPSSMParams.initial(d_x, d_y, num_latent, config.num_inducing, control_dim=d_c,
                            rng=rng, z=z, window=config.window, independent=independent)
    if config.x0_mode == "known":
        raise ConfigError("system-identification data has no known x0; use x0_mode = recognized")
    return p


def load_sid_splits(config: ExperimentConfig):
    """Verified, standardized train/test parts of the configured dataset."""
    path = Path(config.dataset)
    verify_dataset(path)
    traj = load_dataset(path)
    if not config.controls and traj.controls is not None:
        traj = Trajectory(traj.observations, None, traj.true_states)
    if config.state_dim < traj.obs_dim:
        raise ConfigError(f"state_dim {config.state_dim} < observation dimension {traj.obs_dim}")
    train_part, test_part, stats = standardize(traj, config.split)
    if test_part.length < config.horizon:
        raise ConfigError(
            f"test part has {test_part.length} steps, fewer than horizon {config.horizon}; "
            f"use a horizon <= {test_part.length}")
    if train_part.length < config.window:
        raise ConfigError("training part is shorter than the recognition window")
    return train_part, test_part, stats


def _sid_models(config, num_latent):
    return {"odgpssm": (num_latent, False), "prssm": (config.state_dim, True)}


def run_sid(config: ExperimentConfig, out_dir=None, *, models=("odgpssm", "prssm"),
            num_latent=None) -> ResultRecord:
    """Train on the first part, forecast ``horizon`` steps, score on the standardized test part."""
    if config.task not in ("sid-dataset", "q-sweep"):
        raise ConfigError("run_sid needs task = sid-dataset")
    out = _prepare_out(out_dir)
    t_start = time.perf_counter()
    train_part, test_part, stats = load_sid_splits(config)
    num_latent = config.num_latent if num_latent is None else num_latent
    table = _sid_models(config, num_latent)
    unknown = set(models) - set(table)
    if unknown:
        raise ConfigError(f"unknown models {sorted(unknown)}")
    per_seed = {name: [] for name in models}
    logs = _LogWriter()
    checkpoints = {name: {} for name in models}
    ident = {}
    truth = test_part.observations[:config.horizon]
    future_u = None if test_part.controls is None else test_part.controls[:config.horizon]
    for seed in config.seeds:
        for name in models:
            Q, independent = table[name]
            p = _sid_params(config, train_part, Q, seed, independent)
            fitted, log = _fit(config, train_part, seed, p, frozen=("A",) if independent else ())
            logs.add(name, seed, log)
            checkpoints[name][str(seed)] = checkpoint_dict(fitted)
            pred = forecast(fitted, train_part, config.horizon, controls=future_u)
            per_seed[name].append(rmse(pred, truth) if np.all(np.isfinite(pred)) else float("inf"))
            if name == "odgpssm":
                ident[str(seed)] = check_identifiability(fitted.coreg).to_dict()
            logger.info("%s seed %d %s: rmse %.4f", Path(config.dataset).stem, seed, name,
                        per_seed[name][-1])
    record = ResultRecord(
        config=config.to_dict(), per_seed=per_seed,
        summary={k: _summary(v) for k, v in per_seed.items()},
        identifiability=ident, wall_clock_s=time.perf_counter() - t_start,
        extra={"num_latent": num_latent, "standardization": stats.to_dict(),
               "train_length": train_part.length, "test_length": test_part.length})
    if out is not None:
        logs.write(out / "training_log.csv")
        _write_json(out / "checkpoint.json", checkpoints)
        record.training_log = str(out / "training_log.csv")
        record.checkpoint = str(out / "checkpoint.json")
        record.write(out / "result.json")
    return record


def run_q_sweep(config: ExperimentConfig, out_dir=None):
    """One dependent model per Q with shared seeds; returns the records and writes a Q table."""
    if config.task != "q-sweep":
        raise ConfigError("run_q_sweep needs task = q-sweep")
    out = _prepare_out(out_dir)
    records = []
    rows = []
    for Q in config.q_values:
        sub = None if out is None else out / f"Q{Q}"
        rec = run_sid(config, sub, models=("odgpssm",), num_latent=Q)
        # an unidentifiable Q is reported for the structure itself, independent of the fit
        structural = check_identifiability(Coregionalization(np.eye(config.state_dim, Q)))
        rec.extra["structural_identifiability"] = structural.to_dict()
        records.append(rec)
        s = rec.summary["odgpssm"]
        rows.append((Q, s["mean"], s["std"], structural.identifiable))
    if out is not None:
        with open(out / "qsweep.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("Q", "rmse_mean", "rmse_std", "identifiable"))
            for Q, mean, std, ok in rows:
                w.writerow((Q, repr(float(mean)), repr(float(std)), ok))
        summary = ResultRecord(
            config=config.to_dict(),
            per_seed={f"Q{r[0]}": rec.per_seed["odgpssm"] for r, rec in zip(rows, records)},
            summary={f"Q{r[0]}": {"mean": r[1], "std": r[2]} for r in rows},
            identifiability={f"Q{r[0]}": rec.extra["structural_identifiability"]
                             for r, rec in zip(rows, records)},
            wall_clock_s=sum(rec.wall_clock_s for rec in records))
        summary.write(out / "result.json")
    return records


# ----------------------------------------------------------------------------
# complexity probe


def _gradient_call(params: GPSSMParams, traj: Trajectory, n_samples, seed):
    flat = pack(params)
    _, vg = _objective(flat.layout)
    eps = np.random.default_rng(seed).standard_normal((n_samples, traj.length + 1, params.state_dim))
    y = np.asarray(traj.observations)

    def call():
        vg(flat.values, y, None, eps)[1].block_until_ready()

    return call


def interleaved_timings(calls, repeats, loops=5):
    """Per-call wall-clock seconds, shape (len(calls), repeats).

    Each repetition sweeps over all calls in turn, so slow phases of a shared
    machine hit every case alike. A repetition times ``loops`` back-to-back
    calls and divides by ``loops``, as ``timeit`` does.
    """
    for call in calls:
        call()
        call()
    times = np.empty((len(calls), repeats))
    # collector pauses would land inside single repetitions
    gc_was_enabled = gc.isenabled()
    gc.collect()
    gc.disable()
    try:
        for r in range(repeats):
            for i, call in enumerate(calls):
                t0 = time.perf_counter()
                for _ in range(loops):
                    call()
                times[i, r] = (time.perf_counter() - t0) / loops
    finally:
        if gc_was_enabled:
            gc.enable()
    return times


def time_gradient(params: GPSSMParams, traj: Trajectory, n_samples, repeats, seed=0, loops=5):
    """Per-evaluation wall-clock seconds of one ELBO+gradient, ``repeats`` times."""
    return interleaved_timings([_gradient_call(params, traj, n_samples, seed)], repeats, loops)[0]


def complexity_probe(config: ExperimentConfig, out_dir=None):
    """Time one ELBO+gradient evaluation over trajectory lengths and latent counts.

    Returns:
        list of dict rows with keys T, Q, median_ms, mean_ms, std_ms.
    """
    out = _prepare_out(out_dir)
    spec = car_model(process_noise=config.process_noise, obs_noise=config.obs_noise)
    seed = int(config.seeds[0])
    cases, calls = [], []
    for Q in config.probe_latent:
        for T in config.probe_lengths:
            traj = lgssm_generate(spec, T, seed)
            p = GPSSMParams.initial(spec.state_dim, spec.obs_dim, Q, config.num_inducing,
                                    rng=np.random.default_rng(seed), x0=traj.true_states[0])
            cases.append((T, Q))
            calls.append(_gradient_call(p, traj, config.n_samples, seed))
    times = 1e3 * interleaved_timings(calls, config.probe_repeats)
    rows = []
    for (T, Q), t in zip(cases, times):
        rows.append({"T": T, "Q": Q, "median_ms": float(np.median(t)),
                     "mean_ms": float(t.mean()), "std_ms": float(t.std())})
        logger.info("T=%d Q=%d: %.2f ms", T, Q, rows[-1]["median_ms"])
    if out is not None:
        with open(out / "probe.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=("T", "Q", "median_ms", "mean_ms", "std_ms"))
            w.writeheader()
            w.writerows(rows)
        record = ResultRecord(config=config.to_dict(), per_seed={}, summary={"timings": rows})
        record.write(out / "result.json")
    return rows
