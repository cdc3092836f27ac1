import csv
import json

import numpy as np
import pytest

from odgpssm.data import write_manifest, write_trajectory
from odgpssm.exceptions import ConfigError, ContractError
from odgpssm.experiments import (ExperimentConfig, ResultRecord, complexity_probe, rmse,
                                 run_q_sweep, run_sid, run_synthetic, uniform_inducing_inputs)
from odgpssm.model import Trajectory


def toy_dataset(directory, T=60, seed=0):
    r = np.random.default_rng(seed)
    u = np.sin(np.arange(T) / 5.0)[:, None] + 0.1 * r.normal(size=(T, 1))
    y = np.zeros((T, 1))
    for t in range(1, T):
        y[t] = 0.8 * y[t - 1] + 0.5 * u[t - 1] + 0.05 * r.normal()
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "toy.csv"
    write_trajectory(Trajectory(y, u), path)
    write_manifest(directory)
    return path


def sid_config(path, **kw):
    doc = dict(task="sid-dataset", dataset=str(path), state_dim=2, num_latent=2, num_inducing=5,
               epochs=3, n_samples=2, horizon=10, window=3, seeds=[0], x0_mode="recognized")
    doc.update(kw)
    return ExperimentConfig.from_dict(doc)


class TestConfig:
    def test_defaults(self):
        c = ExperimentConfig()
        assert c.epochs == 3000 and c.n_samples == 8 and c.num_inducing == 20
        assert c.seeds == (0, 1, 2, 3, 4) and c.learning_rate == 0.01

    def test_json_round_trip(self, tmp_path):
        c = ExperimentConfig(epochs=7, seeds=(3, 4))
        (tmp_path / "c.json").write_text(json.dumps(c.to_dict()))
        assert ExperimentConfig.from_json(tmp_path / "c.json") == c

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="bogus"):
            ExperimentConfig.from_dict({"bogus": 1})

    @pytest.mark.parametrize("change", [
        {"task": "nope"}, {"x0_mode": "guess"}, {"seeds": []}, {"seeds": [-1]},
        {"num_inducing": 0}, {"epochs": -1}, {"learning_rate": 0}, {"split": 1.0},
        {"state_dim": 3}, {"pretrain_pairs": 500}, {"process_noise": [0.1]},
    ])
    def test_invalid(self, change):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(change)

    def test_dataset_required(self):
        with pytest.raises(ConfigError, match="dataset"):
            ExperimentConfig(task="sid-dataset")

    def test_bad_json(self, tmp_path):
        (tmp_path / "c.json").write_text("{")
        with pytest.raises(ConfigError):
            ExperimentConfig.from_json(tmp_path / "c.json")
        with pytest.raises(ConfigError):
            ExperimentConfig.from_json(tmp_path / "missing.json")


class TestRecord:
    def test_round_trip(self):
        r = ResultRecord(config={"a": 1}, per_seed={"m": [0.5, 0.25]},
                         summary={"m": {"mean": 0.375, "std": 0.125}}, extra={"k": [1, 2]})
        assert ResultRecord.from_json(r.to_json()) == r

    def test_negative_rmse_rejected(self):
        with pytest.raises(ContractError):
            ResultRecord(config={}, per_seed={"m": [0.1, -0.1]}, summary={})

    def test_append_only(self, tmp_path):
        r = ResultRecord(config={}, per_seed={}, summary={})
        r.write(tmp_path / "result.json")
        with pytest.raises(ContractError, match="append-only"):
            r.write(tmp_path / "result.json")


class TestRmse:
    def test_identical(self):
        assert rmse([1.0, 2.0], [1.0, 2.0]) == 0.0

    def test_unit_offset(self):
        assert rmse(np.zeros(5), np.ones(5)) == pytest.approx(1.0)

    def test_hand_case(self):
        assert rmse([0.0, 0.0], [1.0, 3.0]) == pytest.approx(np.sqrt(5.0))

    def test_checks(self):
        with pytest.raises(ContractError):
            rmse([1.0], [1.0, 2.0])
        with pytest.raises(ContractError):
            rmse([], [])


def test_uniform_inducing_inputs(rng):
    y = rng.normal(size=(30, 2))
    z = uniform_inducing_inputs(y, 7, 4, rng)
    assert z.shape == (7, 4)
    assert np.all(z[:, :2] >= y.min(0)) and np.all(z[:, :2] <= y.max(0))
    assert np.all(z[:, 2:] == 0)


SYN = dict(task="synthetic-car", length=20, pretrain_pairs=6, num_inducing=6, epochs=3,
           n_samples=2, eval_samples=4, seeds=[0, 1])


class TestSynthetic:
    def test_artifacts(self, tmp_path):
        rec = run_synthetic(ExperimentConfig.from_dict(SYN), tmp_path)
        names = sorted(p.name for p in tmp_path.iterdir())
        assert names == ["checkpoint.json", "result.json", "traces_dim1.csv", "traces_dim2.csv",
                         "traces_dim3.csv", "traces_dim4.csv", "training_log.csv"]
        for model in ("odgpssm", "baseline", "smoother"):
            assert np.asarray(rec.per_seed[model]).shape == (2, 4)
        with open(tmp_path / "traces_dim3.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["seed", "time", "true", "odgpssm", "baseline", "smoother"]
        assert len(rows) == 1 + 2 * 20
        with open(tmp_path / "training_log.csv") as fh:
            assert len(list(csv.reader(fh))) == 1 + 2 * 2 * 3
        back = ResultRecord.from_json((tmp_path / "result.json").read_text())
        assert back.per_seed == rec.per_seed
        assert set(rec.identifiability) == {"0", "1"}

    def test_reproducible(self):
        c = ExperimentConfig.from_dict({**SYN, "seeds": [2]})
        a, b = run_synthetic(c), run_synthetic(c)
        assert a.per_seed == b.per_seed

    def test_refuses_existing_record(self, tmp_path):
        (tmp_path / "result.json").write_text("{}")
        with pytest.raises(ContractError):
            run_synthetic(ExperimentConfig.from_dict(SYN), tmp_path)


class TestSid:
    def test_run_and_artifacts(self, tmp_path):
        path = toy_dataset(tmp_path / "data")
        rec = run_sid(sid_config(path), tmp_path / "out")
        assert set(rec.per_seed) == {"odgpssm", "prssm"}
        assert all(np.isfinite(v) and v >= 0 for v in rec.per_seed["odgpssm"])
        assert rec.extra["train_length"] == 30 and rec.extra["test_length"] == 30
        assert (tmp_path / "out" / "result.json").exists()

    def test_reproducible(self, tmp_path):
        path = toy_dataset(tmp_path / "data")
        c = sid_config(path)
        assert run_sid(c).per_seed == run_sid(c).per_seed

    def test_horizon_longer_than_test_part(self, tmp_path):
        path = toy_dataset(tmp_path / "data", T=40)
        with pytest.raises(ConfigError, match="horizon <= 20"):
            run_sid(sid_config(path, horizon=100))

    def test_known_x0_rejected(self, tmp_path):
        path = toy_dataset(tmp_path / "data")
        with pytest.raises(ConfigError, match="recognized"):
            run_sid(sid_config(path, x0_mode="known"))

    def test_without_controls(self, tmp_path):
        path = toy_dataset(tmp_path / "data")
        rec = run_sid(sid_config(path, controls=False), models=("odgpssm",))
        assert len(rec.per_seed["odgpssm"]) == 1


class TestQSweep:
    def test_rows_and_identifiability(self, tmp_path):
        path = toy_dataset(tmp_path / "data")
        c = sid_config(path, task="q-sweep", q_values=[1, 2, 3])
        records = run_q_sweep(c, tmp_path / "out")
        assert [r.extra["num_latent"] for r in records] == [1, 2, 3]
        flags = [r.extra["structural_identifiability"]["identifiable"] for r in records]
        assert flags == [True, True, False]
        with open(tmp_path / "out" / "qsweep.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["Q", "rmse_mean", "rmse_std", "identifiable"] and len(rows) == 4
        assert (tmp_path / "out" / "Q2" / "result.json").exists()


def test_probe(tmp_path):
    c = ExperimentConfig(task="probe", probe_lengths=(10, 20), probe_latent=(2,), probe_repeats=2,
                         num_inducing=5, n_samples=2)
    rows = complexity_probe(c, tmp_path)
    assert [(r["T"], r["Q"]) for r in rows] == [(10, 2), (20, 2)]
    assert all(r["median_ms"] > 0 for r in rows)
    assert (tmp_path / "probe.csv").exists()


def test_interleaved_timings_shape_and_order():
    from odgpssm.experiments import interleaved_timings

    seen = []
    calls = [lambda: seen.append("a"), lambda: seen.append("b")]
    t = interleaved_timings(calls, repeats=3, loops=2)
    assert t.shape == (2, 3) and np.all(t >= 0)
    # two warm-ups each, then alternating blocks of `loops` calls
    assert seen == ["a", "a", "b", "b"] + ["a", "a", "b", "b"] * 3
