"""Command line entry point.

Exit codes: 0 success, 2 invalid configuration or arguments, 3 data problem
(missing, malformed or modified dataset), 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import write_manifest, write_trajectory
from .exceptions import (ConfigError, ContractError, DataError, FactorizationError,
                         IdentifiabilityError, NumericalConsistencyError)
from .experiments import (ExperimentConfig, ResultRecord, complexity_probe, rmse,
                          run_q_sweep, run_sid, run_synthetic)
from .oracles import car_model, kalman_filter, lgssm_generate, rts_smoother

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

TASK_OF = {"synthetic": "synthetic-car", "sid": "sid-dataset", "qsweep": "q-sweep",
           "probe": "probe", "oracle": "synthetic-car"}


def _load_config(args) -> ExperimentConfig:
    doc = {}
    if args.config:
        doc = ExperimentConfig.read_json(args.config)
    doc["task"] = TASK_OF[args.command]
    if args.seed is not None:
        doc["seeds"] = [args.seed]
    if args.out is not None:
        doc["out_dir"] = args.out
    if getattr(args, "dataset", None):
        doc["dataset"] = args.dataset
    return ExperimentConfig.from_dict(doc)


def _run_oracle(config: ExperimentConfig, out: Path):
    """Simulate the car model, write the trajectory and the exact smoother output."""
    out.mkdir(parents=True, exist_ok=True)
    spec = car_model(process_noise=config.process_noise, obs_noise=config.obs_noise)
    per_seed = {"smoother": [], "filter": []}
    loglik = {}
    for seed in config.seeds:
        traj = lgssm_generate(spec, config.length, seed)
        filt = kalman_filter(spec, traj.observations)
        smooth = rts_smoother(spec, filt)
        write_trajectory(traj, out / f"car_seed{seed}.csv")
        X = traj.true_states[1:]
        per_seed["filter"].append([rmse(filt.means[:, d], X[:, d]) for d in range(spec.state_dim)])
        per_seed["smoother"].append([rmse(smooth.means[:, d], X[:, d]) for d in range(spec.state_dim)])
        loglik[str(seed)] = filt.loglik
        with open(out / f"traces_seed{seed}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            d_x = spec.state_dim
            w.writerow(["time"] + [f"true_x{d + 1}" for d in range(d_x)]
                       + [f"filtered_x{d + 1}" for d in range(d_x)]
                       + [f"smoothed_x{d + 1}" for d in range(d_x)])
            for t in range(config.length):
                w.writerow([t + 1] + [repr(float(v)) for v in
                                      np.concatenate([X[t], filt.means[t], smooth.means[t]])])
    write_manifest(out)
    summary = {k: {"mean": np.mean(v, axis=0).tolist(), "std": np.std(v, axis=0).tolist()}
               for k, v in per_seed.items()}
    record = ResultRecord(config=config.to_dict(), per_seed=per_seed, summary=summary,
                          extra={"log_evidence": loglik})
    record.write(out / "result.json")
    return record


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="odgpssm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)
    help_text = {
        "synthetic": "car-tracking study: dependent vs independent transition GPs",
        "sid": "train on a system-identification CSV and score 100-step forecasts",
        "qsweep": "forecast RMSE as a function of the number of latent GPs",
        "probe": "time one ELBO+gradient evaluation across T and Q",
        "oracle": "simulate the car model and run the Kalman filter / RTS smoother",
    }
    for name, text in help_text.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", help="JSON experiment config (keys: ExperimentConfig fields)")
        p.add_argument("--seed", type=int, help="run a single seed instead of the config's list")
        p.add_argument("--out", help="output directory (must not already hold a result.json)")
        if name in ("sid", "qsweep"):
            p.add_argument("--dataset", help="dataset CSV (overrides the config)")
    m = sub.add_parser("manifest", help="record sha256 checksums of the CSVs in a directory")
    m.add_argument("directory")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "manifest":
            path = write_manifest(args.directory)
            print(path)
            return EXIT_OK
        config = _load_config(args)
        out = Path(config.out_dir)
        if args.command == "synthetic":
            result = run_synthetic(config, out)
        elif args.command == "sid":
            result = run_sid(config, out)
        elif args.command == "qsweep":
            run_q_sweep(config, out)
            result = None
        elif args.command == "probe":
            complexity_probe(config, out)
            result = None
        else:
            result = _run_oracle(config, out)
        if result is not None:
            print(json.dumps(result.summary, indent=2))
        print(f"wrote {out}")
        return EXIT_OK
    except (ConfigError, ContractError, IdentifiabilityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalConsistencyError, FactorizationError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
