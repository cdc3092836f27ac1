"""Trajectory CSV files, dataset checksums and train/test standardization.

CSV schema: a header row naming columns ``u1..uK`` (optional controls),
``y1..yM`` (observations) and, for simulated data, ``true_x1..true_xD``. One
row per time step t = 1..T. When true states are present, the first data row
holds x_0: its ``u``/``y`` cells are empty.
"""

from __future__ import annotations

import csv
import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.preprocessing import StandardScaler

from .exceptions import ContractError, DataError
from .model import Trajectory

MANIFEST_NAME = "MANIFEST.json"
_COLUMN = re.compile(r"^(u|y|true_x)(\d+)$")


def _column_groups(header, path):
    groups = {"u": {}, "y": {}, "true_x": {}}
    for pos, name in enumerate(header):
        m = _COLUMN.match(name.strip())
        if not m:
            raise DataError(f"{path}: unknown column '{name}'", line=1)
        groups[m.group(1)][int(m.group(2))] = pos
    for kind, cols in groups.items():
        if cols and sorted(cols) != list(range(1, len(cols) + 1)):
            raise DataError(f"{path}: {kind} columns must be numbered 1..{len(cols)}", line=1)
    if not groups["y"]:
        raise DataError(f"{path}: no y columns", line=1)
    return {k: [v[i] for i in sorted(v)] for k, v in groups.items()}


def _parse(cell, path, line):
    try:
        return float(cell)
    except ValueError:
        raise DataError(f"{path}: non-numeric cell '{cell}'", line=line) from None


def load_dataset(path) -> Trajectory:
    """Read a trajectory CSV (see module docstring for the schema)."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file", line=1)
    cols = _column_groups(rows[0], path)
    width = len(rows[0])
    ys, us, xs = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != width:
            raise DataError(f"{path}: expected {width} cells, found {len(row)}", line=lineno)
        obs_cells = [row[i] for i in cols["y"] + cols["u"]]
        if cols["true_x"] and not xs and all(c.strip() == "" for c in obs_cells):
            xs.append([_parse(row[i], path, lineno) for i in cols["true_x"]])
            continue
        ys.append([_parse(row[i], path, lineno) for i in cols["y"]])
        if cols["u"]:
            us.append([_parse(row[i], path, lineno) for i in cols["u"]])
        if cols["true_x"]:
            xs.append([_parse(row[i], path, lineno) for i in cols["true_x"]])
    if not ys:
        raise DataError(f"{path}: no data rows", line=2)
    true_states = None
    if cols["true_x"]:
        if len(xs) != len(ys) + 1:
            raise DataError(f"{path}: true_x columns need an initial-state row")
        true_states = np.array(xs)
    return Trajectory(np.array(ys), np.array(us) if us else None, true_states)


def write_trajectory(traj: Trajectory, path):
    """Write ``traj`` in the CSV schema read by :func:`load_dataset` (lossless)."""
    d_c, d_y = traj.control_dim, traj.obs_dim
    d_x = 0 if traj.true_states is None else traj.true_states.shape[1]
    header = ([f"u{i + 1}" for i in range(d_c)] + [f"y{i + 1}" for i in range(d_y)]
              + [f"true_x{i + 1}" for i in range(d_x)])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        if d_x:
            w.writerow([""] * (d_c + d_y) + [repr(float(v)) for v in traj.true_states[0]])
        for t in range(traj.length):
            row = []
            if d_c:
                row += [repr(float(v)) for v in traj.controls[t]]
            row += [repr(float(v)) for v in traj.observations[t]]
            if d_x:
                row += [repr(float(v)) for v in traj.true_states[t + 1]]
            w.writerow(row)


# ----------------------------------------------------------------------------
# checksum manifest


def sha256_of(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(directory) -> Path:
    """Record the sha256 of every CSV in ``directory``."""
    directory = Path(directory)
    entries = {p.name: sha256_of(p) for p in sorted(directory.glob("*.csv"))}
    out = directory / MANIFEST_NAME
    out.write_text(json.dumps(entries, indent=2, sort_keys=True) + "\n")
    return out


def verify_dataset(path):
    """Raise :class:`DataError` unless ``path`` matches its directory's manifest."""
    path = Path(path)
    manifest = path.parent / MANIFEST_NAME
    if not path.exists():
        raise DataError(f"dataset {path} not found")
    if not manifest.exists():
        raise DataError(f"no {MANIFEST_NAME} next to {path}; run 'odgpssm manifest {path.parent}'")
    entries = json.loads(manifest.read_text())
    if path.name not in entries:
        raise DataError(f"{path.name} is not listed in {manifest}")
    if sha256_of(path) != entries[path.name]:
        raise DataError(f"{path} does not match its recorded checksum (modified?)")


# ----------------------------------------------------------------------------
# standardization


class ChannelStandardizer(StandardScaler):
    """StandardScaler that refuses constant channels."""

    def __init__(self, channel_prefix="y"):
        super().__init__()
        self.channel_prefix = channel_prefix

    def fit(self, X, y=None, sample_weight=None):
        super().fit(X, y, sample_weight)
        flat = np.flatnonzero(self.var_ == 0)
        if flat.size:
            raise DataError(f"channel {self.channel_prefix}{flat[0] + 1} has zero variance")
        return self


@dataclass
class StandardizationStats:
    observations: ChannelStandardizer
    controls: ChannelStandardizer = None

    def to_dict(self):
        out = {"y_mean": self.observations.mean_.tolist(), "y_std": self.observations.scale_.tolist()}
        if self.controls is not None:
            out.update(u_mean=self.controls.mean_.tolist(), u_std=self.controls.scale_.tolist())
        return out

    def apply(self, traj: Trajectory) -> Trajectory:
        u = None if self.controls is None else self.controls.transform(traj.controls)
        return Trajectory(self.observations.transform(traj.observations), u, traj.true_states)

    def inverse_observations(self, y):
        return self.observations.inverse_transform(np.atleast_2d(y))


def split_index(T, split):
    return int(np.floor(T * split))


def standardize(traj: Trajectory, split: float = 0.5):
    """Split at ``floor(T * split)`` and standardize both parts with training statistics.

    Returns:
        (train, test, stats)
    """
    if not 0.0 < split < 1.0:
        raise ContractError("split must lie in (0, 1)")
    n = split_index(traj.length, split)
    if n < 1 or n >= traj.length:
        raise ContractError("split leaves an empty training or test part")
    train, test = traj.segment(0, n), traj.segment(n, traj.length)
    stats = StandardizationStats(ChannelStandardizer("y").fit(train.observations))
    if train.controls is not None:
        stats.controls = ChannelStandardizer("u").fit(train.controls)
    return stats.apply(train), stats.apply(test), stats
