"""CSV and JSON output with embedded provenance.

Every file starts with ``#`` comment lines carrying the config hash and the
seed block, followed by a mandatory header row.  Floats are written with
``repr`` so that reading a file back reproduces the values bit for bit.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dynamics import TrajectorySet
from .levy import SeededStream

__all__ = [
    "write_csv",
    "read_csv",
    "write_json",
    "trajectory_rows",
    "write_trajectory",
    "read_trajectories",
]


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return repr(float(v))


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence], meta: dict | None = None) -> None:
    lines = []
    for key, value in (meta or {}).items():
        lines.append(f"# {key}: {json.dumps(value, sort_keys=True)}")
    lines.append(",".join(header))
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("utf-8"))


def read_csv(path: Path) -> tuple[dict, list[str], np.ndarray]:
    meta: dict = {}
    header: list[str] | None = None
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, value = line[1:].partition(":")
            meta[key.strip()] = json.loads(value)
        elif header is None:
            header = line.split(",")
        else:
            rows.append([float(v) for v in line.split(",")])
    if header is None:
        raise ValueError(f"{path}: missing header row")
    data = np.array(rows, dtype=float).reshape(len(rows), len(header))
    return meta, header, data


def write_json(path: Path, payload: dict) -> None:
    Path(path).write_bytes((json.dumps(payload, sort_keys=True, indent=2) + "\n").encode("utf-8"))


def trajectory_rows(paths: TrajectorySet, j: int) -> tuple[list[str], np.ndarray]:
    m = paths.y.shape[2]
    cols = [paths.t_grid[:, None]]
    header = ["t"]
    if paths.x is not None:
        n = paths.x.shape[2]
        cols.append(paths.x[j])
        header += [f"x{i + 1}" for i in range(n)]
    cols.append(paths.y[j])
    header += [f"y{i + 1}" for i in range(m)]
    return header, np.hstack(cols)


def write_trajectory(path: Path, paths: TrajectorySet, j: int, meta: dict) -> None:
    header, data = trajectory_rows(paths, j)
    extra = {"stream": paths.seeds[j].as_dict() if paths.seeds else None, "lambda": paths.lambda_used,
             "aborted_paths": paths.aborted}
    write_csv(path, header, data, {**meta, **extra})


def read_trajectories(files: Sequence[Path]) -> TrajectorySet:
    """Load paths written by :func:`write_trajectory`; fast columns are dropped."""
    ys, seeds, t_grid, lam, aborted = [], [], None, float("nan"), 0
    for f in files:
        meta, header, data = read_csv(Path(f))
        if not header or header[0] != "t":
            raise ValueError(f"{f}: first column must be t")
        ycols = [i for i, h in enumerate(header) if h.startswith("y")]
        if not ycols:
            raise ValueError(f"{f}: no slow columns")
        if t_grid is None:
            t_grid = data[:, 0]
        elif not np.array_equal(t_grid, data[:, 0]):
            raise ValueError(f"{f}: time grid differs from {files[0]}")
        ys.append(data[:, ycols])
        s = meta.get("stream")
        if s is not None:
            seeds.append(SeededStream(int(s["seed"]), int(s["stream_id"])))
        lam = float(meta.get("lambda", lam))
        aborted = int(meta.get("aborted_paths", aborted))
    if len(seeds) != len(ys):
        seeds = []
    return TrajectorySet(t_grid, np.stack(ys), None, seeds, lam, aborted)
