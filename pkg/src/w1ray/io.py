"""CSV readers and writers for measures, plans, potentials and metrics.

Every file starts with ``#`` comment lines carrying metadata (config hash,
seed), followed by a header row and comma-separated values. Floats are
written with 17 significant digits so round trips are exact.
"""

from __future__ import annotations

import csv
import os
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .exact_ot import DualSolution, TransportPlan
from .measures import EmpiricalMeasure, make_empirical
from .potential import DiscretePotential, RayBatch


class FormatError(ValueError):
    """Input file is malformed."""


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % float(v)
    return str(v)


def _meta_lines(meta: Optional[Mapping]) -> list[str]:
    if not meta:
        return []
    return ["# " + " ".join(f"{k}={v}" for k, v in meta.items())]


def write_table(path, header: Sequence[str], rows: Iterable[Sequence], meta: Optional[Mapping] = None, comments=()) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        for line in list(comments) + _meta_lines(meta):
            fh.write(line + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return path


def read_table(path) -> tuple[list[str], list[list[str]], dict]:
    """Return ``(header, rows, meta)``; ``meta`` collects ``key=value`` tokens from comments."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    meta: dict = {}
    body = []
    with open(path, newline="") as fh:
        for line in fh:
            s = line.strip()
            if not s:
                continue
            if s.startswith("#"):
                for tok in s[1:].split():
                    if "=" in tok:
                        k, v = tok.split("=", 1)
                        meta[k] = v
                continue
            body.append(s)
    rows = list(csv.reader(body))
    if not rows:
        raise FormatError(f"{path}: no header row")
    return rows[0], rows[1:], meta


# ---------------------------------------------------------------------------
# Measures
# ---------------------------------------------------------------------------


def write_points(path, m: EmpiricalMeasure, meta: Optional[Mapping] = None) -> Path:
    head = f"# w1ray points v1 dim={m.dim}"
    if m.shape is not None:
        head += f" shape={m.shape[0]}x{m.shape[1]}"
    header = ["w"] + [f"x{k}" for k in range(m.dim)]
    rows = (np.concatenate([[w], p]) for w, p in zip(m.weights, m.points))
    return write_table(path, header, rows, meta, comments=[head])


def read_points(path) -> EmpiricalMeasure:
    """Read a point file. A leading ``w`` column holds weights, otherwise uniform."""
    header, rows, meta = read_table(path)
    if not rows:
        raise FormatError(f"{path}: no data rows")
    try:
        data = np.array([[float(v) for v in r] for r in rows])
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from None
    if data.ndim != 2 or data.shape[1] != len(header):
        raise FormatError(f"{path}: ragged rows")
    if header[0].strip() == "w":
        weights, pts = data[:, 0], data[:, 1:]
    else:
        weights, pts = None, data
    if pts.shape[1] == 0:
        raise FormatError(f"{path}: no coordinate columns")
    if "dim" in meta and int(meta["dim"]) != pts.shape[1]:
        raise FormatError(f"{path}: dim={meta['dim']} but {pts.shape[1]} coordinate columns")
    shape = None
    if "shape" in meta:
        h, w = meta["shape"].lower().split("x")
        shape = (int(h), int(w))
    return make_empirical(pts, weights, shape)


# ---------------------------------------------------------------------------
# Solver outputs
# ---------------------------------------------------------------------------


def write_plan(path, plan: TransportPlan, meta=None) -> Path:
    return write_table(path, ["i", "j", "mass"], plan.entries(), meta)


def write_duals(path, duals: DualSolution, meta=None) -> Path:
    rows = [("source", i, v) for i, v in enumerate(duals.source_values)]
    rows += [("target", j, v) for j, v in enumerate(duals.target_values)]
    return write_table(path, ["side", "index", "value"], rows, meta)


def read_target_values(path) -> np.ndarray:
    header, rows, _ = read_table(path)
    if [h.strip() for h in header] != ["side", "index", "value"]:
        raise FormatError(f"{path}: expected header side,index,value")
    tgt = sorted((int(r[1]), float(r[2])) for r in rows if r[0].strip() == "target")
    if not tgt or [i for i, _ in tgt] != list(range(len(tgt))):
        raise FormatError(f"{path}: target indices must be 0..n-1")
    return np.array([v for _, v in tgt])


def load_potential(duals_path, points_path, domain=None) -> DiscretePotential:
    atoms = read_points(points_path)
    values = read_target_values(duals_path)
    if len(values) != len(atoms):
        raise FormatError(f"{len(values)} target duals for {len(atoms)} atoms")
    return DiscretePotential(atoms.points, values, domain)


def write_rays(path, xs, r: RayBatch, meta=None) -> Path:
    d = xs.shape[1]
    header = [f"x{k}" for k in range(d)] + [f"grad{k}" for k in range(d)] + ["alpha", "beta", "active_atom", "tie_flag"]
    rows = (
        list(xs[i]) + list(r.grad[i]) + [r.alpha[i], r.beta[i], int(r.active[i]), int(r.tie[i])]
        for i in range(len(xs))
    )
    return write_table(path, header, rows, meta)


def write_dicts(path, rows: Sequence[Mapping], meta=None, header: Optional[Sequence[str]] = None) -> Path:
    rows = list(rows)
    if header is None:
        if not rows:
            raise ValueError("need a header for an empty table")
        header = list(rows[0])
    return write_table(path, header, ([r.get(h, "") for h in header] for r in rows), meta)


def ensure_dir(path) -> Path:
    p = Path(path)
    if p.exists() and not p.is_dir():
        raise NotADirectoryError(p)
    os.makedirs(p, exist_ok=True)
    return p
