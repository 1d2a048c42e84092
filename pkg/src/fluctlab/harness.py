"""Replicate orchestration and output writers.

Replicates are cut into fixed-size chunks (independent of the thread count),
evaluated by a thread pool and concatenated in replicate order, so the
reduced statistics do not depend on the degree of parallelism.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .rng import StreamKey, experiment_id
from .solvers import SolverError

CHUNK = 25


class ExperimentError(RuntimeError):
    """A replicate failed; carries the failing stream key."""

    def __init__(self, message, key: StreamKey | None = None, context: dict | None = None):
        super().__init__(message)
        self.key = key
        self.context = dict(context or {})


@dataclass
class ReplicateStats:
    values: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray
    quantiles: dict = field(default_factory=dict)

    @property
    def count(self) -> int:
        return self.values.shape[0]


def reduce_values(values, quantiles=()) -> ReplicateStats:
    values = np.asarray(values, dtype=float)
    n = values.shape[0]
    mean = np.mean(values, axis=0)
    if n > 1:
        stderr = np.std(values, axis=0, ddof=1) / math.sqrt(n)
    else:
        stderr = np.zeros_like(mean)
    qs = {float(q): np.quantile(values, q, axis=0) for q in quantiles}
    return ReplicateStats(values, mean, stderr, qs)


def run_replicates(closure, count: int, seed: int, parallelism: int = 1,
                   experiment: str | int = "default", quantiles=(), chunk: int = CHUNK,
                   context: dict | None = None) -> ReplicateStats:
    """Evaluate ``closure(keys) -> array (len(keys), ...)`` over ``count`` replicates."""
    if count < 1:
        raise ValueError("count must be at least 1")
    if parallelism < 1:
        raise ValueError("parallelism must be at least 1")
    exp = experiment_id(experiment) if isinstance(experiment, str) else int(experiment)
    keys = [StreamKey(seed, exp, r) for r in range(count)]
    chunks = [keys[i:i + chunk] for i in range(0, count, chunk)]

    def work(ks):
        try:
            out = np.asarray(closure(ks), dtype=float)
        except SolverError as err:
            bad = err.replicates[0] if err.replicates else ks[0].replicate
            key = next((k for k in ks if k.replicate == bad), ks[0])
            raise ExperimentError(f"replicate {key.replicate} failed: {err}", key, context) from err
        if out.shape[0] != len(ks):
            raise ValueError("closure must return one row per replicate")
        return out

    if parallelism == 1 or len(chunks) == 1:
        parts = [work(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            parts = list(pool.map(work, chunks))
    return reduce_values(np.concatenate(parts, axis=0), quantiles)


# ---------------------------------------------------------------------------
# writers


def format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    if v is None:
        return ""
    return str(v)


def emit_csv(path, table, columns=None) -> Path:
    """Write rows (a list of dicts) with a header line; floats use shortest round-trip repr."""
    path = Path(path)
    rows = list(table)
    if columns is None:
        columns = list(rows[0].keys()) if rows else []
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([format_value(row.get(c)) for c in columns])
    return path


def read_csv(path) -> list:
    """Parse a file written by emit_csv back into dicts; numeric cells become floats."""
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            parsed = {}
            for name, cell in row.items():
                try:
                    parsed[name] = float(cell)
                except ValueError:
                    parsed[name] = cell
            out.append(parsed)
    return out


def trajectory_table(times, values) -> tuple:
    """Rows (t, x_0 .. x_{n-1}) of a trajectory, with the column names."""
    values = np.asarray(values)
    cols = ["t"] + [f"x_{i}" for i in range(values.shape[-1])]
    rows = [dict(zip(cols, [float(t)] + [float(v) for v in vals])) for t, vals in zip(times, values)]
    return rows, cols


def to_jsonable(obj):
    if hasattr(obj, "as_dict"):
        obj = obj.as_dict()
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [to_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def emit_summary_json(path, report) -> Path:
    """Sorted-key JSON; non-finite numbers become null."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(to_jsonable(report), sort_keys=True, indent=2, allow_nan=False)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text + "\n")
    return path


def emit_svg_plot(path, series, title: str = "", width: int = 480, height: int = 360) -> Path:
    """Log-log scatter with an optional fitted line.

    ``series`` maps a label to {"x": [...], "y": [...], "fit": (slope, intercept)}
    where the fit line is log10 y = slope * log10 x + intercept (natural-log
    intercepts are accepted as ``fit_ln``).
    """
    path = Path(path)
    pad = 50
    pts = []
    for s in series.values():
        pts += [(x, y) for x, y in zip(s["x"], s["y"]) if x > 0 and y > 0]
    if pts:
        lx = [math.log10(p[0]) for p in pts]
        ly = [math.log10(p[1]) for p in pts]
        x0, x1 = min(lx), max(lx)
        y0, y1 = min(ly), max(ly)
    else:
        x0 = y0 = 0.0
        x1 = y1 = 1.0
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5

    def px(lxv):
        return pad + (lxv - x0) / (x1 - x0) * (width - 2 * pad)

    def py(lyv):
        return height - pad - (lyv - y0) / (y1 - y0) * (height - 2 * pad)

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
             f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{title}</text>',
             f'<text x="{width / 2:.1f}" y="{height - 10}" text-anchor="middle" font-size="12">'
             f'log10 x [{x0:.2f}, {x1:.2f}]</text>',
             f'<text x="12" y="{height / 2:.1f}" font-size="12" transform="rotate(-90 12 {height / 2:.1f})"'
             f' text-anchor="middle">log10 y [{y0:.2f}, {y1:.2f}]</text>']
    for i, (label, s) in enumerate(sorted(series.items())):
        c = colors[i % len(colors)]
        for x, y in zip(s["x"], s["y"]):
            if x > 0 and y > 0:
                parts.append(f'<circle cx="{px(math.log10(x)):.2f}" cy="{py(math.log10(y)):.2f}" '
                             f'r="3" fill="{c}"/>')
        fit = s.get("fit")
        if fit is None and s.get("fit_ln") is not None:
            slope, b = s["fit_ln"]
            fit = (slope, b / math.log(10))
        if fit is not None and all(math.isfinite(v) for v in fit):
            slope, b = fit
            parts.append(f'<line x1="{px(x0):.2f}" y1="{py(slope * x0 + b):.2f}" x2="{px(x1):.2f}" '
                         f'y2="{py(slope * x1 + b):.2f}" stroke="{c}" stroke-dasharray="4 3"/>')
        parts.append(f'<text x="{width - pad - 120}" y="{pad + 16 * i}" font-size="11" fill="{c}">'
                     f'{label}</text>')
    parts.append("</svg>")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(parts) + "\n")
    return path


# ---------------------------------------------------------------------------
# manifest


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


@dataclass
class RunManifest:
    """Written before any result; wall-clock goes to a separate timing file."""

    config_hash: str
    seed: int
    command: str
    params: dict
    outputs: list = field(default_factory=list)
    replicates: int | None = None
    version: str = __version__

    def as_dict(self) -> dict:
        return {"config_hash": self.config_hash, "seed": self.seed, "command": self.command,
                "params": self.params, "outputs": sorted(self.outputs),
                "replicates": self.replicates, "version": self.version}

    def write(self, out_dir) -> Path:
        return emit_summary_json(Path(out_dir) / "manifest.json", self)


def write_timing(out_dir, seconds: float) -> Path:
    path = Path(out_dir) / "timing.txt"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(f"wall_clock_seconds={seconds:.3f}\n", encoding="utf-8")
    return path


def ensure_dir(path) -> Path:
    path = Path(path)
    os.makedirs(path, exist_ok=True)
    return path
