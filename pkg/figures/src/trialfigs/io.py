"""CSV ingestion and validation for the engine's output schemas."""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "trialfigs"  # stable ids across reruns

import numpy as np


def save_figure(fig, path: Path) -> None:
    """Deterministic save: strips volatile metadata so reruns are byte-stable."""
    meta = {"Date": None} if str(path).endswith(".svg") else None
    fig.savefig(path, metadata=meta)

FIGURE_KINDS = ("monitor_trace", "status_bands", "drop_bands", "allocation_cdf",
                "posterior_prob_cdf")

BAND_FAMILIES = {
    "both_active": "joint_status",
    "none_dropped": "dropped_status",
    "control_in": "maximal",
}


class SchemaError(ValueError):
    pass


@dataclass
class FigureSpec:
    figure_kind: str
    inputs: dict[str, Path]
    output: Path
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.figure_kind not in FIGURE_KINDS:
            raise SchemaError(f"unknown figure kind {self.figure_kind!r}")


def _read_rows(path: Path, required: set[str]) -> list[dict]:
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None:
                raise SchemaError(f"{path}: empty file")
            missing = required - set(reader.fieldnames)
            if missing:
                raise SchemaError(f"{path}: missing columns {sorted(missing)}")
            rows = list(reader)
    except FileNotFoundError:
        raise SchemaError(f"{path}: not found")
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    return rows


def load_bands(path: Path):
    """bands.csv -> {(design, scenario): (events, i grid, probs)} validated
    so stacked widths total 1 at every i."""
    rows = _read_rows(path, {"design", "scenario", "event", "i", "probability"})
    cells = defaultdict(lambda: defaultdict(dict))
    for r in rows:
        cells[(r["design"], r["scenario"])][r["event"]][int(r["i"])] = float(r["probability"])
    out = {}
    for key, by_event in cells.items():
        events = list(by_event)
        grid = sorted(next(iter(by_event.values())))
        probs = np.array([[by_event[e][i] for e in events] for i in grid])
        totals = probs.sum(axis=1)
        if not np.allclose(totals, 1.0, atol=1e-6):
            raise SchemaError(
                f"{path}: bands for {key} do not total 1 (max dev "
                f"{np.max(np.abs(totals - 1)):.2e})")
        out[key] = (events, np.array(grid), probs)
    return out


def load_verdicts(path: Path):
    """verdicts.csv -> {(design, scenario, i): columns} with numeric arrays."""
    rows = _read_rows(path, {"design", "scenario", "replicate", "i"})
    cells = defaultdict(lambda: defaultdict(list))
    for r in rows:
        key = (r["design"], r["scenario"], int(r["i"]))
        for col in ("p_pos", "p_neg", "n1", "s"):
            if r.get(col):
                cells[key][col].append(float(r[col]))
    return {k: {c: np.array(v) for c, v in cols.items()} for k, cols in cells.items()}


def load_trace(path: Path):
    rows = _read_rows(path, {"replicate", "i", "n", "arm", "outcome"})
    cols = rows[0].keys()
    arms = sorted(int(c.rsplit("_", 1)[1]) for c in cols if c.startswith("status_"))
    if not arms:
        raise SchemaError(f"{path}: no status_k columns")
    m = len(arms)
    out = {
        "i": np.array([int(r["i"]) for r in rows]),
        "arm": np.array([int(r["arm"]) for r in rows]),
        "outcome": np.array([float(r["outcome"]) for r in rows]),
        "statuses": np.array([[int(r[f"status_{k}"]) for k in range(m)] for r in rows]),
        "alpha": np.array([[float(r[f"alpha_{k}"]) for k in range(m)] for r in rows]),
        "beta": np.array([[float(r[f"beta_{k}"]) for k in range(m)] for r in rows]),
        "p_ctrl": np.array([float(r["p_ctrl_margin"]) if r["p_ctrl_margin"] else np.nan
                            for r in rows]),
        "p_max": np.array([[float(r[f"p_max_{k}"]) if r[f"p_max_{k}"] else np.nan
                            for k in range(m)] for r in rows]),
    }
    return out


def ecdf(values: np.ndarray):
    """Right-continuous empirical CDF steps; guaranteed monotone."""
    x = np.sort(values)
    f = np.arange(1, x.size + 1) / x.size
    assert np.all(np.diff(f) >= 0)
    return x, f
