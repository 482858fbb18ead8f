"""Render every figure kind from real engine output produced through the
primary package's CLI (its external interface), at smoke-test scale."""

import csv
import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from trialfigs import FigureSpec, SchemaError, build_all, render
from trialfigs.io import ecdf, load_bands

EXP1_CFG = {
    "schema_version": 1,
    "label": "exp1_smoke",
    "model": "bernoulli",
    "num_arms": 2,
    "priors": [[1.0, 1.0], [1.0, 1.0]],
    "scenarios": [{"label": "null", "thetas": [0.3, 0.3]},
                  {"label": "alt", "thetas": [0.3, 0.5]}],
    "designs": [
        {"label": "a", "policy": "rule1", "epsilon": 0.1, "delta": 0.1},
        {"label": "d", "policy": "fixed_block"},
        {"label": "a_rule2", "policy": "rule2", "epsilon": 0.1, "epsilon2": 0.05,
         "delta": 0.1},
    ],
    "n_max": [30, 60],
    "replicates": 40,
    "master_seed": 5,
}

EXP2_CFG = {
    "schema_version": 1,
    "label": "exp2_smoke",
    "model": "bernoulli",
    "num_arms": 4,
    "priors": [[1.0, 1.0]] * 4,
    "scenarios": [{"label": "alt", "thetas": [0.3, 0.4, 0.5, 0.6]}],
    "designs": [{"label": "a", "policy": "rule1", "epsilon": 0.1, "delta": 0.1}],
    "n_max": [50],
    "replicates": 24,
    "master_seed": 5,
    "estimator": {"method": "monte_carlo", "draws": 512},
}


def simulate(cfg, tmp_path, name):
    out = tmp_path / name
    cfg = dict(cfg)
    cfg["outputs"] = {"directory": str(out), "families": ["summary", "verdicts", "bands"]}
    cfg_path = tmp_path / f"{name}.json"
    cfg_path.write_text(json.dumps(cfg))
    proc = subprocess.run(
        [sys.executable, "-m", "adaptrial.cli", "simulate", "--config", str(cfg_path),
         "--threads", "2"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    proc = subprocess.run(
        [sys.executable, "-m", "adaptrial.cli", "trace", "--config", str(cfg_path),
         "--design", cfg["designs"][0]["label"], "--scenario",
         cfg["scenarios"][-1]["label"], "--replicate", "0",
         "--out", str(out / "trace_a.csv")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    return out


@pytest.fixture(scope="module")
def exp_dirs(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("smoke")
    t0 = time.time()
    exp1 = simulate(EXP1_CFG, tmp, "exp1")
    exp2 = simulate(EXP2_CFG, tmp, "exp2")
    return exp1, exp2, t0


def test_all_five_kinds_render_under_a_minute(exp_dirs, tmp_path):
    exp1, exp2, t0 = exp_dirs
    figs1 = tmp_path / "figs1"
    figs2 = tmp_path / "figs2"
    written1 = build_all(exp1, figs1, ("png",))
    written2 = build_all(exp2, figs2, ("png", "svg"))
    kinds1 = {p.stem.split("_")[0] for p in written1}
    # experiment 1 output yields all five kinds (rule2 design supplies drops)
    names1 = {p.name for p in written1}
    assert {"status_bands.png", "drop_bands.png", "allocation_cdf.png",
            "posterior_prob_cdf.png", "monitor_trace_a.png"} <= names1
    # experiment 2 yields maximal-family status bands, cdfs and the monitor
    names2 = {p.name for p in written2}
    assert "status_bands.png" in names2 and "status_bands.svg" in names2
    assert "monitor_trace_a.png" in names2
    for p in written1 + written2:
        assert p.exists() and p.stat().st_size > 0
    assert time.time() - t0 < 60, "smoke test must complete in under a minute"


def test_band_totals_validated_before_drawing(exp_dirs, tmp_path):
    exp1, _, _ = exp_dirs
    # corrupt one probability: the renderer must refuse
    src = (exp1 / "bands.csv").read_text().splitlines()
    broken = tmp_path / "bands.csv"
    header, rows = src[0], src[1:]
    parts = rows[0].split(",")
    parts[-1] = str(float(parts[-1]) + 0.2)
    broken.write_text("\n".join([header, ",".join(parts)] + rows[1:]) + "\n")
    spec = FigureSpec("status_bands", {"bands": broken}, tmp_path / "x.png")
    with pytest.raises(SchemaError, match="total 1"):
        render(spec)
    assert not (tmp_path / "x.png").exists()


def test_band_loader_accepts_engine_output(exp_dirs):
    exp1, _, _ = exp_dirs
    cells = load_bands(exp1 / "bands.csv")
    for events, grid, probs in cells.values():
        assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(np.diff(grid) == 1)


def test_cdfs_monotone(exp_dirs):
    _, exp2, _ = exp_dirs
    rows = list(csv.DictReader(open(exp2 / "verdicts.csv")))
    vals = np.array([float(r["n1"]) for r in rows if r["n1"]])
    x, f = ecdf(vals)
    assert np.all(np.diff(f) >= 0) and f[-1] == pytest.approx(1.0)


def test_empty_csv_errors_without_output(tmp_path):
    empty = tmp_path / "bands.csv"
    empty.write_text("design,scenario,event,i,probability\n")
    spec = FigureSpec("status_bands", {"bands": empty}, tmp_path / "out.png")
    with pytest.raises(SchemaError):
        render(spec)
    assert not (tmp_path / "out.png").exists()


def test_rerender_is_deterministic(exp_dirs, tmp_path):
    exp1, _, _ = exp_dirs
    figs = tmp_path / "f"
    first = {p.name: p.read_bytes() for p in build_all(exp1, figs, ("svg",))}
    second = {p.name: p.read_bytes() for p in build_all(exp1, figs, ("svg",))}
    # svg output embeds no timestamps; reruns overwrite with identical bytes
    assert set(first) == set(second)
    for name in first:
        assert first[name] == second[name]


def test_driver_cli(exp_dirs, tmp_path):
    exp1, _, _ = exp_dirs
    proc = subprocess.run(
        [sys.executable, "-m", "trialfigs.driver", str(exp1), str(tmp_path / "o"),
         "--formats", "png"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "wrote" in proc.stdout
    proc = subprocess.run(
        [sys.executable, "-m", "trialfigs.driver", str(tmp_path / "nothing"),
         str(tmp_path / "o2")], capture_output=True, text=True)
    assert proc.returncode == 1
