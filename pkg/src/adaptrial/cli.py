"""Command-line front end: simulate / trace / report.

Configs are strict JSON (versioned schema, unknown keys rejected so a
typo in a threshold name cannot silently change a design). Exit codes:
0 success, 2 configuration/validation error, 3 runtime simulation error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .allocation import DesignParams
from .analysis import (OperatingCharacteristics, default_threads, run_experiment,
                       run_tte_experiment)
from .continuous import (ArrivalProcess, DelayedOutcomeConfig, EventTimeScenario,
                         run_delayed_trial, run_tte_trial, run_vaccine_monitoring,
                         simulate_arrivals)
from .io_csv import read_summary, write_bands, write_summary, write_verdicts
from .posterior import EstimatorConfig
from .rngstream import replicate_seed
from .trial import ScenarioQ, run_trial

SCHEMA_VERSION = 1

_DESIGN_KEYS = {
    "label", "policy", "epsilon", "epsilon1", "epsilon2", "delta", "theta_low",
    "kappa", "burn_in", "rho", "theta_high", "eval_interval",
    "continue_after_control_drop", "final_epsilon0", "final_delta0",
    "final_variant", "rate_semantics",
}
_TOP_KEYS = {
    "schema_version", "label", "model", "num_arms", "priors", "scenarios",
    "designs", "final_test", "n_max", "replicates", "master_seed", "estimator",
    "arrival", "analysis_horizon", "vaccine", "outputs",
}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    label: str
    model: str
    num_arms: int
    priors: list[tuple[float, float]]
    scenarios: list[dict]
    designs: list[DesignParams]
    semantics_overrides: dict[str, str]
    n_max: int
    analysis_points: tuple[int, ...]
    replicates: int
    master_seed: int
    estimator_method: str = "auto"
    estimator_draws: int = 16384
    quadrature_nodes: int = 128
    arrival: dict = field(default_factory=dict)
    analysis_horizon: float | None = None
    vaccine: dict = field(default_factory=dict)
    out_dir: str = "results"
    families: tuple[str, ...] = ("summary", "verdicts", "bands")
    raw: dict = field(default_factory=dict)


def _require(cond: bool, field_name: str, message: str):
    if not cond:
        raise ConfigError(f"{field_name}: {message}")


def _no_unknown(d: dict, allowed: set[str], where: str):
    unknown = set(d) - allowed
    _require(not unknown, where, f"unknown keys {sorted(unknown)}")


def load_config(path: Path, overrides: dict | None = None) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config: file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON: {exc}")
    overrides = overrides or {}
    _no_unknown(raw, _TOP_KEYS, "config")
    _require(raw.get("schema_version") == SCHEMA_VERSION, "schema_version",
             f"must be {SCHEMA_VERSION}")
    model = raw.get("model", "bernoulli")
    _require(model in ("bernoulli", "delayed", "tte", "vaccine"), "model",
             f"unknown model {model!r}")
    num_arms = raw.get("num_arms")
    _require(isinstance(num_arms, int) and num_arms >= 2, "num_arms",
             "must be an integer >= 2")
    priors = raw.get("priors") or [[1.0, 1.0]] * num_arms
    _require(len(priors) == num_arms, "priors", "one (alpha, beta) pair per arm")
    for j, pair in enumerate(priors):
        _require(len(pair) == 2 and pair[0] > 0 and pair[1] > 0,
                 f"priors[{j}]", "must be a positive (alpha, beta) pair")

    scenarios = raw.get("scenarios")
    _require(bool(scenarios), "scenarios", "at least one scenario required")
    for j, sc in enumerate(scenarios):
        _no_unknown(sc, {"label", "thetas", "intensities"}, f"scenarios[{j}]")
        key = "intensities" if model in ("tte", "vaccine") else "thetas"
        _require(key in sc, f"scenarios[{j}]", f"missing {key!r}")
        _require(len(sc[key]) == num_arms, f"scenarios[{j}].{key}",
                 f"needs {num_arms} values")

    final = raw.get("final_test", {})
    _no_unknown(final, {"epsilon0", "delta0", "variant"}, "final_test")
    designs = []
    overrides_sem = {}
    _require(bool(raw.get("designs")), "designs", "at least one design required")
    labels = set()
    for j, dz in enumerate(raw["designs"]):
        _no_unknown(dz, _DESIGN_KEYS, f"designs[{j}]")
        dz = dict(dz)
        semantics = dz.pop("rate_semantics", None)
        dz.setdefault("final_epsilon0", final.get("epsilon0", 0.05))
        dz.setdefault("final_delta0", final.get("delta0", 0.05))
        dz.setdefault("final_variant", final.get("variant", "original"))
        try:
            design = DesignParams(**dz)
            design.validate(num_arms)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"designs[{j}]: {exc}")
        _require(design.label not in labels, f"designs[{j}].label",
                 f"duplicate label {design.label!r}")
        labels.add(design.label)
        designs.append(design)
        if semantics:
            _require(semantics in ("final_test", "drop_events", "none"),
                     f"designs[{j}].rate_semantics", f"unknown {semantics!r}")
            overrides_sem[design.label] = semantics

    n_max_raw = raw.get("n_max")
    points = tuple(sorted(set(n_max_raw))) if isinstance(n_max_raw, list) \
        else (int(n_max_raw),)
    _require(all(isinstance(i, int) and i >= 1 for i in points), "n_max",
             "must be a positive integer or list of them")

    replicates = int(overrides.get("replicates") or raw.get("replicates", 1))
    _require(replicates >= 1, "replicates", "must be >= 1")
    master_seed = int(overrides["seed"]) if overrides.get("seed") is not None \
        else int(raw.get("master_seed", 0))

    est = raw.get("estimator", {})
    _no_unknown(est, {"method", "draws", "quadrature_nodes"}, "estimator")
    method = est.get("method", "auto")
    _require(method in ("auto", "quadrature", "monte_carlo"), "estimator.method",
             f"unknown method {method!r}")

    arrival = raw.get("arrival", {})
    _no_unknown(arrival, {"rate", "horizon", "delay_d"}, "arrival")
    if model in ("delayed", "tte", "vaccine"):
        _require("rate" in arrival and "horizon" in arrival, "arrival",
                 "continuous models need arrival.rate and arrival.horizon")
    if model == "delayed":
        _require(arrival.get("delay_d", 0) > 0, "arrival.delay_d",
                 "delayed model needs a positive delay_d")
    horizon = raw.get("analysis_horizon")
    if model == "tte":
        horizon = horizon if horizon is not None else arrival.get("horizon")

    vaccine = raw.get("vaccine", {})
    _no_unknown(vaccine, {"ve_star", "epsilon1"}, "vaccine")
    if model == "vaccine":
        _require("ve_star" in vaccine and "epsilon1" in vaccine, "vaccine",
                 "vaccine model needs ve_star and epsilon1")

    outputs = raw.get("outputs", {})
    _no_unknown(outputs, {"directory", "families"}, "outputs")
    families = tuple(outputs.get("families", ("summary", "verdicts", "bands")))
    for fam in families:
        _require(fam in ("summary", "verdicts", "bands"), "outputs.families",
                 f"unknown family {fam!r}")

    out_dir = overrides.get("out") or outputs.get("directory") or "results"
    return ExperimentConfig(
        label=raw.get("label", Path(path).stem), model=model, num_arms=num_arms,
        priors=[tuple(map(float, p)) for p in priors], scenarios=scenarios,
        designs=designs, semantics_overrides=overrides_sem, n_max=points[-1],
        analysis_points=points, replicates=replicates, master_seed=master_seed,
        estimator_method=method, estimator_draws=int(est.get("draws", 16384)),
        quadrature_nodes=int(est.get("quadrature_nodes", 128)), arrival=arrival,
        analysis_horizon=horizon, vaccine=vaccine, out_dir=str(out_dir),
        families=families, raw=raw)


def _resolved_config(cfg: ExperimentConfig) -> dict:
    resolved = dict(cfg.raw)
    resolved["schema_version"] = SCHEMA_VERSION
    resolved["replicates"] = cfg.replicates
    resolved["master_seed"] = cfg.master_seed
    resolved.setdefault("outputs", {})
    resolved["outputs"] = {"directory": cfg.out_dir, "families": list(cfg.families)}
    return resolved


def _simulate(cfg: ExperimentConfig, threads: int) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    if cfg.model == "bernoulli":
        scenarios = [ScenarioQ(tuple(sc["thetas"]), sc.get("label", f"s{j}"))
                     for j, sc in enumerate(cfg.scenarios)]
        ocs = run_experiment(cfg.designs, scenarios, cfg.replicates, cfg.n_max,
                             cfg.master_seed, threads, priors=cfg.priors,
                             analysis_points=cfg.analysis_points,
                             estimator_method=cfg.estimator_method,
                             estimator_draws=cfg.estimator_draws,
                             quadrature_nodes=cfg.quadrature_nodes,
                             semantics_overrides=cfg.semantics_overrides)
    elif cfg.model == "tte":
        scenarios = [EventTimeScenario(tuple(sc["intensities"]),
                                       float(cfg.analysis_horizon),
                                       sc.get("label", f"s{j}"))
                     for j, sc in enumerate(cfg.scenarios)]
        arrival = ArrivalProcess(float(cfg.arrival["rate"]), float(cfg.arrival["horizon"]))
        ocs = run_tte_experiment(cfg.designs, scenarios, arrival, cfg.replicates,
                                 cfg.n_max, cfg.master_seed, threads,
                                 priors=cfg.priors,
                                 analysis_points=cfg.analysis_points,
                                 estimator_method=cfg.estimator_method,
                                 estimator_draws=cfg.estimator_draws,
                                 quadrature_nodes=cfg.quadrature_nodes)
    elif cfg.model == "vaccine":
        return _simulate_vaccine(cfg, out, t0)
    else:  # delayed
        ocs = _run_delayed_cells(cfg, threads)

    if "summary" in cfg.families:
        write_summary(out / "summary.csv", ocs)
    if "verdicts" in cfg.families:
        write_verdicts(out / "verdicts.csv", ocs)
    if "bands" in cfg.families:
        write_bands(out / "bands.csv", ocs)
    (out / "resolved_config.json").write_text(
        json.dumps(_resolved_config(cfg), indent=2, sort_keys=True) + "\n")
    for (design, scenario), oc in sorted(ocs.items()):
        bits = []
        for i in oc.analysis_points:
            if i in oc.verdict_rates:
                r = oc.verdict_rates[i]
                bits.append(f"@{i} pos={r['positive'][0]:.3f} "
                            f"neg={r['negative'][0]:.3f} inc={r['inconclusive'][0]:.3f}")
        print(f"[{cfg.label}] {design}/{scenario} R={oc.replicates} "
              + ("; ".join(bits) if bits else "(bands only)"))
    print(f"[{cfg.label}] wrote {out} in {time.time() - t0:.1f}s")
    return 0


def _run_delayed_cells(cfg: ExperimentConfig, threads: int):
    from .analysis import FinalVerdict, _verdict_rates, _verdicts_from_probs
    from .posterior import pairwise_prob, BetaPosterior

    arrival = ArrivalProcess(float(cfg.arrival["rate"]), float(cfg.arrival["horizon"]))
    delay = DelayedOutcomeConfig(float(cfg.arrival["delay_d"]))
    ocs = {}
    for di, design in enumerate(cfg.designs):
        for si, sc in enumerate(cfg.scenarios):
            scenario = ScenarioQ(tuple(sc["thetas"]), sc.get("label", f"s{si}"))
            oc = OperatingCharacteristics(
                design_label=design.label, scenario_label=scenario.label,
                replicates=cfg.replicates, num_arms=cfg.num_arms, n_max=cfg.n_max,
                analysis_points=(cfg.n_max,), rate_semantics="final_test")
            p_pos, p_neg, n1, s = [], [], [], []
            est = EstimatorConfig(method=cfg.estimator_method,
                                  draws=cfg.estimator_draws,
                                  quadrature_nodes=cfg.quadrature_nodes)
            for r in range(cfg.replicates):
                seed = replicate_seed(cfg.master_seed, di, si, r)
                arrivals = simulate_arrivals(arrival, seed)
                tr = run_delayed_trial(scenario, arrivals, delay, cfg.priors,
                                       design, cfg.n_max, seed, est)
                posts = {k: BetaPosterior(tr.alpha[-1][k], tr.beta[-1][k])
                         for k in range(cfg.num_arms)}
                if cfg.num_arms == 2:
                    p_pos.append(pairwise_prob(posts[0], posts[1],
                                               design.final_delta0).value)
                    p_neg.append(pairwise_prob(posts[1], posts[0], 0.0).value)
                arms = np.array(tr.arm)
                n1.append(int(np.sum(arms != 0)))
                s.append(int(np.sum(np.array(tr.outcome) == 1)))
            oc.n1_values[cfg.n_max] = np.array(n1)
            oc.s_values[cfg.n_max] = np.array(s)
            if p_pos:
                oc.p_pos_values[cfg.n_max] = np.array(p_pos)
                oc.p_neg_values[cfg.n_max] = np.array(p_neg)
                verdicts = _verdicts_from_probs(np.array(p_pos), np.array(p_neg),
                                                design.final_epsilon0,
                                                design.final_variant)
                oc.verdicts[cfg.n_max] = verdicts
                oc.verdict_rates[cfg.n_max] = _verdict_rates(verdicts, cfg.replicates)
            ocs[(design.label, scenario.label)] = oc
    return ocs


def _simulate_vaccine(cfg: ExperimentConfig, out: Path, t0: float) -> int:
    import csv

    arrival = ArrivalProcess(float(cfg.arrival["rate"]), float(cfg.arrival["horizon"]))
    ve_star = float(cfg.vaccine["ve_star"])
    eps1 = float(cfg.vaccine["epsilon1"])
    rows = []
    summary_rows = []
    for si, sc in enumerate(cfg.scenarios):
        intens = sc["intensities"]
        label = sc.get("label", f"s{si}")
        decisions = []
        for r in range(cfg.replicates):
            seed = replicate_seed(cfg.master_seed, 0, si, r)
            arrivals = simulate_arrivals(arrival, seed)
            res = run_vaccine_monitoring(intens[0], intens[1], arrivals, cfg.priors,
                                         ve_star, eps1, arrival.horizon, seed)
            decisions.append(res)
            rows.append(["monitoring", label, r, res.decision.value,
                         format(res.stop_time, ".9g"), res.patients,
                         res.events_control, res.events_vaccine,
                         format(res.prob_ve, ".9g")])
        n = len(decisions)
        for name in ("success", "futility", "continue"):
            p = sum(1 for d in decisions if d.decision.value == name) / n
            summary_rows.append(["monitoring", label, f"rate_{name}", arrival.horizon,
                                 format(p, ".9g"),
                                 format(np.sqrt(p * (1 - p) / n), ".9g")])
        stops = [d.stop_time for d in decisions]
        summary_rows.append(["monitoring", label, "mean_stop_time", arrival.horizon,
                             format(np.mean(stops), ".9g"),
                             format(np.std(stops) / np.sqrt(n), ".9g")])
        print(f"[{cfg.label}] {label}: "
              + " ".join(f"{r[2]}={r[4]}" for r in summary_rows[-4:]))
    if "summary" in cfg.families:
        with open(out / "summary.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["design", "scenario", "metric", "i", "value", "std_error"])
            w.writerows(summary_rows)
    if "verdicts" in cfg.families:
        with open(out / "verdicts.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["design", "scenario", "replicate", "decision", "stop_time",
                        "patients", "events_control", "events_vaccine", "prob_ve"])
            w.writerows(rows)
    (out / "resolved_config.json").write_text(
        json.dumps(_resolved_config(cfg), indent=2, sort_keys=True) + "\n")
    print(f"[{cfg.label}] wrote {out} in {time.time() - t0:.1f}s")
    return 0


def cmd_simulate(args) -> int:
    try:
        cfg = load_config(args.config, {"seed": args.seed, "replicates": args.replicates,
                                        "out": args.out})
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    threads = args.threads or default_threads()
    try:
        return _simulate(cfg, threads)
    except (ValueError, RuntimeError) as exc:
        print(f"simulation error: {exc}", file=sys.stderr)
        return 3


def cmd_trace(args) -> int:
    try:
        cfg = load_config(args.config, {})
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    design_idx = next((j for j, d in enumerate(cfg.designs) if d.label == args.design),
                      None)
    scen_idx = next((j for j, s in enumerate(cfg.scenarios)
                     if s.get("label", f"s{j}") == args.scenario), None)
    if design_idx is None or scen_idx is None:
        print(f"config error: no design {args.design!r} or scenario "
              f"{args.scenario!r} in config", file=sys.stderr)
        return 2
    if not 0 <= args.replicate < cfg.replicates:
        print(f"config error: replicate {args.replicate} out of range "
              f"[0, {cfg.replicates})", file=sys.stderr)
        return 2
    design = cfg.designs[design_idx]
    sc = cfg.scenarios[scen_idx]
    seed = replicate_seed(cfg.master_seed, design_idx, scen_idx, args.replicate)
    est = EstimatorConfig(method=cfg.estimator_method, draws=cfg.estimator_draws,
                          quadrature_nodes=cfg.quadrature_nodes)
    label = sc.get("label", f"s{scen_idx}")
    if cfg.model == "bernoulli":
        trace = run_trial(ScenarioQ(tuple(sc["thetas"]), label), cfg.priors, design,
                          cfg.n_max, seed, est)
    elif cfg.model == "tte":
        arrivals = simulate_arrivals(
            ArrivalProcess(float(cfg.arrival["rate"]), float(cfg.arrival["horizon"])), seed)
        trace = run_tte_trial(
            EventTimeScenario(tuple(sc["intensities"]), float(cfg.analysis_horizon),
                              label), arrivals, cfg.priors, design, cfg.n_max, seed, est)
    elif cfg.model == "delayed":
        arrivals = simulate_arrivals(
            ArrivalProcess(float(cfg.arrival["rate"]), float(cfg.arrival["horizon"])), seed)
        trace = run_delayed_trial(ScenarioQ(tuple(sc["thetas"]), label), arrivals,
                                  DelayedOutcomeConfig(float(cfg.arrival["delay_d"])),
                                  cfg.priors, design, cfg.n_max, seed, est)
    else:
        print("config error: cmd_trace supports bernoulli, delayed and tte models",
              file=sys.stderr)
        return 2
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        trace.write_csv(fh, replicate=args.replicate)
    print(f"wrote {out} ({len(trace)} patients, reason: {trace.reason})")
    return 0


_ROLE_ROWS = (
    ("null", "positive", "false positive"),
    ("null", "negative", "true negative"),
    ("null", "inconclusive", "inconclusive"),
    ("alt", "positive", "true positive"),
    ("alt", "negative", "false negative"),
    ("alt", "inconclusive", "inconclusive"),
)


def cmd_report(args) -> int:
    summary = Path(args.summary_dir) / "summary.csv"
    if not summary.exists():
        print(f"report error: {summary} not found", file=sys.stderr)
        return 2
    rows = read_summary(summary)
    rates = {}
    designs = []
    points = set()
    for row in rows:
        if not row["metric"].startswith("rate_"):
            continue
        design = row["design"]
        if design not in designs:
            designs.append(design)
        i = int(row["i"])
        points.add(i)
        role = "null" if "null" in row["scenario"].lower() else "alt"
        rates[(design, role, row["metric"][5:], i)] = (
            float(row["value"]), float(row["std_error"] or 0.0))
    if not rates:
        print("report error: no rate rows in summary", file=sys.stderr)
        return 2
    for i in sorted(points):
        print(f"\n=== final analysis at i = {i} (value +- 3*SE) ===")
        width = max(len(d) for d in designs) + 2
        header = " " * 26 + "".join(f"{d:>{width + 14}}" for d in designs)
        print(header)
        for role, verdict, name in _ROLE_ROWS:
            cells = []
            for d in designs:
                v = rates.get((d, role, verdict, i))
                cells.append(f"{v[0]:.3f} (+-{3 * v[1]:.3f})".rjust(width + 14)
                             if v else "--".rjust(width + 14))
            print(f"Q_{role}: {name:<18}" + "".join(cells))
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="adaptrial",
        description="Monte Carlo engine for Bayesian adaptive multi-arm trial designs")
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="run an experiment grid and write CSVs")
    p_sim.add_argument("--config", required=True, type=Path)
    p_sim.add_argument("--out", default=None, help="output directory override")
    p_sim.add_argument("--threads", type=int, default=None,
                       help="worker processes (default: ATE_THREADS or CPU count)")
    p_sim.add_argument("--seed", type=int, default=None, help="master seed override")
    p_sim.add_argument("--replicates", type=int, default=None)
    p_sim.set_defaults(func=cmd_simulate)

    p_tr = sub.add_parser("trace", help="emit one replicate's full per-patient trace")
    p_tr.add_argument("--config", required=True, type=Path)
    p_tr.add_argument("--design", required=True)
    p_tr.add_argument("--scenario", required=True)
    p_tr.add_argument("--replicate", type=int, default=0)
    p_tr.add_argument("--out", required=True, type=Path)
    p_tr.set_defaults(func=cmd_trace)

    p_rep = sub.add_parser("report", help="print rate tables from summary CSVs")
    p_rep.add_argument("summary_dir")
    p_rep.set_defaults(func=cmd_report)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
