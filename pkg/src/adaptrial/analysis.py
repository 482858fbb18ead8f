"""Final-analysis tests, replication orchestration, and aggregation of
frequentist operating characteristics.

``run_experiment`` distributes fixed-size replicate blocks of each
(design, scenario) cell over a process pool, merges the partial results
in block order (so outputs are byte-identical for any worker count), and
reduces them to rates with binomial standard errors, empirical CDFs,
per-patient band probabilities and posterior-mean curves. Verdicts come
either from the final test at the analysis points or from selection-rule
drop events, depending on the design's policy.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from .allocation import DesignParams
from .batch import BLOCK_REPS, BlockResult, CellSpec, band_family, run_block
from .continuous import ArrivalProcess, EventTimeScenario, run_tte_trial, simulate_arrivals
from .posterior import BetaPosterior, pairwise_prob
from .rngstream import replicate_seed
from .trial import ScenarioQ, TrialTrace


class FinalVerdict(Enum):
    POSITIVE = "positive"        # control dropped
    NEGATIVE = "negative"        # experimental dropped / futility
    INCONCLUSIVE = "inconclusive"


def final_test(posteriors: Mapping[int, BetaPosterior], epsilon0: float,
               delta0: float, variant: str = "original") -> FinalVerdict:
    """Two-arm final assessment at the end of the trial.

    original: Positive iff P(th0 + d0 >= th1) <= eps0, Negative iff
    P(th1 >= th0) <= eps0. no_control_margin drops d0 from the Positive
    branch; symmetric_margin adds it to the Negative branch. Weak
    inequalities; eps0 < 0.5 guarantees at most one branch fires.
    """
    if not 0.0 < epsilon0 < 0.5:
        raise ValueError(f"epsilon0 must be in (0, 0.5), got {epsilon0}")
    if set(posteriors) != {0, 1}:
        raise ValueError("final_test is defined for the two-arm case (arms 0 and 1)")
    if variant not in ("original", "no_control_margin", "symmetric_margin"):
        raise ValueError(f"unknown final-test variant {variant!r}")
    d_pos = 0.0 if variant == "no_control_margin" else delta0
    d_neg = delta0 if variant == "symmetric_margin" else 0.0
    p_pos = pairwise_prob(posteriors[0], posteriors[1], d_pos).value
    p_neg = pairwise_prob(posteriors[1], posteriors[0], -d_neg).value
    if p_pos <= epsilon0:
        return FinalVerdict.POSITIVE
    if p_neg <= epsilon0:
        return FinalVerdict.NEGATIVE
    return FinalVerdict.INCONCLUSIVE


def _verdicts_from_probs(p_pos: np.ndarray, p_neg: np.ndarray, epsilon0: float,
                         variant: str) -> np.ndarray:
    """Vectorized final_test over per-replicate probability arrays.

    p_pos is P(th0 + d0 >= th1), p_neg is P(th1 >= th0); the variant
    statistics follow from complements: P(th0 >= th1) = 1 - p_neg and
    P(th1 >= th0 + d0) = 1 - p_pos.
    """
    if variant == "original":
        pos_stat, neg_stat = p_pos, p_neg
    elif variant == "no_control_margin":
        pos_stat, neg_stat = 1.0 - p_neg, p_neg
    elif variant == "symmetric_margin":
        pos_stat, neg_stat = p_pos, 1.0 - p_pos
    else:
        raise ValueError(variant)
    out = np.full(p_pos.shape, FinalVerdict.INCONCLUSIVE, dtype=object)
    out[neg_stat <= epsilon0] = FinalVerdict.NEGATIVE
    out[pos_stat <= epsilon0] = FinalVerdict.POSITIVE
    return out


@dataclass
class OperatingCharacteristics:
    """Aggregated frequentist measures of one (design, scenario) cell."""

    design_label: str
    scenario_label: str
    replicates: int
    num_arms: int
    n_max: int
    analysis_points: tuple[int, ...]
    rate_semantics: str                      # final_test | drop_events | none
    verdict_rates: dict[int, dict[str, tuple[float, float]]] = field(default_factory=dict)
    verdicts: dict[int, np.ndarray] = field(default_factory=dict)
    n1_values: dict[int, np.ndarray] = field(default_factory=dict)
    s_values: dict[int, np.ndarray] = field(default_factory=dict)
    p_pos_values: dict[int, np.ndarray] = field(default_factory=dict)
    p_neg_values: dict[int, np.ndarray] = field(default_factory=dict)
    band_events: tuple[str, ...] = ()
    band_probs: np.ndarray | None = None      # (n_max, n_events)
    postmean_curves: np.ndarray | None = None  # (n_max, m)
    drop_i: np.ndarray | None = None           # (R, m)
    drop_n: np.ndarray | None = None
    reasons: np.ndarray | None = None

    def imbalance_prob(self, i: int) -> tuple[float, float]:
        """P(N_1(i) < i/2): more patients on the control than the experimental."""
        vals = self.n1_values[i]
        p = float(np.mean(vals < i / 2))
        return p, float(np.sqrt(p * (1 - p) / self.replicates))

    def mean_successes(self, i: int) -> tuple[float, float]:
        vals = self.s_values[i]
        se = float(vals.std(ddof=1) / np.sqrt(vals.size)) if vals.size > 1 else 0.0
        return float(vals.mean()), se


def allocation_cdfs(oc: OperatingCharacteristics, checkpoints: Sequence[int]):
    """Exact empirical CDFs of N_1(i) and S(i) plus the imbalance summary."""
    out = {}
    for i in checkpoints:
        n1 = np.sort(oc.n1_values[i])
        s = np.sort(oc.s_values[i])
        out[i] = {
            "n1": _ecdf(n1),
            "s": _ecdf(s),
            "imbalance_prob": oc.imbalance_prob(i),
            "mean_successes": oc.mean_successes(i),
        }
    return out


def _ecdf(sorted_vals: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x, counts = np.unique(sorted_vals, return_counts=True)
    return x, np.cumsum(counts) / sorted_vals.size


def band_probabilities(source, event_family: str):
    """Per-patient-index probabilities of the family's mutually exclusive
    events; bands sum to 1 at every i.

    ``source`` is either an OperatingCharacteristics from the harness or a
    list of TrialTrace objects from a common cell (the two routes are
    checked against each other in the tests).
    """
    if isinstance(source, OperatingCharacteristics):
        if not source.band_events:
            raise ValueError(f"cell {source.design_label!r} collected no bands")
        _check_family(event_family, source.band_events)
        return source.band_events, source.band_probs
    traces: list[TrialTrace] = list(source)
    m = traces[0].num_arms
    if event_family == "joint_status":
        if m != 2:
            raise ValueError("joint_status bands are defined for two-arm cells")
        events = ("both_active", "experimental_dormant", "control_dormant",
                  "both_dormant")
        n_max = max(len(t) for t in traces)
        counts = np.zeros((n_max, 4))
        for t in traces:
            st = np.array(t.statuses)
            idx = (st[:, 0] != 0) * 2 + (st[:, 1] != 0)
            for i in range(n_max):
                counts[i, idx[min(i, len(t) - 1)]] += 1
        return events, counts / len(traces)
    if event_family == "dropped_status":
        if m != 2:
            raise ValueError("dropped_status bands are defined for two-arm cells")
        events = ("none_dropped", "control_dropped", "experimental_dropped")
        n_max = max(len(t) for t in traces)
        counts = np.zeros((n_max, 3))
        for t in traces:
            drops = {d.arm: d.i_last for d in t.drop_records}
            for i in range(1, n_max + 1):
                if 0 in drops and drops[0] <= i:
                    counts[i - 1, 1] += 1
                elif 1 in drops and drops[1] <= i:
                    counts[i - 1, 2] += 1
                else:
                    counts[i - 1, 0] += 1
        return events, counts / len(traces)
    if event_family == "maximal":
        events = tuple(f"arm{k}_maximal_control_out" for k in range(1, m)) + ("control_in",)
        n_max = max(len(t) for t in traces)
        counts = np.zeros((n_max, m))
        for t in traces:
            pm = np.array(t.p_max)
            st = np.array(t.statuses)
            drops = {d.arm: d.i_last for d in t.drop_records}
            for i in range(1, n_max + 1):
                row = min(i, len(t)) - 1
                if t.drop_records is not None and 0 in drops:
                    ctrl_in = not (drops[0] <= i)
                else:
                    ctrl_in = st[row, 0] == 0
                if np.isnan(pm[row, 0]):
                    counts[i - 1, m - 1] += 1
                elif ctrl_in:
                    counts[i - 1, m - 1] += 1
                else:
                    counts[i - 1, int(np.argmax(pm[row])) - 1] += 1
        return events, counts / len(traces)
    raise ValueError(f"unknown event family {event_family!r}")


def _check_family(requested: str, events: tuple[str, ...]):
    families = {
        "joint_status": "both_active",
        "dropped_status": "none_dropped",
        "maximal": "control_in",
    }
    marker = families.get(requested)
    if marker is None:
        raise ValueError(f"unknown event family {requested!r}")
    if marker not in events:
        raise ValueError(f"cell bands are not of family {requested!r}: {events}")


@dataclass(frozen=True)
class ExperimentCell:
    """One (design, scenario) cell of an experiment grid."""

    spec: CellSpec
    rate_semantics: str


def _resolve_semantics(design: DesignParams, num_arms: int,
                       override: str | None = None) -> str:
    if override:
        return override
    if design.policy == "rule2":
        return "drop_events"
    return "final_test" if num_arms == 2 else "none"


def _cell_tasks(cells: list[ExperimentCell], replicates: int):
    tasks = []
    for ci, cell in enumerate(cells):
        for start in range(0, replicates, BLOCK_REPS):
            tasks.append((ci, start, min(start + BLOCK_REPS, replicates)))
    return tasks


def _run_task(args):
    cell, start, stop = args
    return run_block(cell.spec, start, stop)


def default_threads() -> int:
    env = os.environ.get("ATE_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def run_experiment(designs: Sequence[DesignParams], scenarios: Sequence[ScenarioQ],
                   replicates: int, n_max: int, master_seed: int,
                   thread_budget: int | None = None, *,
                   priors: Sequence[tuple[float, float]] | None = None,
                   analysis_points: Sequence[int] | None = None,
                   estimator_method: str = "auto", estimator_draws: int = 16384,
                   quadrature_nodes: int = 128,
                   semantics_overrides: Mapping[str, str] | None = None,
                   ) -> dict[tuple[str, str], OperatingCharacteristics]:
    """Run R replicates of every (design, scenario) cell and aggregate.

    Replicate seeds are positional in (master_seed, design index, scenario
    index, replicate index); aggregation is order-independent, so results
    are identical for any thread count.
    """
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    points = tuple(sorted(set(analysis_points or [n_max])))
    if points and points[-1] > n_max:
        raise ValueError(f"analysis point {points[-1]} exceeds n_max {n_max}")
    m = scenarios[0].num_arms
    for sc in scenarios:
        if sc.num_arms != m:
            raise ValueError("all scenarios must share the arm count")
    pri = tuple(priors or ((1.0, 1.0),) * m)
    overrides = dict(semantics_overrides or {})

    cells: list[ExperimentCell] = []
    for di, design in enumerate(designs):
        design.validate(m)
        for si, sc in enumerate(scenarios):
            spec = CellSpec(design=design, scenario=sc, priors=pri, n_max=n_max,
                            analysis_points=points, estimator_method=estimator_method,
                            estimator_draws=estimator_draws,
                            quadrature_nodes=quadrature_nodes,
                            master_seed=master_seed, design_index=di,
                            scenario_index=si)
            cells.append(ExperimentCell(
                spec, _resolve_semantics(design, m, overrides.get(design.label))))

    tasks = _cell_tasks(cells, replicates)
    threads = thread_budget or default_threads()
    results: dict[tuple[int, int], BlockResult] = {}
    if threads <= 1 or len(tasks) == 1:
        for t in tasks:
            results[(t[0], t[1])] = _run_task((cells[t[0]], t[1], t[2]))
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            futs = {pool.submit(_run_task, (cells[t[0]], t[1], t[2])): t for t in tasks}
            for fut, t in futs.items():
                try:
                    results[(t[0], t[1])] = fut.result()
                except Exception as exc:
                    cell = cells[t[0]]
                    raise RuntimeError(
                        f"cell ({cell.spec.design.label}, {cell.spec.scenario.label}) "
                        f"replicates {t[1]}..{t[2]}: {exc}") from exc

    out: dict[tuple[str, str], OperatingCharacteristics] = {}
    for ci, cell in enumerate(cells):
        blocks = [results[(ci, start)] for start in range(0, replicates, BLOCK_REPS)]
        out[(cell.spec.design.label, cell.spec.scenario.label)] = _reduce_cell(
            cell, blocks, replicates)
    return out


def _reduce_cell(cell: ExperimentCell, blocks: list[BlockResult],
                 replicates: int) -> OperatingCharacteristics:
    spec = cell.spec
    m = spec.num_arms
    design = spec.design
    oc = OperatingCharacteristics(
        design_label=design.label, scenario_label=spec.scenario.label,
        replicates=replicates, num_arms=m, n_max=spec.n_max,
        analysis_points=spec.analysis_points, rate_semantics=cell.rate_semantics)
    oc.band_events = blocks[0].band_events
    if blocks[0].band_counts is not None:
        oc.band_probs = sum(b.band_counts for b in blocks) / replicates
    oc.postmean_curves = sum(b.postmean_sum for b in blocks) / replicates
    oc.drop_i = np.concatenate([b.drop_i for b in blocks])
    oc.drop_n = np.concatenate([b.drop_n for b in blocks])
    oc.reasons = np.concatenate([b.reasons for b in blocks])

    for i in spec.analysis_points:
        cps = [b.checkpoints[i] for b in blocks]
        n_arm = np.concatenate([c.n_arm for c in cps])
        oc.n1_values[i] = n_arm[:, 1] if m == 2 else n_arm[:, 1:].sum(axis=1)
        oc.s_values[i] = np.concatenate([c.s_total for c in cps])
        if cps[0].p_pos is not None:
            oc.p_pos_values[i] = np.concatenate([c.p_pos for c in cps])
            oc.p_neg_values[i] = np.concatenate([c.p_neg for c in cps])
        verdicts = _cell_verdicts(cell.rate_semantics, design, oc, i)
        if verdicts is not None:
            oc.verdicts[i] = verdicts
            oc.verdict_rates[i] = _verdict_rates(verdicts, replicates)
    return oc


def _verdict_rates(verdicts: np.ndarray, replicates: int):
    rates = {}
    for v in FinalVerdict:
        p = float(np.mean(verdicts == v))
        rates[v.value] = (p, float(np.sqrt(p * (1 - p) / replicates)))
    return rates


def _cell_verdicts(rate_semantics: str, design: DesignParams,
                   oc: OperatingCharacteristics, i: int) -> np.ndarray | None:
    if rate_semantics == "final_test" and i in oc.p_pos_values:
        return _verdicts_from_probs(oc.p_pos_values[i], oc.p_neg_values[i],
                                    design.final_epsilon0, design.final_variant)
    if rate_semantics == "drop_events":
        ctrl = (oc.drop_i[:, 0] >= 0) & (oc.drop_i[:, 0] <= i)
        exp_all = np.all((oc.drop_i[:, 1:] >= 0) & (oc.drop_i[:, 1:] <= i), axis=1)
        out = np.full(oc.drop_i.shape[0], FinalVerdict.INCONCLUSIVE, dtype=object)
        out[ctrl] = FinalVerdict.POSITIVE
        out[exp_all] = FinalVerdict.NEGATIVE
        return out
    return None


# --- time-to-event experiment harness -------------------------------------

@dataclass(frozen=True)
class TTECellSpec:
    design: DesignParams
    scenario: EventTimeScenario
    priors: tuple[tuple[float, float], ...]
    arrival: ArrivalProcess
    n_max: int
    analysis_points: tuple[int, ...]
    estimator_method: str
    estimator_draws: int
    quadrature_nodes: int
    master_seed: int
    design_index: int
    scenario_index: int


def _run_tte_block(args):
    spec, start, stop = args
    m = spec.scenario.num_arms
    R = stop - start
    drop_i = np.full((R, m), -1, dtype=np.int64)
    drop_n = np.full((R, m), -1, dtype=np.int64)
    reasons = []
    postmean_sum = np.zeros((spec.n_max, m))
    for j, r in enumerate(range(start, stop)):
        seed = replicate_seed(spec.master_seed, spec.design_index,
                              spec.scenario_index, r)
        arrivals = simulate_arrivals(spec.arrival, seed)
        from .posterior import EstimatorConfig
        est = EstimatorConfig(method=spec.estimator_method, draws=spec.estimator_draws,
                              quadrature_nodes=spec.quadrature_nodes)
        tr = run_tte_trial(spec.scenario, arrivals, spec.priors, spec.design,
                           spec.n_max, seed, est)
        for d in tr.drop_records:
            drop_i[j, d.arm] = d.i_last
            drop_n[j, d.arm] = d.n_last
        reasons.append(tr.reason)
        means = np.array(tr.alpha) / np.array(tr.beta)  # Gamma shape/rate
        rows = means.shape[0]
        postmean_sum[:rows] += means
        if rows < spec.n_max:
            postmean_sum[rows:] += means[-1]
    return drop_i, drop_n, reasons, postmean_sum


def run_tte_experiment(designs: Sequence[DesignParams],
                       scenarios: Sequence[EventTimeScenario],
                       arrival: ArrivalProcess, replicates: int, n_max: int,
                       master_seed: int, thread_budget: int | None = None, *,
                       priors: Sequence[tuple[float, float]] | None = None,
                       analysis_points: Sequence[int] | None = None,
                       estimator_method: str = "auto", estimator_draws: int = 16384,
                       quadrature_nodes: int = 128,
                       ) -> dict[tuple[str, str], OperatingCharacteristics]:
    """Drop-event operating characteristics for censored exponential cells."""
    m = scenarios[0].num_arms
    pri = tuple(priors or ((1.0, 1.0),) * m)
    points = tuple(sorted(set(analysis_points or [n_max])))
    cells = []
    for di, design in enumerate(designs):
        design.validate(m)
        for si, sc in enumerate(scenarios):
            cells.append(TTECellSpec(design, sc, pri, arrival, n_max, points,
                                     estimator_method, estimator_draws,
                                     quadrature_nodes, master_seed, di, si))
    tasks = []
    for ci, cell in enumerate(cells):
        for start in range(0, replicates, BLOCK_REPS):
            tasks.append((ci, start, min(start + BLOCK_REPS, replicates)))
    threads = thread_budget or default_threads()
    results = {}
    if threads <= 1 or len(tasks) == 1:
        for ci, start, stop in tasks:
            results[(ci, start)] = _run_tte_block((cells[ci], start, stop))
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            futs = {pool.submit(_run_tte_block, (cells[ci], start, stop)): (ci, start)
                    for ci, start, stop in tasks}
            for fut, key in futs.items():
                results[key] = fut.result()

    out = {}
    for ci, cell in enumerate(cells):
        parts = [results[(ci, start)] for start in range(0, replicates, BLOCK_REPS)]
        oc = OperatingCharacteristics(
            design_label=cell.design.label, scenario_label=cell.scenario.label,
            replicates=replicates, num_arms=m, n_max=n_max, analysis_points=points,
            rate_semantics="drop_events")
        oc.drop_i = np.concatenate([p[0] for p in parts])
        oc.drop_n = np.concatenate([p[1] for p in parts])
        oc.reasons = np.array(sum((p[2] for p in parts), []))
        oc.postmean_curves = sum(p[3] for p in parts) / replicates
        oc.band_events = ("none_dropped", "control_dropped", "experimental_dropped")
        grid = np.arange(1, n_max + 1)
        ctrl = oc.drop_i[:, 0]
        exp_d = oc.drop_i[:, 1:]
        exp_first = np.where((exp_d >= 0).any(axis=1),
                             np.where(exp_d >= 0, exp_d, np.iinfo(np.int64).max).min(axis=1),
                             -1)
        probs = np.zeros((n_max, 3))
        for j, i in enumerate(grid):
            c = float(np.mean((ctrl >= 0) & (ctrl <= i)))
            e = float(np.mean((exp_first >= 0) & (exp_first <= i)))
            probs[j] = (1 - c - e, c, e)
        oc.band_probs = probs
        for i in points:
            verdicts = _cell_verdicts("drop_events", cell.design, oc, i)
            oc.verdicts[i] = verdicts
            oc.verdict_rates[i] = _verdict_rates(verdicts, replicates)
        out[(cell.design.label, cell.scenario.label)] = oc
    return out
