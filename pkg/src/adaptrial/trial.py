"""Reference trial engine for instantaneous Bernoulli outcomes.

One replicate at a time: walk the randomization list, assign, draw the
outcome under the generating scenario, update the treated arm's counts
and posterior, re-evaluate the policy after every observed outcome, and
record a full trace. Every random quantity comes from a purpose-keyed
stream derived from the replicate seed, so a trace is a pure function of
(scenario, priors, params, n_max, seed) and changing e.g. the Monte Carlo
draw count cannot perturb the outcome sequence.

The parallel harness in :mod:`adaptrial.batch` runs the same process
vectorized across replicates; the two implementations are checked against
each other in the test suite.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import posterior as post_ops
from .allocation import (ArmStatus, ComparativeProbs, DesignParams, DropRecord,
                         apply_burn_in, next_assignment, rule1_update, rule2_update,
                         thompson_weights)
from .posterior import BetaPosterior, EstimatorConfig
from .randomization import RandomizationList
from .rngstream import CounterStream, StreamTag, mc_generator, stream_key


@dataclass(frozen=True)
class ScenarioQ:
    """Hypothesized generating distribution: true response rate per arm."""

    true_thetas: tuple[float, ...]
    label: str = ""

    def __post_init__(self):
        if len(self.true_thetas) < 2:
            raise ValueError("need a control and at least one experimental arm")
        for th in self.true_thetas:
            if not 0.0 < th < 1.0:
                raise ValueError(f"true response rates must be in (0, 1), got {th}")

    @property
    def num_arms(self) -> int:
        return len(self.true_thetas)


class TrialTrace:
    """Per-patient record stream of one replicate plus the terminal record."""

    CORE_REAL_COLS = ("alpha", "beta", "p_max")

    def __init__(self, num_arms: int):
        self.num_arms = num_arms
        self.i: list[int] = []
        self.n: list[int] = []
        self.arm: list[int] = []
        self.outcome: list[int] = []
        self.statuses: list[np.ndarray] = []
        self.alpha: list[np.ndarray] = []
        self.beta: list[np.ndarray] = []
        self.p_ctrl_margin: list[float] = []
        self.p_max: list[np.ndarray] = []
        self.in_t: list[np.ndarray] = []
        self.extra: dict[str, list] = {}
        self.reason: str = ""
        self.final_active_set: set[int] = set()
        self.drop_records: list[DropRecord] = []
        self.terminal_extra: dict = {}

    def add_row(self, i, n, arm, outcome, statuses, alpha, beta, p_ctrl, p_max, in_t,
                **extra):
        self.i.append(int(i))
        self.n.append(int(n))
        self.arm.append(int(arm))
        # binary engines store 0/1; the time-to-event engine stores the
        # latent event time
        self.outcome.append(int(outcome) if float(outcome).is_integer() else float(outcome))
        self.statuses.append(np.asarray(statuses, dtype=np.int8).copy())
        self.alpha.append(np.asarray(alpha, dtype=float).copy())
        self.beta.append(np.asarray(beta, dtype=float).copy())
        self.p_ctrl_margin.append(float(p_ctrl) if p_ctrl is not None else np.nan)
        self.p_max.append(np.asarray(p_max, dtype=float).copy())
        self.in_t.append(np.asarray(in_t, dtype=np.int8).copy())
        for key, val in extra.items():
            self.extra.setdefault(key, []).append(val)

    def __len__(self) -> int:
        return len(self.i)

    def header(self) -> list[str]:
        m = self.num_arms
        cols = ["replicate", "i", "n", "arm", "outcome"]
        cols += [f"status_{k}" for k in range(m)]
        cols += [f"alpha_{k}" for k in range(m)]
        cols += [f"beta_{k}" for k in range(m)]
        cols += ["p_ctrl_margin"]
        cols += [f"p_max_{k}" for k in range(m)]
        cols += [f"in_T_{k}" for k in range(m)]
        for key in self.extra:
            if np.ndim(self.extra[key][0]) == 0:
                cols.append(key)
            else:
                cols += [f"{key}_{k}" for k in range(m)]
        return cols

    def write_csv(self, fh, replicate: int = 0) -> None:
        g = lambda x: format(float(x), ".9g")
        fh.write(",".join(self.header()) + "\n")
        for j in range(len(self.i)):
            out = self.outcome[j]
            row = [str(replicate), str(self.i[j]), str(self.n[j]), str(self.arm[j]),
                   str(out) if isinstance(out, int) else g(out)]
            row += [str(int(s)) for s in self.statuses[j]]
            row += [g(v) for v in self.alpha[j]]
            row += [g(v) for v in self.beta[j]]
            row += [g(self.p_ctrl_margin[j])]
            row += [g(v) for v in self.p_max[j]]
            row += [str(int(v)) for v in self.in_t[j]]
            for key in self.extra:
                val = self.extra[key][j]
                if np.ndim(val) == 0:
                    row.append(g(val))
                else:
                    row += [g(v) for v in val]
            fh.write(",".join(row) + "\n")

    def to_csv_bytes(self, replicate: int = 0) -> bytes:
        buf = io.StringIO()
        self.write_csv(buf, replicate)
        return buf.getvalue().encode()

    def terminal_summary(self) -> dict:
        return {
            "reason": self.reason,
            "patients": len(self.i),
            "final_active_set": sorted(self.final_active_set),
            "drops": [(d.arm, d.n_last, d.i_last) for d in self.drop_records],
        }


@dataclass
class TrialState:
    """Live state of one trial; self-contained so ``step`` can advance it."""

    scenario: ScenarioQ
    priors: tuple[tuple[float, float], ...]
    params: DesignParams
    n_max: int
    estimator: EstimatorConfig
    rlist: RandomizationList
    outcome_stream: CounterStream
    thompson_stream: CounterStream
    n: int = 0
    patients: int = 0
    successes: np.ndarray = None
    failures: np.ndarray = None
    statuses: np.ndarray = None
    active_set: set[int] = field(default_factory=set)
    drop_records: list[DropRecord] = field(default_factory=list)
    probs_current: ComparativeProbs | None = None
    terminated: str | None = None
    trace: TrialTrace = None

    def __post_init__(self):
        m = self.scenario.num_arms
        if self.successes is None:
            self.successes = np.zeros(m, dtype=np.int64)
        if self.failures is None:
            self.failures = np.zeros(m, dtype=np.int64)
        if self.statuses is None:
            self.statuses = np.full(m, ArmStatus.ACTIVE, dtype=np.int8)
        if not self.active_set:
            self.active_set = set(range(m))
        if self.trace is None:
            self.trace = TrialTrace(m)

    def posteriors(self) -> dict[int, BetaPosterior]:
        return {k: BetaPosterior(self.priors[k][0] + int(self.successes[k]),
                                 self.priors[k][1] + int(self.failures[k]))
                for k in range(self.scenario.num_arms)}

    def in_t_vector(self) -> np.ndarray:
        m = self.scenario.num_arms
        return np.array([1 if k in self.active_set else 0 for k in range(m)],
                        dtype=np.int8)


def init_state(scenario: ScenarioQ, priors, params: DesignParams, n_max: int,
               seed: int, estimator: EstimatorConfig | None = None) -> TrialState:
    m = scenario.num_arms
    if n_max < 1:
        raise ValueError(f"n_max must be >= 1, got {n_max}")
    if len(priors) != m:
        raise ValueError("one (alpha, beta) prior pair per arm required")
    for a, b in priors:
        BetaPosterior(a, b)  # validates positivity
    params.validate(m)
    est = EstimatorConfig(
        method=estimator.method if estimator else "auto",
        draws=estimator.draws if estimator else 16384,
        quadrature_nodes=estimator.quadrature_nodes if estimator else 128,
        rng=mc_generator(seed),
    )
    state = TrialState(
        scenario=scenario,
        priors=tuple((float(a), float(b)) for a, b in priors),
        params=params,
        n_max=n_max,
        estimator=est,
        rlist=RandomizationList(_substream_seed(seed, StreamTag.BLOCKS), m),
        outcome_stream=CounterStream(stream_key(seed, StreamTag.OUTCOMES)),
        thompson_stream=CounterStream(stream_key(seed, StreamTag.THOMPSON)),
    )
    if params.policy == "thompson" and params.burn_in == 0:
        state.probs_current = _joint_probs(state)
    return state


def _substream_seed(seed: int, tag: StreamTag) -> int:
    k0, k1 = stream_key(seed, tag)
    return k0 | (k1 << 64)


def _joint_probs(state: TrialState) -> ComparativeProbs:
    """All rule inputs at the current data state, sharing one draw matrix
    on the Monte Carlo path (common random numbers across quantities)."""
    params = state.params
    posteriors = state.posteriors()
    m = state.scenario.num_arms
    if params.policy == "rule2":
        cand = set(state.active_set)
    else:
        cand = set(range(m))
    est = state.estimator
    need_ctrl = 0 in cand and params.policy != "thompson"
    use_mc = est.method == "monte_carlo" or (est.method in ("auto", "quadrature")
                                             and len(cand) > 2)
    p_best: dict[int, float] = {k: 0.0 for k in range(m)}
    p_ctrl = None
    if use_mc:
        arms = sorted(posteriors)
        matrix = post_ops._mc_beta_matrix(posteriors, arms, est.generator(), est.draws)
        best, ctrl = post_ops.mc_state_probs(matrix, arms, cand,
                                             params.delta if need_ctrl else None)
        p_best.update(best)
        p_ctrl = ctrl if need_ctrl else None
    else:
        cs = sorted(cand)
        if len(cs) == 1:
            p_best[cs[0]] = 1.0
        else:
            lo, hi = cs
            p = post_ops.pairwise_prob(posteriors[hi], posteriors[lo], 0.0,
                                       est.quadrature_nodes).value
            p_best[hi], p_best[lo] = p, 1.0 - p
        if need_ctrl:
            others = sorted(cand - {0})
            if not others:
                p_ctrl = 1.0
            else:
                p_ctrl = post_ops.pairwise_prob(posteriors[0], posteriors[others[0]],
                                                params.delta, est.quadrature_nodes).value
    p_mrt = p_ctrl_mrt = None
    if params.policy == "rule2" and params.epsilon1 > 0.0:
        p_mrt = {k: post_ops.prob_exceeds(posteriors[k], params.theta_low).value
                 for k in sorted(cand - {0})}
        if 0 in cand:
            p_ctrl_mrt = post_ops.prob_exceeds(
                posteriors[0], max(params.theta_low - params.delta, 0.0)).value
    return ComparativeProbs(p_best, p_ctrl, p_mrt, p_ctrl_mrt)


def step(state: TrialState, params: DesignParams | None = None,
         probabilities_provider: Callable[[TrialState], ComparativeProbs] | None = None,
         ) -> TrialState:
    """One assignment + outcome + policy-update cycle.

    Only the treated arm's counts and posterior change; dormant arms'
    posteriors stay frozen. ``probabilities_provider`` overrides how the
    comparative probabilities are computed (tests inject synthetic ones).
    """
    if state.terminated is not None:
        raise RuntimeError(f"trial already terminated: {state.terminated}")
    params = params if params is not None else state.params
    provider = probabilities_provider or _joint_probs
    scenario = state.scenario
    m = scenario.num_arms
    i = state.patients + 1

    statuses_eff = apply_burn_in(i, params, state.statuses)
    if params.policy == "thompson" and i > params.burn_in:
        assert state.probs_current is not None
        weights = thompson_weights(
            np.array([state.probs_current.p_best[k] for k in range(m)]), params.kappa)
        u = state.thompson_stream.uniform(i)
        arm = min(int(np.searchsorted(np.cumsum(weights), u, side="right")), m - 1)
        state.n += 1  # virtual position so trace indexes stay increasing
        n_assigned = state.n
    else:
        # fixed_block and in-burn-in policies walk the list with all arms
        # active; statuses of adaptive policies are as last evaluated
        n_assigned, arm = next_assignment(state.rlist, state.n + 1, statuses_eff)
        state.n = n_assigned

    u = state.outcome_stream.uniform(i)
    y = 1 if u < scenario.true_thetas[arm] else 0
    if y:
        state.successes[arm] += 1
    else:
        state.failures[arm] += 1
    state.patients = i

    evaluate = (params.policy in ("rule1", "rule2", "thompson")
                and i >= params.burn_in
                and (i - params.burn_in) % params.eval_interval == 0)
    new_drops: list[DropRecord] = []
    if evaluate:
        probs = provider(state)
        state.probs_current = probs
        if params.policy == "rule1":
            state.statuses = rule1_update(probs, m, params.epsilon)
        elif params.policy == "rule2":
            state.statuses, state.active_set, new_drops = rule2_update(
                probs, state.statuses, state.active_set, params, state.n, i)
            state.drop_records.extend(new_drops)

    probs = state.probs_current
    p_best_vec = (np.array([probs.p_best.get(k, 0.0) for k in range(m)])
                  if probs is not None and evaluate
                  else np.full(m, np.nan))
    p_ctrl = (probs.p_control_margin if probs is not None and evaluate else None)
    alphas = [state.priors[k][0] + state.successes[k] for k in range(m)]
    betas = [state.priors[k][1] + state.failures[k] for k in range(m)]
    state.trace.add_row(i, n_assigned, arm, y, state.statuses, alphas, betas,
                        p_ctrl, p_best_vec, state.in_t_vector())

    if params.policy == "rule2":
        if len(state.active_set) == 0:
            state.terminated = "futility"
        elif len(state.active_set) == 1:
            state.terminated = "single_survivor"
        elif (not params.continue_after_control_drop
              and any(d.arm == 0 for d in new_drops)):
            state.terminated = "control_dropped"
    if state.terminated is None and i >= state.n_max:
        state.terminated = "reached_n_max"
    return state


def run_trial(scenario: ScenarioQ, priors, params: DesignParams, n_max: int,
              seed: int, estimator: EstimatorConfig | None = None) -> TrialTrace:
    """Execute one full replicate and return its trace.

    Reruns with identical inputs reproduce the trace bit-exactly; the
    Monte Carlo stream for posterior probabilities is keyed separately
    from the outcome stream, so changing the estimator's draw count never
    perturbs assignments or outcomes.
    """
    state = init_state(scenario, priors, params, n_max, seed, estimator)
    while state.terminated is None:
        step(state)
    state.trace.reason = state.terminated
    state.trace.final_active_set = set(state.active_set)
    state.trace.drop_records = list(state.drop_records)
    return state.trace
