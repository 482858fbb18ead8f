"""Continuous-time extensions: Poisson arrivals, fixed-delay binary
outcomes, and right-censored exponential time-to-event outcomes.

Allocation and rule evaluation happen at arrival instants, when a
treatment decision is actually needed. In the delayed-outcome engine a
patient's outcome becomes visible strictly after its measurement lag
(U_j < t - d), and each arrival first absorbs every newly matured
outcome, then re-evaluates the policy, then assigns. In the
time-to-event engine the sufficient statistics at time t are the per-arm
event count and total time on test sum [(V_i ^ t) - U_i]^+, and the
rules operate on the intensity scale where smaller is better: the
comparative criteria use the hazard-ratio margin rho (equivalently a
margin of -log rho after the eta = -log theta transform) and the
futility branch uses an upper intensity bound. The vaccine monitoring
variant additionally checks its efficacy stopping criterion at every
event maturity time.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import posterior as post_ops
from .allocation import (ArmStatus, ComparativeProbs, DesignParams, DropRecord,
                         next_assignment, rule1_update, rule2_update)
from .posterior import EstimatorConfig, GammaPosterior
from .randomization import RandomizationList
from .rngstream import CounterStream, StreamTag, mc_generator, stream_key
from .trial import ScenarioQ, TrialTrace, _substream_seed


@dataclass(frozen=True)
class ArrivalProcess:
    """Homogeneous Poisson recruitment."""

    rate: float
    horizon: float

    def __post_init__(self):
        if self.rate <= 0:
            raise ValueError(f"rate must be positive, got {self.rate}")
        if self.horizon <= 0:
            raise ValueError(f"horizon must be positive, got {self.horizon}")


@dataclass(frozen=True)
class DelayedOutcomeConfig:
    """Binary outcome measured a fixed lag after treatment."""

    delay_d: float

    def __post_init__(self):
        if self.delay_d <= 0:
            raise ValueError(f"delay_d must be positive, got {self.delay_d}")


@dataclass(frozen=True)
class EventTimeScenario:
    """Generating exponential intensities per arm."""

    true_intensities: tuple[float, ...]
    analysis_horizon: float
    label: str = ""

    def __post_init__(self):
        if len(self.true_intensities) < 2:
            raise ValueError("need a control and at least one experimental arm")
        for th in self.true_intensities:
            if th <= 0:
                raise ValueError(f"intensities must be positive, got {th}")
        if self.analysis_horizon <= 0:
            raise ValueError("analysis_horizon must be positive")

    @property
    def num_arms(self) -> int:
        return len(self.true_intensities)


class VaccineDecision(Enum):
    CONTINUE_TRIAL = "continue"
    DECLARE_SUCCESS = "success"
    DECLARE_FUTILITY = "futility"


def simulate_arrivals(process: ArrivalProcess, seed: int) -> np.ndarray:
    """Strictly increasing Poisson arrival times on (0, horizon]."""
    stream = CounterStream(stream_key(seed, StreamTag.ARRIVALS))
    times: list[float] = []
    t = 0.0
    idx = 1
    chunk = max(64, int(2 * process.rate * process.horizon / 8) + 8)
    while t <= process.horizon:
        u = stream.uniforms(np.arange(idx, idx + chunk))
        gaps = -np.log1p(-u) / process.rate
        for g in gaps:
            t += g
            if t > process.horizon:
                break
            times.append(t)
        idx += chunk
    return np.asarray(times)


def vaccine_stop_check(control: GammaPosterior, vaccine: GammaPosterior,
                       ve_star: float, epsilon1: float) -> VaccineDecision:
    """Open-book efficacy monitoring decision at one data state."""
    if not 0.0 < epsilon1 < 0.5:
        raise ValueError(f"epsilon1 must be in (0, 0.5), got {epsilon1}")
    p = post_ops.prob_vaccine_efficacy(control, vaccine, ve_star).value
    if p > 1.0 - epsilon1:
        return VaccineDecision.DECLARE_SUCCESS
    if p < epsilon1:
        return VaccineDecision.DECLARE_FUTILITY
    return VaccineDecision.CONTINUE_TRIAL


def _gamma_joint_probs(posteriors: dict[int, GammaPosterior], cand: set[int],
                       params: DesignParams, est: EstimatorConfig) -> ComparativeProbs:
    """Hazard-scale rule inputs: smaller intensity is better, the control
    is protected by the ratio margin rho."""
    m = len(posteriors)
    p_best = {k: 0.0 for k in range(m)}
    use_mc = est.method == "monte_carlo" or len(cand) > 2
    if use_mc:
        arms = sorted(posteriors)
        matrix = post_ops._mc_gamma_matrix(posteriors, arms, est.generator(), est.draws)
        col = {k: j for j, k in enumerate(arms)}
        cand_cols = [col[k] for k in sorted(cand)]
        sub = matrix[:, cand_cols]
        counts = np.bincount(np.argmin(sub, axis=1), minlength=len(cand_cols))
        for j, k in enumerate(sorted(cand)):
            p_best[k] = counts[j] / est.draws
        p_ctrl = (float(np.mean(params.rho * matrix[:, col[0]] <= sub.min(axis=1)))
                  if 0 in cand else None)
    else:
        cs = sorted(cand)
        if len(cs) == 1:
            p_best[cs[0]] = 1.0
        else:
            lo, hi = cs
            p = post_ops.gamma_prob_less_scaled(posteriors[lo], posteriors[hi], 1.0)
            p_best[lo], p_best[hi] = p, 1.0 - p
        p_ctrl = None
        if 0 in cand:
            others = sorted(cand - {0})
            if not others:
                p_ctrl = 1.0
            else:
                p_ctrl = 1.0 - post_ops.gamma_prob_less_scaled(
                    posteriors[others[0]], posteriors[0], params.rho)
    p_mrt = p_ctrl_mrt = None
    if params.policy == "rule2" and params.epsilon1 > 0.0:
        p_mrt = {k: post_ops.prob_below(posteriors[k], params.theta_high).value
                 for k in sorted(cand - {0})}
        if 0 in cand:
            # eta-scale analogue of the control's MRT branch
            p_ctrl_mrt = post_ops.prob_below(
                GammaPosterior(posteriors[0].shape, posteriors[0].rate / params.rho),
                params.theta_high).value
    return ComparativeProbs(p_best, p_ctrl, p_mrt, p_ctrl_mrt)


class _ContinuousRun:
    """Shared skeleton: arrival-driven assignment over the block list."""

    def __init__(self, num_arms: int, priors, params: DesignParams, n_max: int,
                 seed: int, estimator: EstimatorConfig | None):
        if n_max < 1:
            raise ValueError(f"n_max must be >= 1, got {n_max}")
        params.validate(num_arms)
        if len(priors) != num_arms:
            raise ValueError("one prior pair per arm required")
        self.m = num_arms
        self.priors = tuple((float(a), float(b)) for a, b in priors)
        self.params = params
        self.n_max = n_max
        self.est = EstimatorConfig(
            method=estimator.method if estimator else "auto",
            draws=estimator.draws if estimator else 16384,
            quadrature_nodes=estimator.quadrature_nodes if estimator else 128,
            rng=mc_generator(seed),
        )
        self.rlist = RandomizationList(_substream_seed(seed, StreamTag.BLOCKS), num_arms)
        self.outcome_stream = CounterStream(stream_key(seed, StreamTag.OUTCOMES))
        self.n = 0
        self.statuses = np.full(num_arms, ArmStatus.ACTIVE, dtype=np.int8)
        self.active_set = set(range(num_arms))
        self.drop_records: list[DropRecord] = []
        self.probs: ComparativeProbs | None = None

    def assign(self, i: int) -> tuple[int, int]:
        statuses = self.statuses
        if i <= self.params.burn_in:
            statuses = np.full(self.m, ArmStatus.ACTIVE, dtype=np.int8)
        n, arm = next_assignment(self.rlist, self.n + 1, statuses)
        self.n = n
        return n, arm

    def in_t_vec(self) -> np.ndarray:
        return np.array([1 if k in self.active_set else 0 for k in range(self.m)],
                        dtype=np.int8)

    def update_policy(self, probs: ComparativeProbs, patients: int) -> list[DropRecord]:
        self.probs = probs
        params = self.params
        new_drops: list[DropRecord] = []
        if params.policy == "rule1":
            self.statuses = rule1_update(probs, self.m, params.epsilon)
        elif params.policy == "rule2":
            self.statuses, self.active_set, new_drops = rule2_update(
                probs, self.statuses, self.active_set, params, self.n, patients)
            self.drop_records.extend(new_drops)
        return new_drops

    def selection_done(self) -> str | None:
        if self.params.policy != "rule2":
            return None
        if len(self.active_set) == 0:
            return "futility"
        if len(self.active_set) == 1:
            return "single_survivor"
        return None


def run_delayed_trial(scenario: ScenarioQ, arrivals: np.ndarray,
                      config: DelayedOutcomeConfig, priors, params: DesignParams,
                      n_max: int, seed: int,
                      estimator: EstimatorConfig | None = None) -> TrialTrace:
    """Bernoulli outcomes measured a fixed lag after treatment.

    At the arrival of patient i only outcomes with U_j < U_i - d are
    visible; all newly matured outcomes are absorbed in one batch, the
    policy is re-evaluated, and patient i is then assigned. A patient's
    trace row is finalized by the policy update that absorbed their
    outcome, so in the d -> 0+ limit the trace coincides with the
    instantaneous engine's. After the last assignment a terminal update
    at U_last + d absorbs the remaining outcomes.
    """
    run = _ContinuousRun(scenario.num_arms, priors, params, n_max, seed, estimator)
    m = scenario.num_arms
    d = config.delay_d
    trace = TrialTrace(m)
    successes = np.zeros(m, dtype=np.int64)
    failures = np.zeros(m, dtype=np.int64)
    assigned: list[tuple[float, int, int, int]] = []  # (U_j, j, arm, y)
    pending_rows: list[dict] = []
    absorbed = 0

    def posteriors():
        return {k: post_ops.BetaPosterior(run.priors[k][0] + int(successes[k]),
                                          run.priors[k][1] + int(failures[k]))
                for k in range(m)}

    def beta_probs(cand: set[int]) -> ComparativeProbs:
        posts = posteriors()
        p_best = {k: 0.0 for k in range(m)}
        use_mc = run.est.method == "monte_carlo" or len(cand) > 2
        if use_mc:
            arms = sorted(posts)
            matrix = post_ops._mc_beta_matrix(posts, arms, run.est.generator(),
                                              run.est.draws)
            best, ctrl = post_ops.mc_state_probs(matrix, arms, cand, params.delta)
            p_best.update(best)
            p_ctrl = ctrl if 0 in cand else None
        else:
            cs = sorted(cand)
            if len(cs) == 1:
                p_best[cs[0]] = 1.0
            else:
                lo, hi = cs
                q = post_ops.pairwise_prob(posts[hi], posts[lo], 0.0,
                                           run.est.quadrature_nodes).value
                p_best[hi], p_best[lo] = q, 1.0 - q
            p_ctrl = None
            if 0 in cand:
                others = sorted(cand - {0})
                p_ctrl = 1.0 if not others else post_ops.pairwise_prob(
                    posts[0], posts[others[0]], params.delta,
                    run.est.quadrature_nodes).value
        p_mrt = p_ctrl_mrt = None
        if params.policy == "rule2" and params.epsilon1 > 0.0:
            p_mrt = {k: post_ops.prob_exceeds(posts[k], params.theta_low).value
                     for k in sorted(cand - {0})}
            if 0 in cand:
                p_ctrl_mrt = post_ops.prob_exceeds(
                    posts[0], max(params.theta_low - params.delta, 0.0)).value
        return ComparativeProbs(p_best, p_ctrl, p_mrt, p_ctrl_mrt)

    def absorb_and_update(t: float, i_next: int) -> None:
        nonlocal absorbed
        newly = []
        while absorbed < len(assigned) and assigned[absorbed][0] < t - d:
            newly.append(assigned[absorbed])
            absorbed += 1
        for _, _, arm, y in newly:
            if y:
                successes[arm] += 1
            else:
                failures[arm] += 1
        evaluate = (params.policy in ("rule1", "rule2", "thompson")
                    and i_next > params.burn_in)
        if evaluate:
            probs = beta_probs(set(run.active_set) if params.policy == "rule2"
                               else set(range(m)))
            run.update_policy(probs, patients=len(assigned))
        flush_rows(evaluate)

    def flush_rows(evaluated: bool) -> None:
        posts = posteriors()
        probs = run.probs
        while pending_rows and pending_rows[0]["j"] <= absorbed:
            row = pending_rows.pop(0)
            p_best_vec = (np.array([probs.p_best.get(k, 0.0) for k in range(m)])
                          if probs is not None and evaluated else np.full(m, np.nan))
            p_ctrl = probs.p_control_margin if probs is not None and evaluated else None
            trace.add_row(row["j"], row["n"], row["arm"], row["y"], run.statuses,
                          [posts[k].alpha for k in range(m)],
                          [posts[k].beta for k in range(m)],
                          p_ctrl, p_best_vec, run.in_t_vec(), t=row["u"])

    reason = "horizon_exhausted"
    for j, u_j in enumerate(arrivals, start=1):
        if j > n_max:
            reason = "reached_n_max"
            break
        absorb_and_update(u_j, i_next=j)
        done = run.selection_done()
        if done:
            reason = done
            break
        n_assigned, arm = run.assign(j)
        u = run.outcome_stream.uniform(j)
        y = 1 if u < scenario.true_thetas[arm] else 0
        assigned.append((u_j, j, arm, y))
        pending_rows.append({"j": j, "n": n_assigned, "arm": arm, "y": y, "u": u_j})
    else:
        if len(arrivals) >= n_max:
            reason = "reached_n_max"

    if assigned:
        # terminal update once every outcome has matured
        absorb_and_update(np.inf, i_next=len(assigned) + 1)
    trace.reason = reason
    trace.final_active_set = set(run.active_set)
    trace.drop_records = list(run.drop_records)
    return trace


def run_tte_trial(scenario: EventTimeScenario, arrivals: np.ndarray, priors,
                  params: DesignParams, n_max: int, seed: int,
                  estimator: EstimatorConfig | None = None) -> TrialTrace:
    """Right-censored exponential outcomes with Gamma posteriors.

    Event times are drawn at assignment; at each arrival the per-arm
    event counts and total time on test determine the Gamma posteriors,
    and the selection logic runs on the intensity scale (smaller is
    better, margin rho protecting the control, futility bound
    theta_high). Trace rows snapshot the state at assignment; a terminal
    evaluation at the analysis horizon closes the trial.
    """
    run = _ContinuousRun(scenario.num_arms, priors, params, n_max, seed, estimator)
    m = scenario.num_arms
    trace = TrialTrace(m)
    arms_assigned: list[int] = []
    u_times: list[float] = []
    x_times: list[float] = []

    def stats_at(t: float) -> tuple[np.ndarray, np.ndarray]:
        events = np.zeros(m, dtype=np.int64)
        ttt = np.zeros(m)
        for arm, u0, x in zip(arms_assigned, u_times, x_times):
            expo = min(x, t - u0)
            if expo < 0:
                continue
            ttt[arm] += expo
            if u0 + x <= t:
                events[arm] += 1
        return events, ttt

    def posteriors_at(t: float):
        events, ttt = stats_at(t)
        posts = {k: GammaPosterior(run.priors[k][0] + int(events[k]),
                                   run.priors[k][1] + float(ttt[k]))
                 for k in range(m)}
        return posts, events, ttt

    reason = "horizon_exhausted"
    for j, u_j in enumerate(arrivals, start=1):
        if j > n_max:
            reason = "reached_n_max"
            break
        posts, events, ttt = posteriors_at(u_j)
        evaluate = (params.policy in ("rule1", "rule2") and j > params.burn_in)
        if evaluate:
            cand = set(run.active_set) if params.policy == "rule2" else set(range(m))
            probs = _gamma_joint_probs(posts, cand, params, run.est)
            run.update_policy(probs, patients=len(arms_assigned))
        done = run.selection_done()
        if done:
            reason = done
            break
        n_assigned, arm = run.assign(j)
        u = run.outcome_stream.uniform(j)
        x = -np.log1p(-u) / scenario.true_intensities[arm]
        arms_assigned.append(arm)
        u_times.append(float(u_j))
        x_times.append(float(x))
        p_best_vec = (np.array([run.probs.p_best.get(k, 0.0) for k in range(m)])
                      if evaluate else np.full(m, np.nan))
        p_ctrl = run.probs.p_control_margin if evaluate else None
        trace.add_row(j, n_assigned, arm, float(x), run.statuses,
                      [posts[k].shape for k in range(m)],
                      [posts[k].rate for k in range(m)],
                      p_ctrl, p_best_vec, run.in_t_vec(), t=float(u_j),
                      events=events.astype(float), ttt=ttt.copy())
    else:
        if len(arrivals) >= n_max:
            reason = "reached_n_max"

    # terminal evaluation on the data visible at the analysis horizon
    posts, events, ttt = posteriors_at(scenario.analysis_horizon)
    if (params.policy in ("rule1", "rule2")
            and reason not in ("futility", "single_survivor")
            and len(arms_assigned) > params.burn_in):
        cand = set(run.active_set) if params.policy == "rule2" else set(range(m))
        probs = _gamma_joint_probs(posts, cand, params, run.est)
        run.update_policy(probs, patients=len(arms_assigned))
        done = run.selection_done()
        if done:
            reason = done
    trace.reason = reason
    trace.final_active_set = set(run.active_set)
    trace.drop_records = list(run.drop_records)
    trace.terminal_extra = {"final_events": events.copy(), "final_ttt": ttt.copy()}
    return trace


@dataclass
class VaccineOutcome:
    decision: VaccineDecision
    stop_time: float
    patients: int
    events_control: int
    events_vaccine: int
    prob_ve: float


def run_vaccine_monitoring(control_intensity: float, vaccine_intensity: float,
                           arrivals: np.ndarray, priors, ve_star: float,
                           epsilon1: float, horizon: float, seed: int) -> VaccineOutcome:
    """Two-arm vaccine trial under open-book efficacy monitoring.

    Block allocation (no adaptive assignment); the stopping criterion is
    checked at every arrival and at every event maturity time.
    """
    rlist = RandomizationList(_substream_seed(seed, StreamTag.BLOCKS), 2)
    outcome_stream = CounterStream(stream_key(seed, StreamTag.OUTCOMES))
    rates = (control_intensity, vaccine_intensity)
    statuses = np.zeros(2, dtype=np.int8)

    assigned: list[tuple[float, int, float]] = []  # (U, arm, X)
    n = 0
    for j, u_j in enumerate(arrivals, start=1):
        n, arm = next_assignment(rlist, n + 1, statuses)
        u = outcome_stream.uniform(j)
        x = -np.log1p(-u) / rates[arm]
        assigned.append((float(u_j), arm, float(x)))

    check_times = sorted({u for u, _, _ in assigned}
                         | {u + x for u, arm, x in assigned if u + x <= horizon})

    def posterior_at(t):
        shapes = [priors[k][0] for k in range(2)]
        rate_par = [priors[k][1] for k in range(2)]
        ev = [0, 0]
        for u0, arm, x in assigned:
            expo = min(x, t - u0)
            if expo < 0:
                continue
            rate_par[arm] += expo
            if u0 + x <= t:
                shapes[arm] += 1
                ev[arm] += 1
        return (GammaPosterior(shapes[0], rate_par[0]),
                GammaPosterior(shapes[1], rate_par[1]), ev)

    for t in check_times:
        ctrl_post, vac_post, ev = posterior_at(t)
        decision = vaccine_stop_check(ctrl_post, vac_post, ve_star, epsilon1)
        if decision is not VaccineDecision.CONTINUE_TRIAL:
            p = post_ops.prob_vaccine_efficacy(ctrl_post, vac_post, ve_star).value
            treated = sum(1 for u0, _, _ in assigned if u0 <= t)
            return VaccineOutcome(decision, t, treated, ev[0], ev[1], p)
    ctrl_post, vac_post, ev = posterior_at(horizon)
    p = post_ops.prob_vaccine_efficacy(ctrl_post, vac_post, ve_star).value
    return VaccineOutcome(VaccineDecision.CONTINUE_TRIAL, horizon, len(assigned),
                          ev[0], ev[1], p)
