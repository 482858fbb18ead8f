"""Lockstep vectorized Bernoulli engine for the replication harness.

All replicates of one (design, scenario) cell advance patient by patient
together, sharing vectorized numerics. Streams are identical to the
reference engine in :mod:`adaptrial.trial` (same keys, same consumption
order), so a lockstep run and a loop of ``run_trial`` produce the same
assignments, outcomes and statuses; the test suite asserts this.

Two-arm comparative probabilities are maintained incrementally: the Beta
CDF values at the fixed quadrature nodes obey
I_x(a+1, b) = I_x(a, b) - x^a (1-x)^b / (a B(a, b)) and the analogous
identity in b, so each observed outcome updates one arm's node vector in
O(nodes) instead of re-evaluating the incomplete Beta function. The
incremental values are cross-checked against direct quadrature at every
analysis checkpoint.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import betainc, betaln, gammaln

from .allocation import ArmStatus, DeadlockError, DesignParams
from .posterior import beta_pairwise_values
from .randomization import RandomizationList
from .rngstream import (StreamTag, mc_generator, philox4x64, replicate_seed,
                        stream_key, to_uniform)
from .trial import ScenarioQ, _substream_seed

BLOCK_REPS = 256  # fixed worker block size; independent of thread count

REASON_RUNNING = 0
REASON_N_MAX = 1
REASON_FUTILITY = 2
REASON_SINGLE_SURVIVOR = 3
REASON_CONTROL_DROPPED = 4
REASON_LABELS = {REASON_N_MAX: "reached_n_max", REASON_FUTILITY: "futility",
                 REASON_SINGLE_SURVIVOR: "single_survivor",
                 REASON_CONTROL_DROPPED: "control_dropped"}


@dataclass(frozen=True)
class CellSpec:
    """Everything a worker needs to run one cell's replicate block."""

    design: DesignParams
    scenario: ScenarioQ
    priors: tuple[tuple[float, float], ...]
    n_max: int
    analysis_points: tuple[int, ...]
    estimator_method: str
    estimator_draws: int
    quadrature_nodes: int
    master_seed: int
    design_index: int
    scenario_index: int

    @property
    def num_arms(self) -> int:
        return self.scenario.num_arms


@dataclass
class Checkpoint:
    """Per-replicate snapshot at one analysis point i."""

    n_arm: np.ndarray          # (R, m) patients per arm
    s_total: np.ndarray        # (R,) total successes
    alphas: np.ndarray         # (R, m) posterior parameters
    betas: np.ndarray
    p_pos: np.ndarray | None   # (R,) P(th0 + delta0 >= th1), two-arm cells
    p_neg: np.ndarray | None   # (R,) P(th1 >= th0)


@dataclass
class BlockResult:
    rep_start: int
    rep_stop: int
    checkpoints: dict[int, Checkpoint]
    band_events: tuple[str, ...]
    band_counts: np.ndarray | None   # (n_max, n_events) int64
    postmean_sum: np.ndarray         # (n_max, m) float64
    drop_n: np.ndarray               # (R, m) list index of drop, -1 if never
    drop_i: np.ndarray               # (R, m) patient count at drop, -1 if never
    reasons: np.ndarray              # (R,) terminal reason codes


def band_family(params: DesignParams, num_arms: int) -> tuple[str, tuple[str, ...]]:
    """Which mutually exclusive event family this cell's bands track."""
    if params.policy == "rule1" and num_arms == 2:
        return "joint_status", ("both_active", "experimental_dormant",
                                "control_dormant", "both_dormant")
    if params.policy == "rule2" and num_arms == 2:
        return "dropped_status", ("none_dropped", "control_dropped",
                                  "experimental_dropped")
    if params.policy in ("rule1", "rule2") and num_arms > 2:
        events = tuple(f"arm{k}_maximal_control_out" for k in range(1, num_arms))
        return "maximal", events + ("control_in",)
    return "none", ()


class _QuadState:
    """Incremental two-arm integrals q0 = P(th1 >= th0), qd = P(th0 + d >= th1)."""

    def __init__(self, n_rep: int, priors, delta: float, nodes: int, with_margin: bool):
        from scipy.special import roots_legendre
        x, w = roots_legendre(nodes)
        self.delta = delta
        self.with_margin = with_margin
        (a0, b0), (a1, b1) = priors
        # A-rule on (0,1): q0 = sum wA * f1(tA) * F0(tA)
        self.tA = (x + 1.0) / 2.0
        self.wA = w / 2.0
        self.lxA, self.lyA = np.log(self.tA), np.log1p(-self.tA)
        self.F0A = np.broadcast_to(betainc(a0, b0, self.tA), (n_rep, nodes)).copy()
        self.f1A = np.broadcast_to(
            np.exp((a1 - 1) * self.lxA + (b1 - 1) * self.lyA - betaln(a1, b1)),
            (n_rep, nodes)).copy()
        if with_margin:
            # B-rule on (0, 1-d): qd = sum wB * f0(tB) * F1(tB + d) + 1 - F0(1-d)
            hi = 1.0 - delta
            self.tB = hi * (x + 1.0) / 2.0
            self.wB = w * hi / 2.0
            self.lxB, self.lyB = np.log(self.tB), np.log1p(-self.tB)
            xBd = self.tB + delta
            self.lxBd, self.lyBd = np.log(xBd), np.log1p(-xBd)
            self.ltail_x = np.log(hi) if hi > 0 else -np.inf
            self.ltail_y = np.log1p(-hi) if hi < 1 else -np.inf
            self.F1Bd = np.broadcast_to(betainc(a1, b1, xBd), (n_rep, nodes)).copy()
            self.f0B = np.broadcast_to(
                np.exp((a0 - 1) * self.lxB + (b0 - 1) * self.lyB - betaln(a0, b0)),
                (n_rep, nodes)).copy()
            self.F0tail = np.full(n_rep, betainc(a0, b0, hi))

    @staticmethod
    def _delta_term(a, b, lx, ly, success: bool):
        # I_x(a+1,b) = I_x - x^a(1-x)^b/(a B); I_x(a,b+1) = I_x + x^a(1-x)^b/(b B)
        a = a[:, None] if np.ndim(lx) else a
        b = b[:, None] if np.ndim(lx) else b
        denom = np.log(a if success else b)
        lb = gammaln(a) + gammaln(b) - gammaln(a + b)
        return np.exp(a * lx + b * ly - denom - lb)

    def update_arm0(self, rows, a_old, b_old, success: np.ndarray):
        """Arm-0 count increment: update F0 node vectors before the counts move."""
        for mask, succ in ((success, True), (~success, False)):
            r = rows[mask]
            if r.size == 0:
                continue
            a, b = a_old[mask], b_old[mask]
            sgn = -1.0 if succ else 1.0
            self.F0A[r] += sgn * self._delta_term(a, b, self.lxA, self.lyA, succ)
            if self.with_margin:
                t = self._delta_term(a, b, self.ltail_x, self.ltail_y, succ)
                self.F0tail[r] += sgn * t

    def update_arm1(self, rows, a_old, b_old, success: np.ndarray):
        if not self.with_margin:
            return
        for mask, succ in ((success, True), (~success, False)):
            r = rows[mask]
            if r.size == 0:
                continue
            a, b = a_old[mask], b_old[mask]
            sgn = -1.0 if succ else 1.0
            self.F1Bd[r] += sgn * self._delta_term(a, b, self.lxBd, self.lyBd, succ)

    def refresh_pdfs(self, rows0, a0, b0, rows1, a1, b1):
        """Recompute density node vectors for rows whose parameters changed."""
        if rows1.size:
            self.f1A[rows1] = np.exp((a1[:, None] - 1) * self.lxA
                                     + (b1[:, None] - 1) * self.lyA
                                     - (gammaln(a1) + gammaln(b1) - gammaln(a1 + b1))[:, None])
        if self.with_margin and rows0.size:
            self.f0B[rows0] = np.exp((a0[:, None] - 1) * self.lxB
                                     + (b0[:, None] - 1) * self.lyB
                                     - (gammaln(a0) + gammaln(b0) - gammaln(a0 + b0))[:, None])

    def q0(self, rows) -> np.ndarray:
        return np.clip((self.f1A[rows] * self.F0A[rows]) @ self.wA, 0.0, 1.0)

    def qd(self, rows) -> np.ndarray:
        val = (self.f0B[rows] * self.F1Bd[rows]) @ self.wB + 1.0 - self.F0tail[rows]
        return np.clip(val, 0.0, 1.0)


def _counter_uniforms(seeds: list[int], n_max: int, tag: StreamTag) -> np.ndarray:
    keys = np.array([stream_key(s, tag) for s in seeds], dtype=np.uint64)
    idx = np.arange(1, n_max + 1, dtype=np.uint64)
    w0, _, _, _ = philox4x64(idx[None, :], 0, 0, 0,
                             keys[:, 0][:, None], keys[:, 1][:, None])
    return to_uniform(w0)


def run_block(spec: CellSpec, rep_start: int, rep_stop: int) -> BlockResult:
    """Run replicates [rep_start, rep_stop) of one cell in lockstep."""
    params = spec.design
    scenario = spec.scenario
    m = spec.num_arms
    n_max = spec.n_max
    with warnings.catch_warnings():
        # configuration flags were already raised when the cell was built
        warnings.simplefilter("ignore", UserWarning)
        params.validate(m)
    R = rep_stop - rep_start
    theta = np.asarray(scenario.true_thetas)
    analysis_points = tuple(sorted(set(spec.analysis_points)))

    seeds = [replicate_seed(spec.master_seed, spec.design_index, spec.scenario_index, r)
             for r in range(rep_start, rep_stop)]
    U = _counter_uniforms(seeds, n_max, StreamTag.OUTCOMES)
    policy = params.policy
    needs_list = policy != "thompson" or params.burn_in > 0
    arms_seq = None
    if needs_list:
        span = m * (n_max + 4)  # covers the walk's 2m look-ahead at the last patient
        arms_seq = np.empty((R, span), dtype=np.int8)
        for j, s in enumerate(seeds):
            rl = RandomizationList(_substream_seed(s, StreamTag.BLOCKS), m)
            arms_seq[j] = rl.arms_upto(span)
    UT = _counter_uniforms(seeds, n_max, StreamTag.THOMPSON) if policy == "thompson" else None

    prior_a = np.array([p[0] for p in spec.priors])
    prior_b = np.array([p[1] for p in spec.priors])
    S = np.zeros((R, m), dtype=np.int64)
    F = np.zeros((R, m), dtype=np.int64)
    statuses = np.full((R, m), ArmStatus.ACTIVE, dtype=np.int8)
    in_t = np.ones((R, m), dtype=bool)
    n_pos = np.zeros(R, dtype=np.int64)
    alive = np.ones(R, dtype=bool)
    reasons = np.zeros(R, dtype=np.int8)
    drop_n = np.full((R, m), -1, dtype=np.int64)
    drop_i = np.full((R, m), -1, dtype=np.int64)
    n_arm = np.zeros((R, m), dtype=np.int64)
    s_total = np.zeros(R, dtype=np.int64)
    p_best = np.full((R, m), np.nan)
    p_ctrl = np.full(R, np.nan)

    adaptive = policy in ("rule1", "rule2", "thompson")
    use_mc = adaptive and (spec.estimator_method == "monte_carlo"
                           or (m > 2 and spec.estimator_method in ("auto", "quadrature")))
    quad = None
    if adaptive and not use_mc and m == 2:
        quad = _QuadState(R, spec.priors, params.delta, spec.quadrature_nodes,
                          with_margin=policy != "thompson")
    mc_gens = [mc_generator(s) for s in seeds] if use_mc else None
    mrt_needed = policy == "rule2" and params.epsilon1 > 0.0

    family, events = band_family(params, m)
    per_step_bands = family in ("joint_status", "maximal")
    band_counts = (np.zeros((n_max, len(events)), dtype=np.int64)
                   if family != "none" else None)
    postmean_sum = np.zeros((n_max, m))
    checkpoints: dict[int, Checkpoint] = {}

    if policy == "thompson" and params.burn_in == 0:
        _evaluate(np.arange(R), spec, params, quad, mc_gens, prior_a, prior_b,
                  S, F, in_t, p_best, p_ctrl, mrt_needed)

    for i in range(1, n_max + 1):
        rows = np.flatnonzero(alive)
        if rows.size:
            burn = i <= params.burn_in
            if policy == "thompson" and not burn:
                w = p_best[rows] ** params.kappa
                w /= w.sum(axis=1, keepdims=True)
                cum = np.cumsum(w, axis=1)
                u = UT[rows, i - 1]
                arm = np.minimum((cum <= u[:, None]).sum(axis=1), m - 1)
                n_pos[rows] += 1
            else:
                eff = (np.zeros((rows.size, m), dtype=np.int8) if burn or policy == "fixed_block"
                       else statuses[rows])
                pos = n_pos[rows] + 1
                arm = arms_seq[rows, pos - 1]
                for _ in range(2 * m):
                    bad = eff[np.arange(rows.size), arm] != ArmStatus.ACTIVE
                    if not bad.any():
                        break
                    pos[bad] += 1
                    arm = arms_seq[rows, pos - 1]
                else:
                    if (eff[np.arange(rows.size), arm] != ArmStatus.ACTIVE).any():
                        raise DeadlockError(f"no Active arm at patient {i}")
                n_pos[rows] = pos

            y = U[rows, i - 1] < theta[arm]

            if quad is not None:
                a_all = prior_a[None, :] + S[rows]
                b_all = prior_b[None, :] + F[rows]
                sel0, sel1 = arm == 0, arm == 1
                quad.update_arm0(rows[sel0], a_all[sel0, 0], b_all[sel0, 0], y[sel0])
                quad.update_arm1(rows[sel1], a_all[sel1, 1], b_all[sel1, 1], y[sel1])

            S[rows, arm] += y
            F[rows, arm] += ~y
            n_arm[rows, arm] += 1
            s_total[rows] += y

            if quad is not None:
                a_new = prior_a[None, :] + S[rows]
                b_new = prior_b[None, :] + F[rows]
                sel0, sel1 = arm == 0, arm == 1
                quad.refresh_pdfs(rows[sel0], a_new[sel0, 0], b_new[sel0, 0],
                                  rows[sel1], a_new[sel1, 1], b_new[sel1, 1])

            evaluate = (adaptive and i >= params.burn_in
                        and (i - params.burn_in) % params.eval_interval == 0)
            if evaluate:
                _evaluate(rows, spec, params, quad, mc_gens, prior_a, prior_b,
                          S, F, in_t, p_best, p_ctrl, mrt_needed)
                if policy == "rule1":
                    statuses[rows] = ArmStatus.ACTIVE
                    for k in range(1, m):
                        statuses[rows[p_best[rows, k] < params.epsilon], k] = ArmStatus.DORMANT
                    statuses[rows[p_ctrl[rows] < params.epsilon], 0] = ArmStatus.DORMANT
                elif policy == "rule2":
                    _rule2_vec(rows, params, prior_a, prior_b, S, F, statuses, in_t,
                               p_best, p_ctrl, drop_n, drop_i, n_pos, i, mrt_needed)
                    n_left = in_t[rows].sum(axis=1)
                    done = n_left <= 1
                    if not params.continue_after_control_drop:
                        done |= (~in_t[rows, 0]) & (drop_i[rows, 0] == i)
                    if done.any():
                        dr = rows[done]
                        empty = in_t[dr].sum(axis=1) == 0
                        reasons[dr[empty]] = REASON_FUTILITY
                        single = in_t[dr].sum(axis=1) == 1
                        reasons[dr[single]] = REASON_SINGLE_SURVIVOR
                        other = ~(empty | single)
                        reasons[dr[other]] = REASON_CONTROL_DROPPED
                        alive[dr] = False

        # aggregates over the whole block (terminated replicates stay frozen)
        a_cur = prior_a[None, :] + S
        b_cur = prior_b[None, :] + F
        postmean_sum[i - 1] = (a_cur / (a_cur + b_cur)).sum(axis=0)
        if per_step_bands:
            band_counts[i - 1] = _band_step(family, m, policy, statuses, p_best, drop_i)
        if i in analysis_points:
            checkpoints[i] = _checkpoint(spec, a_cur, b_cur, n_arm, s_total, quad, params)

        if i >= n_max:
            reasons[reasons == REASON_RUNNING] = REASON_N_MAX
            alive[:] = False

    if family == "dropped_status":
        band_counts = _dropped_bands(drop_i, n_max, m)

    return BlockResult(rep_start, rep_stop, checkpoints, events, band_counts,
                       postmean_sum, drop_n, drop_i, reasons)


def _evaluate(rows, spec, params, quad, mc_gens, prior_a, prior_b, S, F, in_t,
              p_best, p_ctrl, mrt_needed):
    m = spec.num_arms
    if quad is not None:
        q0 = quad.q0(rows)
        p_best[rows, 1] = q0
        p_best[rows, 0] = 1.0 - q0
        if quad.with_margin:
            p_ctrl[rows] = quad.qd(rows)
        return
    draws = spec.estimator_draws
    need_ctrl = params.policy != "thompson"
    force_mc = spec.estimator_method == "monte_carlo"
    pair_rows = []
    for r in rows:
        if params.policy == "rule2":
            cand = np.flatnonzero(in_t[r])
        else:
            cand = np.arange(m)
        if cand.size <= 2 and not force_mc:
            # auto estimator: two surviving arms go through the quadrature
            # oracle, like the reference engine (no MC draws consumed)
            pair_rows.append((r, cand))
            continue
        a = prior_a + S[r]
        b = prior_b + F[r]
        mat = mc_gens[r].beta(a, b, size=(draws, m))
        sub = mat[:, cand]
        counts = np.bincount(np.argmax(sub, axis=1), minlength=cand.size)
        p_best[r] = 0.0
        p_best[r, cand] = counts / draws
        if need_ctrl and in_t[r, 0]:
            p_ctrl[r] = np.mean(mat[:, 0] + params.delta >= sub.max(axis=1))
    for r, cand in pair_rows:
        a = prior_a + S[r]
        b = prior_b + F[r]
        p_best[r] = 0.0
        if cand.size == 1:
            p_best[r, cand[0]] = 1.0
        else:
            lo, hi = int(cand[0]), int(cand[1])
            q = float(beta_pairwise_values(a[hi], b[hi], a[lo], b[lo], 0.0,
                                           spec.quadrature_nodes))
            p_best[r, hi], p_best[r, lo] = q, 1.0 - q
        if need_ctrl and in_t[r, 0]:
            others = cand[cand != 0]
            if others.size == 0:
                p_ctrl[r] = 1.0
            else:
                j = int(others[0])
                p_ctrl[r] = float(beta_pairwise_values(a[0], b[0], a[j], b[j],
                                                       params.delta,
                                                       spec.quadrature_nodes))


def _rule2_vec(rows, params, prior_a, prior_b, S, F, statuses, in_t, p_best, p_ctrl,
               drop_n, drop_i, n_pos, i, mrt_needed):
    m = statuses.shape[1]
    e, e1, e2 = params.epsilon, params.epsilon1, params.epsilon2
    if mrt_needed:
        a = prior_a[None, :] + S[rows]
        b = prior_b[None, :] + F[rows]
        p_mrt = 1.0 - betainc(a, b, params.theta_low)
        p_ctrl_mrt = 1.0 - betainc(a[:, 0], b[:, 0],
                                   max(params.theta_low - params.delta, 0.0))
    for k in range(1, m):
        member = in_t[rows, k]
        pb = p_best[rows, k]
        drop = member & (pb < e2)
        if mrt_needed:
            drop |= member & (p_mrt[:, k] < e1)
        dr = rows[drop]
        statuses[dr, k] = ArmStatus.DROPPED
        in_t[dr, k] = False
        drop_n[dr, k] = n_pos[dr]
        drop_i[dr, k] = i
        dormant = member & ~drop & (pb < e)
        statuses[rows[dormant], k] = ArmStatus.DORMANT
        act = member & ~drop & ~dormant
        statuses[rows[act], k] = ArmStatus.ACTIVE
    member = in_t[rows, 0]
    pc = p_ctrl[rows]
    drop = member & (pc < e2)
    if mrt_needed:
        drop |= member & (p_ctrl_mrt < e1)
    dr = rows[drop]
    statuses[dr, 0] = ArmStatus.DROPPED
    in_t[dr, 0] = False
    drop_n[dr, 0] = n_pos[dr]
    drop_i[dr, 0] = i
    dormant = member & ~drop & (pc < e)
    statuses[rows[dormant], 0] = ArmStatus.DORMANT
    act = member & ~drop & ~dormant
    statuses[rows[act], 0] = ArmStatus.ACTIVE


def _band_step(family, m, policy, statuses, p_best, drop_i):
    if family == "joint_status":
        idx = ((statuses[:, 0] != ArmStatus.ACTIVE).astype(np.int64) * 2
               + (statuses[:, 1] != ArmStatus.ACTIVE))
        return np.bincount(idx, minlength=4)
    if family == "maximal":
        if np.isnan(p_best[:, 0]).any():
            # before the first evaluation every arm is active: control in
            out = np.zeros(m, dtype=np.int64)
            out[m - 1] = p_best.shape[0]
            return out
        # "k maximal at i": argmax of prob-best, ties to the smallest index;
        # control counts as out when dormant (allocation rule) or, under the
        # selection rule, once it has been dropped
        am = np.argmax(p_best, axis=1)
        if policy == "rule2":
            ctrl_in = drop_i[:, 0] < 0
        else:
            ctrl_in = statuses[:, 0] == ArmStatus.ACTIVE
        idx = np.where(ctrl_in, m - 1, am - 1)
        assert not np.any((~ctrl_in) & (am == 0)), "control cannot be maximal while out"
        return np.bincount(idx, minlength=m)
    raise ValueError(family)


def _dropped_bands(drop_i, n_max, m):
    grid = np.arange(1, n_max + 1)
    ctrl = drop_i[:, 0]
    exp_any = np.where((drop_i[:, 1:] >= 0).any(axis=1),
                       np.where(drop_i[:, 1:] >= 0, drop_i[:, 1:], np.iinfo(np.int64).max
                                ).min(axis=1), -1)
    counts = np.zeros((n_max, 3), dtype=np.int64)
    for j, i in enumerate(grid):
        c = (ctrl >= 0) & (ctrl <= i)
        e = (exp_any >= 0) & (exp_any <= i)
        counts[j, 1] = int(c.sum())
        counts[j, 2] = int(e.sum())
        counts[j, 0] = drop_i.shape[0] - counts[j, 1] - counts[j, 2]
    return counts


def _checkpoint(spec, a_cur, b_cur, n_arm, s_total, quad, params) -> Checkpoint:
    m = spec.num_arms
    p_pos = p_neg = None
    if m == 2:
        p_neg = beta_pairwise_values(a_cur[:, 1], b_cur[:, 1], a_cur[:, 0], b_cur[:, 0],
                                     0.0, spec.quadrature_nodes)
        p_pos = beta_pairwise_values(a_cur[:, 0], b_cur[:, 0], a_cur[:, 1], b_cur[:, 1],
                                     params.final_delta0, spec.quadrature_nodes)
        if quad is not None:
            q0 = quad.q0(np.arange(a_cur.shape[0]))
            if not np.allclose(q0, p_neg, atol=1e-8):
                raise RuntimeError(
                    "incremental quadrature drifted from direct evaluation "
                    f"(max diff {np.max(np.abs(q0 - p_neg)):.2e})")
    return Checkpoint(n_arm.copy(), s_total.copy(), a_cur.copy(), b_cur.copy(),
                      p_pos, p_neg)
