"""Acceptance suite: reproduces the published operating characteristics at
their stated tolerances and re-asserts the engine-level property battery.

Heavy experiment fixtures are session-scoped and disk-cached under
tests/.acceptance_cache keyed on their exact configuration (set
ADAPTRIAL_ACCEPTANCE_CACHE=0 to force fresh runs). One PASS/FAIL line is
printed per criterion and collected into acceptance_report.txt.
"""

import hashlib
import json
import os
import pickle
import time
from pathlib import Path

import numpy as np
import pytest

import adaptrial
from adaptrial.allocation import ArmStatus, ComparativeProbs, DesignParams, rule1_update, rule2_update
from adaptrial.analysis import run_experiment, run_tte_experiment
from adaptrial.continuous import ArrivalProcess, DelayedOutcomeConfig, EventTimeScenario, run_delayed_trial
from adaptrial.posterior import BetaPosterior, EstimatorConfig, prob_is_max_all, pairwise_prob
from adaptrial.rngstream import replicate_seed
from adaptrial.trial import ScenarioQ, run_trial

pytestmark = pytest.mark.acceptance

CACHE_DIR = Path(__file__).parent / ".acceptance_cache"
REPORT_PATH = Path(__file__).parents[1] / "acceptance_report.txt"
MASTER_SEED = 1

_report_lines = []


def check(name: str, value: float, target: float, tol: float):
    ok = abs(value - target) <= tol
    line = (f"ACCEPTANCE {'PASS' if ok else 'FAIL'} {name}: value={value:.4f} "
            f"target={target:.4g} tol={tol:.3g}")
    print(line)
    _report_lines.append(line)
    assert ok, line


def check_cond(name: str, ok: bool, detail: str = ""):
    line = f"ACCEPTANCE {'PASS' if ok else 'FAIL'} {name}{': ' + detail if detail else ''}"
    print(line)
    _report_lines.append(line)
    assert ok, line


@pytest.fixture(scope="session", autouse=True)
def write_report():
    yield
    if _report_lines:
        REPORT_PATH.write_text("\n".join(_report_lines) + "\n")


def _cached(key_obj, builder):
    if os.environ.get("ADAPTRIAL_ACCEPTANCE_CACHE", "1") == "0":
        return builder()
    CACHE_DIR.mkdir(exist_ok=True)
    key = hashlib.sha256(
        json.dumps([adaptrial.__version__, key_obj], sort_keys=True).encode()
    ).hexdigest()[:24]
    path = CACHE_DIR / f"{key}.pkl"
    if path.exists():
        with open(path, "rb") as fh:
            return pickle.load(fh)
    result = builder()
    with open(path, "wb") as fh:
        pickle.dump(result, fh)
    return result


def table1_designs():
    return [
        DesignParams(policy="rule1", label="a", epsilon=0.1, delta=0.1),
        DesignParams(policy="rule1", label="b", epsilon=0.05, delta=0.1),
        DesignParams(policy="rule1", label="c", epsilon=0.2, delta=0.05),
        DesignParams(policy="fixed_block", label="d"),
        DesignParams(policy="thompson", label="k25", kappa=0.25),
        DesignParams(policy="thompson", label="k50", kappa=0.5),
        DesignParams(policy="thompson", label="k75", kappa=0.75),
        DesignParams(policy="thompson", label="k100", kappa=1.0),
    ]


def build_exp1():
    """Experiment-1 grid: 8 designs x {null, alt}, R=5000, trials to 500,
    final analyses at 100/200/500 with the quadrature inner estimator."""
    scenarios = [ScenarioQ((0.3, 0.3), "null"), ScenarioQ((0.3, 0.5), "alt")]
    t0 = time.time()
    ocs = run_experiment(table1_designs(), scenarios, 5000, 500, MASTER_SEED,
                         analysis_points=(100, 200, 500))
    elapsed = time.time() - t0
    return ocs, elapsed, os.cpu_count() or 1


def build_exp1_burnin():
    designs = [DesignParams(policy="rule1", label=l, epsilon=e, delta=d, burn_in=30)
               for l, e, d in (("a", 0.1, 0.1), ("b", 0.05, 0.1), ("c", 0.2, 0.05))]
    scenarios = [ScenarioQ((0.3, 0.3), "null"), ScenarioQ((0.3, 0.5), "alt")]
    return run_experiment(designs, scenarios, 5000, 200, MASTER_SEED,
                          analysis_points=(200,))


def build_exp1_rule2():
    designs = [DesignParams(policy="rule2", label="a2", epsilon=0.1,
                            epsilon2=0.05, delta=0.1)]
    return run_experiment(designs, [ScenarioQ((0.3, 0.5), "alt")], 5000, 200,
                          MASTER_SEED, analysis_points=(200,))


def build_exp2():
    """Experiment-2: K=3, design (a), R=2000, trials to 500, Monte Carlo
    inner estimator with 2^14 joint draws."""
    designs = [DesignParams(policy="rule1", label="a", epsilon=0.1, delta=0.1)]
    scenarios = [ScenarioQ((0.3, 0.3, 0.3, 0.3), "null"),
                 ScenarioQ((0.3, 0.4, 0.5, 0.6), "alt")]
    return run_experiment(designs, scenarios, 2000, 500, MASTER_SEED,
                          analysis_points=(500,),
                          estimator_method="monte_carlo", estimator_draws=2**14)


EXP1_KEY = ["exp1", MASTER_SEED, 5000, 500]
EXP1_BURNIN_KEY = ["exp1_burnin", MASTER_SEED, 5000, 200, 30]
EXP1_RULE2_KEY = ["exp1_rule2", MASTER_SEED, 5000, 200]
EXP2_KEY = ["exp2", MASTER_SEED, 2000, 500, 2**14]


@pytest.fixture(scope="session")
def exp1():
    return _cached(EXP1_KEY, build_exp1)


@pytest.fixture(scope="session")
def exp1_burnin():
    return _cached(EXP1_BURNIN_KEY, build_exp1_burnin)


@pytest.fixture(scope="session")
def exp1_rule2():
    return _cached(EXP1_RULE2_KEY, build_exp1_rule2)


@pytest.fixture(scope="session")
def exp2():
    return _cached(EXP2_KEY, build_exp2)


# Table 1 anchors (N_max = 200): rows FP, TN, inc_null, TP, FN, inc_alt.
TABLE1 = {
    "a":    (0.014, 0.074, 0.912, 0.723, 0.002, 0.275),
    "b":    (0.009, 0.086, 0.906, 0.711, 0.001, 0.288),
    "c":    (0.014, 0.040, 0.946, 0.303, 0.000, 0.696),
    "d":    (0.007, 0.052, 0.941, 0.694, 0.000, 0.306),
    "k25":  (0.011, 0.054, 0.935, 0.665, 0.000, 0.335),
    "k50":  (0.014, 0.056, 0.929, 0.598, 0.000, 0.402),
    "k75":  (0.023, 0.073, 0.904, 0.516, 0.001, 0.483),
    "k100": (0.025, 0.074, 0.901, 0.443, 0.001, 0.555),
}


class TestTable1:
    def test_all_rates_within_tolerance(self, exp1):
        ocs, _, _ = exp1
        for label, anchors in TABLE1.items():
            null_rates = ocs[(label, "null")].verdict_rates[200]
            alt_rates = ocs[(label, "alt")].verdict_rates[200]
            got = (null_rates["positive"][0], null_rates["negative"][0],
                   null_rates["inconclusive"][0], alt_rates["positive"][0],
                   alt_rates["negative"][0], alt_rates["inconclusive"][0])
            names = ("FP", "TN", "inc_null", "TP", "FN", "inc_alt")
            for name, value, target in zip(names, got, anchors):
                check(f"table1[{label}].{name}", value, target, 0.02)

    def test_runtime_budget(self, exp1):
        _, elapsed, workers = exp1
        core_seconds = elapsed * min(workers, 8)
        check_cond(
            "table1.runtime <= 10 min on 8 cores",
            core_seconds <= 4800,
            f"{elapsed:.0f}s wall on {workers} workers = {core_seconds:.0f} "
            f"core-seconds (budget 4800; cells are independent so scaling to "
            f"8 cores is near-linear)")


class TestTrialSizeSweep:
    def test_table_s1_and_s2(self, exp1):
        ocs, _, _ = exp1
        check("tableS1[a].TP@100", ocs[("a", "alt")].verdict_rates[100]["positive"][0],
              0.482, 0.02)
        check("tableS2[a].TP@500", ocs[("a", "alt")].verdict_rates[500]["positive"][0],
              0.954, 0.02)
        check("tableS2[d].FP@500", ocs[("d", "null")].verdict_rates[500]["positive"][0],
              0.001, 0.005)


class TestTestVariants:
    def test_table_s3_no_control_margin(self, exp1):
        # delta0 = 0: the positive statistic becomes P(th0 >= th1) = 1 - p_neg
        ocs, _, _ = exp1
        p_neg_null = ocs[("a", "null")].p_neg_values[200]
        p_neg_alt = ocs[("a", "alt")].p_neg_values[200]
        check("tableS3[a].FP", float(np.mean(1.0 - p_neg_null <= 0.05)), 0.050, 0.02)
        check("tableS3[a].TP", float(np.mean(1.0 - p_neg_alt <= 0.05)), 0.897, 0.02)

    def test_table_s4_symmetric_margin(self, exp1):
        # negative statistic P(th1 >= th0 + d0) = 1 - p_pos
        ocs, _, _ = exp1
        p_pos_null = ocs[("a", "null")].p_pos_values[200]
        check("tableS4[a].TN", float(np.mean(1.0 - p_pos_null <= 0.05)), 0.236, 0.02)


class TestAllocationBehavior:
    def test_imbalance_probabilities(self, exp1):
        ocs, _, _ = exp1
        for label, target in (("a", 0.041), ("b", 0.023), ("c", 0.049)):
            check(f"imbalance[{label}]@200",
                  ocs[(label, "alt")].imbalance_prob(200)[0], target, 0.01)

    def test_imbalance_with_burn_in(self, exp1_burnin):
        for label, target in (("a", 0.013), ("b", 0.005), ("c", 0.019)):
            check(f"imbalance_burnin[{label}]@200",
                  exp1_burnin[(label, "alt")].imbalance_prob(200)[0], target, 0.008)

    def test_expected_successes(self, exp1):
        ocs, _, _ = exp1
        for label, target in (("d", 80.0), ("b", 85.6), ("k100", 94.4)):
            check(f"E[S(200)][{label}]", ocs[(label, "alt")].mean_successes(200)[0],
                  target, 1.0)

    def test_null_success_cdfs_indistinguishable(self, exp1):
        # S(200) under the null has the same distribution in every design
        ocs, _, _ = exp1
        base = ocs[("d", "null")].s_values[200]
        for label in ("a", "b", "c", "k100"):
            other = ocs[(label, "null")].s_values[200]
            # two-sample mean comparison at 4 sigma
            se = np.sqrt(base.var() / base.size + other.var() / other.size)
            check_cond(f"S(200) null mean matches [d vs {label}]",
                       abs(base.mean() - other.mean()) < 4 * se,
                       f"diff={abs(base.mean() - other.mean()):.2f} se={se:.2f}")


class TestBurnIn:
    def test_burn_in_power(self, exp1_burnin):
        check("burnin[c].TP@200",
              exp1_burnin[("c", "alt")].verdict_rates[200]["positive"][0], 0.443, 0.02)


class TestExperiment2:
    def test_alt_maximal_band(self, exp2):
        # Implemented exactly as specified; known red: the published value
        # is not reproducible from the printed rules at any inner-MC draw
        # count (band flat at 0.91-0.95 for 64..2^14 draws; see the
        # decisions ledger for the full blocking analysis).
        oc = exp2[("a", "alt")]
        idx = oc.band_events.index("arm3_maximal_control_out")
        value = float(oc.band_probs[-1, idx])
        info = (f"ACCEPTANCE INFO exp2[alt] bands@500: "
                + " ".join(f"{e}={oc.band_probs[-1, j]:.3f}"
                           for j, e in enumerate(oc.band_events)))
        print(info)
        _report_lines.append(info)
        check("exp2[alt].P(arm3 maximal@500, control out)", value, 0.763, 0.03)

    def test_null_bands_symmetric(self, exp2):
        oc = exp2[("a", "null")]
        R = oc.replicates
        ps = [float(oc.band_probs[-1, oc.band_events.index(f"arm{k}_maximal_control_out")])
              for k in (1, 2, 3)]
        for a in range(3):
            for b in range(a + 1, 3):
                sigma = np.sqrt((ps[a] * (1 - ps[a]) + ps[b] * (1 - ps[b])) / R)
                check_cond(f"exp2[null] band arm{a+1} vs arm{b+1} within 3 sigma",
                           abs(ps[a] - ps[b]) <= 3 * sigma + 1e-12,
                           f"|{ps[a]:.4f}-{ps[b]:.4f}| vs 3s={3*sigma:.4f}")

    def test_bands_partition(self, exp2):
        for oc in exp2.values():
            check_cond(f"exp2[{oc.scenario_label}] bands sum to 1",
                       bool(np.allclose(oc.band_probs.sum(axis=1), 1.0, atol=1e-12)))


class TestTimeToEvent:
    def test_hazard_scale_selection(self):
        arrival = ArrivalProcess(1.0, 250.0)
        protected = [DesignParams(policy="rule2", label="h", epsilon=0.1,
                                  epsilon2=0.05, rho=float(np.exp(-0.1)))]
        alt = run_tte_experiment(protected, [EventTimeScenario((1.0, 0.5), 250.0, "alt")],
                                 arrival, 500, 200, MASTER_SEED)
        rates = alt[("h", "alt")].verdict_rates[200]
        check_cond("tte[alt] P(control dropped) > P(experimental dropped)",
                   rates["positive"][0] > rates["negative"][0],
                   f"{rates['positive'][0]:.3f} vs {rates['negative'][0]:.3f}")
        # symmetric criteria under the null: drop probabilities agree within
        # 3 sigma (the rho < 1 margin deliberately protects the control, so
        # symmetry is asserted at rho = 1, matching the module contract)
        symmetric = [DesignParams(policy="rule2", label="s", epsilon=0.1,
                                  epsilon2=0.05, rho=1.0)]
        null = run_tte_experiment(symmetric, [EventTimeScenario((1.0, 1.0), 250.0, "null")],
                                  arrival, 500, 200, MASTER_SEED)
        r = null[("s", "null")].verdict_rates[200]
        p0, p1 = r["positive"][0], r["negative"][0]
        sigma = np.sqrt((p0 * (1 - p0) + p1 * (1 - p1)) / 500)
        check_cond("tte[null, rho=1] drop symmetry within 3 sigma",
                   abs(p0 - p1) <= 3 * sigma + 1e-12,
                   f"|{p0:.3f}-{p1:.3f}| vs 3s={3*sigma:.3f}")


class TestRule2DropCurveContext:
    def test_drop_bands_structure_and_report_value(self, exp1_rule2):
        # The selection-rule drop statistic uses the design margin delta=0.1,
        # not the final-test delta0=0.05, so its level differs from the
        # Table-1 endpoint; asserted here: structure, monotonicity, and the
        # measured value printed for comparison against the endpoint anchor.
        oc = exp1_rule2[("a2", "alt")]
        drop_curve = oc.band_probs[:, oc.band_events.index("control_dropped")]
        check_cond("rule2 drop band monotone nondecreasing",
                   bool(np.all(np.diff(drop_curve) >= -1e-12)))
        check_cond("rule2 bands partition", bool(np.allclose(
            oc.band_probs.sum(axis=1), 1.0, atol=1e-12)))
        p200 = oc.verdict_rates[200]["positive"][0]
        line = (f"ACCEPTANCE INFO rule2[a2].P(control dropped by 200)={p200:.3f} "
                f"(Table-1 endpoint TP anchor 0.723; differs by design, see ledger)")
        print(line)
        _report_lines.append(line)


class TestPropertySuite:
    """Engine-level properties the spec requires with no paper numbers."""

    def test_conjugacy_against_grid_normalization(self):
        from scipy.stats import beta as beta_dist
        rng = np.random.default_rng(4)
        y = rng.random(45) < 0.42
        s, f = int(y.sum()), int((~y).sum())
        grid = (np.arange(100_000) + 0.5) / 100_000
        logp = (1.7 - 1) * np.log(grid) + (2.3 - 1) * np.log1p(-grid) \
            + s * np.log(grid) + f * np.log1p(-grid)
        dens = np.exp(logp - logp.max())
        dens /= np.trapezoid(dens, grid)
        exact = beta_dist.pdf(grid, 1.7 + s, 2.3 + f)
        mask = exact > 1e-12
        rel = np.max(np.abs(dens[mask] / exact[mask] - 1))
        check_cond("conjugacy grid check rel err <= 1e-6", bool(rel <= 1e-6),
                   f"rel={rel:.2e}")

    def test_prob_is_max_sums_to_one(self):
        posts = {k: BetaPosterior(3 + k, 9 - k) for k in range(4)}
        est = EstimatorConfig(draws=2**13, rng=np.random.default_rng(3))
        vals = prob_is_max_all(posts, set(range(4)), est)
        total = sum(v.value for v in vals.values())
        check_cond("sum prob_is_max == 1 (common draws)",
                   abs(total - 1.0) < 1e-15, f"sum={total!r}")

    def test_quadrature_vs_mc(self):
        # a correct implementation still produces ~0.27 genuine 3-SE
        # excursions per 100 independent pairs, so bound their count and
        # cap the worst case at 5 SE instead of asserting every pair
        rng = np.random.default_rng(77)
        excursions = 0
        worst_sigmas = 0.0
        for _ in range(100):
            a = np.exp(rng.uniform(np.log(0.5), np.log(200), 4))
            shift = rng.uniform(-0.2, 0.4)
            quad = pairwise_prob(BetaPosterior(a[0], a[1]),
                                 BetaPosterior(a[2], a[3]), shift).value
            draws = 10**5
            mc = np.mean(rng.beta(a[0], a[1], draws) + shift >= rng.beta(a[2], a[3], draws))
            # model-based SE at the quadrature value; the empirical SE
            # degenerates when the sampled proportion hits 0 or 1
            se = np.sqrt(max(quad * (1 - quad), 1e-9) / draws)
            sigmas = abs(quad - mc) / se
            excursions += sigmas > 3
            worst_sigmas = max(worst_sigmas, sigmas)
        check_cond("quadrature vs MC agreement over 100 pairs",
                   excursions <= 3 and worst_sigmas <= 5,
                   f"{excursions} pairs beyond 3 SE, worst={worst_sigmas:.2f} SE")

    def test_likelihood_count_equivalence(self):
        params = DesignParams(policy="rule1", label="a", epsilon=0.1, delta=0.1)
        ok = True
        for seed in range(5):
            tr = run_trial(ScenarioQ((0.3, 0.5), "alt"), [(1, 1), (1, 1)], params,
                           80, seed=seed)
            arms, ys, ns = np.array(tr.arm), np.array(tr.outcome), np.array(tr.n)
            for n in (5, 33, int(ns[-1])):
                upto = ns <= n
                i_prefix = int(upto.sum())
                for k in range(2):
                    walk = (int(np.sum(upto & (arms == k) & (ys == 1))),
                            int(np.sum(upto & (arms == k) & (ys == 0))))
                    cond = (int(np.sum((arms[:i_prefix] == k) & (ys[:i_prefix] == 1))),
                            int(np.sum((arms[:i_prefix] == k) & (ys[:i_prefix] == 0))))
                    ok &= walk == cond
        check_cond("likelihood exponents: list-walk == condensed counts", ok)

    def test_fuzzed_absorbing_and_frozen(self):
        rng = np.random.default_rng(99)
        for _ in range(1000):
            m = int(rng.integers(2, 5))
            params = DesignParams(
                policy=("rule2" if rng.random() < 0.5 else "rule1"),
                epsilon=float(rng.uniform(0, 0.99 / m)),
                epsilon2=float(rng.uniform(0, 0.5 / m)),
                delta=float(rng.uniform(0, 0.2)))
            tr = run_trial(ScenarioQ(tuple(rng.uniform(0.15, 0.85, m))),
                           [(1.0, 1.0)] * m, params, 20,
                           seed=int(rng.integers(0, 2**31)),
                           estimator=EstimatorConfig(draws=256))
            st = np.array(tr.statuses)
            al = np.array(tr.alpha)
            be = np.array(tr.beta)
            arms = np.array(tr.arm)
            for k in range(m):
                drops = np.flatnonzero(st[:, k] == ArmStatus.DROPPED)
                assert not drops.size or np.all(st[drops[0]:, k] == ArmStatus.DROPPED)
            for j in range(1, len(tr.i)):
                for k in range(m):
                    if k != arms[j]:
                        assert al[j][k] == al[j - 1][k] and be[j][k] == be[j - 1][k]
        check_cond("1000 fuzzed runs: dropped absorbing, dormant posteriors frozen",
                   True)

    def test_block_balance(self):
        from adaptrial.randomization import generate
        rl = generate(seed=6, num_arms=3)
        arms = rl.arms_upto(3 * 300)
        ok = True
        for n in range(1, arms.size + 1):
            c = np.bincount(arms[:n], minlength=3)
            ok &= (c.max() - c.min()) <= 1
        check_cond("block balance differs by at most 1", ok)

    def test_delayed_limit_matches_instantaneous(self):
        sc = ScenarioQ((0.3, 0.5), "alt")
        params = DesignParams(policy="rule1", label="a", epsilon=0.1, delta=0.1)
        arrivals = np.arange(1.0, 91.0)
        tr_d = run_delayed_trial(sc, arrivals, DelayedOutcomeConfig(1e-9),
                                 [(1, 1), (1, 1)], params, 90, seed=17)
        tr_i = run_trial(sc, [(1, 1), (1, 1)], params, 90, seed=17)
        same = (tr_d.arm == tr_i.arm and tr_d.outcome == tr_i.outcome
                and tr_d.n == tr_i.n
                and np.allclose(np.array(tr_d.alpha), np.array(tr_i.alpha)))
        check_cond("delayed engine with d -> 0 matches instantaneous traces", same)

    def test_thread_invariance(self):
        designs = [DesignParams(policy="rule1", label="a", epsilon=0.1, delta=0.1),
                   DesignParams(policy="rule2", label="a2", epsilon=0.1,
                                epsilon2=0.05, delta=0.1)]
        scenarios = [ScenarioQ((0.3, 0.5), "alt")]
        a = run_experiment(designs, scenarios, 48, 40, 3, thread_budget=1)
        b = run_experiment(designs, scenarios, 48, 40, 3, thread_budget=2)
        same = all(
            np.array_equal(a[k].p_pos_values[40], b[k].p_pos_values[40])
            and np.array_equal(a[k].band_probs, b[k].band_probs)
            and np.array_equal(a[k].drop_i, b[k].drop_i)
            for k in a)
        check_cond("thread-count invariance of aggregated outputs", same)

    def test_rule2_zero_thresholds_equals_rule1(self):
        rng = np.random.default_rng(0)
        params = DesignParams(policy="rule2", epsilon=0.1, epsilon1=0.0, epsilon2=0.0)
        ok = True
        for _ in range(300):
            p1, pc = rng.random(), rng.random()
            probs = ComparativeProbs({0: 1 - p1, 1: p1}, pc)
            st1 = rule1_update(probs, 2, 0.1)
            st2, t, drops = rule2_update(probs, np.zeros(2, dtype=np.int8),
                                         {0, 1}, params, 1, 1)
            ok &= list(st1) == list(st2) and t == {0, 1} and not drops
        check_cond("rule2(eps1=eps2=0) reproduces rule1 statuses", ok)

    def test_posterior_mean_bias_bounded(self, exp1):
        ocs, _, _ = exp1
        worst = 0.0
        for (label, scen), oc in ocs.items():
            truth = (0.3, 0.3) if scen == "null" else (0.3, 0.5)
            for k in range(2):
                worst = max(worst, abs(oc.postmean_curves[-1, k] - truth[k]))
        check_cond("mean posterior-mean at i=500 within 0.05 of truth, all designs",
                   worst <= 0.05, f"worst |bias|={worst:.4f}")
