import numpy as np
import pytest

from adaptrial.allocation import DesignParams
from adaptrial.continuous import (ArrivalProcess, DelayedOutcomeConfig,
                                  EventTimeScenario, VaccineDecision,
                                  run_delayed_trial, run_tte_trial,
                                  run_vaccine_monitoring, simulate_arrivals,
                                  vaccine_stop_check)
from adaptrial.posterior import GammaPosterior
from adaptrial.trial import ScenarioQ, run_trial

UNIFORM2 = [(1.0, 1.0), (1.0, 1.0)]


class TestArrivals:
    def test_count_near_mean(self):
        times = simulate_arrivals(ArrivalProcess(rate=2.0, horizon=1000.0), seed=5)
        assert abs(len(times) - 2000) < 4 * np.sqrt(2000)

    def test_strictly_increasing_within_horizon(self):
        times = simulate_arrivals(ArrivalProcess(rate=5.0, horizon=100.0), seed=7)
        assert np.all(np.diff(times) > 0)
        assert times[0] > 0 and times[-1] <= 100.0

    def test_gap_mean(self):
        times = simulate_arrivals(ArrivalProcess(rate=4.0, horizon=30000.0), seed=1)
        gaps = np.diff(times)
        se = (1 / 4.0) / np.sqrt(gaps.size)
        assert abs(gaps.mean() - 0.25) < 4 * se

    def test_deterministic(self):
        a = simulate_arrivals(ArrivalProcess(rate=3.0, horizon=50.0), seed=11)
        b = simulate_arrivals(ArrivalProcess(rate=3.0, horizon=50.0), seed=11)
        assert np.array_equal(a, b)

    def test_rejects_bad_process(self):
        with pytest.raises(ValueError):
            ArrivalProcess(rate=0.0, horizon=10.0)


def design_a(**kw):
    base = dict(policy="rule1", label="a", epsilon=0.1, delta=0.1)
    base.update(kw)
    return DesignParams(**base)


class TestDelayed:
    def test_d_to_zero_matches_instantaneous_trace(self):
        sc = ScenarioQ((0.3, 0.5), "alt")
        arrivals = np.arange(1.0, 130.0)  # strictly ordered, unit gaps
        d = 1e-6
        tr_d = run_delayed_trial(sc, arrivals, DelayedOutcomeConfig(d), UNIFORM2,
                                 design_a(), 120, seed=42)
        tr_i = run_trial(sc, UNIFORM2, design_a(), 120, seed=42)
        assert tr_d.i == tr_i.i and tr_d.n == tr_i.n
        assert tr_d.arm == tr_i.arm and tr_d.outcome == tr_i.outcome
        assert all(np.array_equal(a, b) for a, b in zip(tr_d.statuses, tr_i.statuses))
        assert np.allclose(np.array(tr_d.alpha), np.array(tr_i.alpha))
        assert np.allclose(np.array(tr_d.beta), np.array(tr_i.beta))
        assert np.allclose(np.array(tr_d.p_ctrl_margin), np.array(tr_i.p_ctrl_margin),
                           equal_nan=True)
        assert np.allclose(np.array(tr_d.p_max), np.array(tr_i.p_max), equal_nan=True)

    def test_visibility_strictly_after_lag(self):
        # U_j = t - d exactly: outcome j is NOT yet visible at t
        sc = ScenarioQ((0.5, 0.5), "x")
        arrivals = np.array([1.0, 2.0, 3.0])
        d = 1.0  # patient 2 arrives exactly at U_1 + d
        tr = run_delayed_trial(sc, arrivals, DelayedOutcomeConfig(d), UNIFORM2,
                               design_a(), 3, seed=3)
        # at patient 2's arrival nothing was visible, so its posterior row
        # (finalized when its own outcome matured) shows 2 absorbed outcomes
        # only after t > 3; patient 1's row absorbed at t=3 (2 < 3 - 1 false,
        # 1 < 3 - 1 true)
        assert len(tr) == 3
        alphas = np.array(tr.alpha)
        betas = np.array(tr.beta)
        # row 1 was finalized at the arrival t=3: only patient 1 absorbed
        assert (alphas[0].sum() + betas[0].sum()) == 4 + 1

    def test_prior_only_until_first_maturity(self):
        sc = ScenarioQ((0.3, 0.6), "gap")
        arrivals = np.linspace(0.5, 50, 100)
        cfg = DelayedOutcomeConfig(10.0)
        tr = run_delayed_trial(sc, arrivals, cfg, UNIFORM2, design_a(), 100, seed=9)
        # patients arriving before the first outcome matured carry symmetric
        # active statuses
        first_visible = np.searchsorted(arrivals, arrivals[0] + 10.0, side="right")
        for j in range(first_visible):
            assert all(s == 0 for s in tr.statuses[j])

    def test_delay_beyond_horizon_is_pure_block_walk(self):
        sc = ScenarioQ((0.2, 0.8), "gap")
        arrivals = np.linspace(1, 40, 40)
        cfg = DelayedOutcomeConfig(1000.0)
        tr = run_delayed_trial(sc, arrivals, cfg, UNIFORM2, design_a(), 40, seed=2)
        counts = np.bincount(tr.arm, minlength=2)
        assert counts[0] == counts[1] == 20
        assert list(tr.n) == list(range(1, 41))

    def test_information_monotone(self):
        sc = ScenarioQ((0.3, 0.5), "alt")
        arrivals = np.sort(np.random.default_rng(3).uniform(0, 60, 80))
        tr = run_delayed_trial(sc, arrivals, DelayedOutcomeConfig(2.0), UNIFORM2,
                               design_a(), 80, seed=31)
        totals = [a.sum() + b.sum() for a, b in zip(tr.alpha, tr.beta)]
        assert all(b >= a for a, b in zip(totals, totals[1:]))


class TestTimeToEvent:
    def test_ttt_hand_computed(self):
        # treatments at U=(0,1,2) on one arm, first event at X1=0.5, others
        # unresolved at t=2.5: events=1, TTT = 0.5 + 1.5 + 0.5 = 2.5
        u = np.array([0.0, 1.0, 2.0])
        x = np.array([0.5, 10.0, 10.0])
        t = 2.5
        exposure = np.minimum(x, t - u)
        events = int(np.sum(u + x <= t))
        ttt = float(exposure.sum())
        assert events == 1 and ttt == 2.5
        # engine-level check via a crafted run is covered below; the posterior
        # rule itself:
        from adaptrial.posterior import update_gamma
        post = update_gamma(GammaPosterior(1.0, 1.0), events, ttt)
        assert post == GammaPosterior(2.0, 3.5)

    def test_no_events_all_censored(self):
        sc = EventTimeScenario((0.001, 0.001), analysis_horizon=10.0, label="slow")
        arrivals = np.linspace(1, 9, 12)
        params = design_a(rho=1.0)
        tr = run_tte_trial(sc, arrivals, UNIFORM2, params, 12, seed=5)
        events = tr.terminal_extra["final_events"]
        ttt = tr.terminal_extra["final_ttt"]
        assert events.sum() == 0 and ttt.sum() > 0
        # posterior shape stays at the prior when no events
        assert all(a == 1.0 for a in tr.alpha[-1])

    def test_engine_bookkeeping_matches_direct_computation(self):
        sc = EventTimeScenario((1.0, 0.5), analysis_horizon=60.0, label="alt")
        arrivals = simulate_arrivals(ArrivalProcess(2.0, 60.0), seed=8)
        params = DesignParams(policy="rule2", epsilon=0.1, epsilon2=0.05,
                              rho=float(np.exp(-0.1)))
        tr = run_tte_trial(sc, arrivals, UNIFORM2, params, 50, seed=8)
        arms = np.array(tr.arm)
        xs = np.array([float(o) for o in tr.outcome])
        us = np.array(tr.extra["t"])
        for row in [3, 10, len(tr) - 1]:
            t = us[row]
            ev = tr.extra["events"][row]
            tt = tr.extra["ttt"][row]
            for k in range(2):
                prev = slice(0, row)  # patients assigned before this arrival
                mask = arms[prev] == k
                expo = np.minimum(xs[prev][mask], t - us[prev][mask])
                assert ev[k] == np.sum(us[prev][mask] + xs[prev][mask] <= t)
                assert tt[k] == pytest.approx(expo.sum(), rel=1e-12)
            # events + censored = assigned
            assert ev.sum() <= row

    def test_symmetric_scenario_symmetric_drops(self):
        sc = EventTimeScenario((1.0, 1.0), analysis_horizon=200.0, label="null")
        params = DesignParams(policy="rule2", epsilon=0.1, epsilon2=0.05, rho=1.0)
        drops = {0: 0, 1: 0}
        reps = 120
        for seed in range(reps):
            arrivals = simulate_arrivals(ArrivalProcess(1.0, 200.0), seed=1000 + seed)
            tr = run_tte_trial(sc, arrivals, UNIFORM2, params, 60, seed=1000 + seed)
            for d in tr.drop_records:
                drops[d.arm] += 1
        p0, p1 = drops[0] / reps, drops[1] / reps
        se = np.sqrt((p0 * (1 - p0) + p1 * (1 - p1)) / reps)
        assert abs(p0 - p1) <= 3 * se + 1e-9


class TestVaccine:
    def test_stop_check_thresholds(self):
        # success, continue, futility straight from the probability value
        strong = (GammaPosterior(30, 100), GammaPosterior(2, 100))
        assert vaccine_stop_check(*strong, ve_star=0.3, epsilon1=0.05) \
            is VaccineDecision.DECLARE_SUCCESS
        flat = (GammaPosterior(5, 100), GammaPosterior(5, 100))
        assert vaccine_stop_check(*flat, ve_star=0.0, epsilon1=0.01) \
            is VaccineDecision.CONTINUE_TRIAL
        bad = (GammaPosterior(2, 100), GammaPosterior(30, 100))
        assert vaccine_stop_check(*bad, ve_star=0.5, epsilon1=0.05) \
            is VaccineDecision.DECLARE_FUTILITY
        with pytest.raises(ValueError):
            vaccine_stop_check(*flat, ve_star=0.0, epsilon1=0.6)

    def test_monitoring_declares_success_for_effective_vaccine(self):
        arrivals = simulate_arrivals(ArrivalProcess(5.0, 80.0), seed=13)
        out = run_vaccine_monitoring(control_intensity=0.2, vaccine_intensity=0.02,
                                     arrivals=arrivals, priors=UNIFORM2, ve_star=0.5,
                                     epsilon1=0.01, horizon=80.0, seed=13)
        assert out.decision is VaccineDecision.DECLARE_SUCCESS
        assert out.stop_time < 80.0
        assert out.prob_ve > 0.99
