import math

import numpy as np
import pytest
from scipy.stats import chi2_contingency

from ve_wane.model import Theta, TrialTimeline, WaningModelSpec, validate_record
from ve_wane.simulate import (
    ScenarioConfig,
    generate_dataset,
    generate_participant,
    invert_piecewise_hazard,
    potential_hazard,
    preset,
)
from ve_wane.simulate import _invert_batch, _potential_time_batch


class TestInvertPiecewiseHazard:
    def test_exponential_quantile(self):
        lam = 0.37
        t = invert_piecewise_hazard([(0.0, math.inf, lam)], math.exp(-1))
        assert t == pytest.approx(1.0 / lam)

    def test_shifted_exponential(self):
        lam = 0.8
        segs = [(0.0, 5.0, 0.0), (5.0, math.inf, lam)]
        t = invert_piecewise_hazard(segs, math.exp(-1))
        assert t == pytest.approx(5.0 + 1.0 / lam)

    def test_exhausted_bounded_segments(self):
        segs = [(0.0, 2.0, 0.1), (2.0, 4.0, 0.2)]
        # total hazard 0.6; a draw beyond it never fails
        assert invert_piecewise_hazard(segs, math.exp(-1)) == math.inf

    def test_three_segment_empirical_cdf(self):
        segs = [(0.0, 2.0, 0.05), (2.0, 6.0, 0.4), (6.0, math.inf, 0.15)]

        def surv(t):
            lam = 0.05 * min(t, 2.0)
            lam += 0.4 * max(0.0, min(t, 6.0) - 2.0)
            lam += 0.15 * max(0.0, t - 6.0)
            return math.exp(-lam)

        rng = np.random.default_rng(12)
        n = 10 ** 6
        u = rng.random(n)
        draws = np.array([invert_piecewise_hazard(segs, v) for v in u[:2000]])
        # scalar loop is slow; check the batch sampler on the full size and
        # agreement between both paths on the prefix
        bp = np.tile([2.0, 6.0], (n, 1))
        rates = np.tile([0.05, 0.4, 0.15], (n, 1))
        batch = _invert_batch(bp, rates, 1.0 - u)  # batch uses -log(1-u)
        assert np.allclose(batch[:2000], draws, rtol=1e-12)
        ts = np.sort(batch)
        emp = np.arange(1, n + 1) / n
        ana = 1.0 - np.array([surv(t) for t in ts[:: n // 2000]])
        sup = np.max(np.abs(emp[:: n // 2000] - ana))
        assert sup < 0.002

    def test_contiguity_enforced(self):
        with pytest.raises(ValueError):
            invert_piecewise_hazard([(0.0, 1.0, 0.1), (2.0, 3.0, 0.1)], 0.5)


class TestPotentialHazard:
    cfg = preset("i-a")
    lam_b = 1.0

    def test_requires_time_after_entry(self):
        with pytest.raises(ValueError):
            potential_hazard(self.cfg, 0, e=5.0, r=25.0, t=5.0)

    def test_placebo_blinded_is_base(self):
        assert potential_hazard(self.cfg, 0, 5.0, 25.0, 20.0, self.lam_b) == pytest.approx(1.0)

    def test_vaccine_blinded_after_lag(self):
        # full efficacy, before the waning knot
        h = potential_hazard(self.cfg, 1, 5.0, 40.0, 20.0, self.lam_b)
        assert h == pytest.approx(0.05)

    def test_vaccine_pre_lag_is_base(self):
        h = potential_hazard(self.cfg, 1, 5.0, 40.0, 9.0, self.lam_b)
        assert h == pytest.approx(1.0)

    def test_unblinded_vaccine_structure(self):
        # behavior multiplier on the fully-vaccinated rate, waned beyond the knot
        e, r = 5.0, 25.0
        t = e + 6.0 + 25.0  # 25 weeks past full efficacy (> knot at 20)
        h = potential_hazard(self.cfg, 1, e, r, t, self.lam_b)
        assert h == pytest.approx(1.25 * 0.05 * 7.0)

    def test_crossover_lag_keeps_base(self):
        e, r = 5.0, 25.0
        h = potential_hazard(self.cfg, 0, e, r, r + 3.0, self.lam_b)
        assert h == pytest.approx(1.0)

    def test_crossover_full_efficacy(self):
        e, r = 5.0, 25.0
        h = potential_hazard(self.cfg, 0, e, r, r + 6.0 + 1.0, self.lam_b)
        assert h == pytest.approx(1.25 * 0.05)

    def test_segment_rates_match_point_evaluation(self):
        # the generator's segment construction agrees with the public hazard
        cfg = self.cfg
        rng = np.random.default_rng(4)
        n = 50
        e = rng.uniform(0, 12, n)
        r = rng.uniform(19, 31, n)
        base = np.exp(rng.normal(-7, 0.3, n))
        for arm in (0, 1):
            u = rng.random(n)
            times = _potential_time_batch(cfg, arm, e, r, base, u)
            # recompute the cumulative hazard up to the sampled time by
            # numerically integrating the public point evaluator
            for i in range(0, n, 7):
                t_i = float(times[i])
                if not np.isfinite(t_i) or t_i > 80:
                    continue
                grid = np.linspace(1e-9, t_i, 4000)
                rates = [potential_hazard(cfg, arm, float(e[i]), float(r[i]),
                                          float(e[i]) + s, float(base[i]))
                         for s in grid]
                lam = np.trapezoid(rates, grid)
                assert lam == pytest.approx(-math.log1p(-u[i]), rel=5e-3)


class TestGenerateDataset:
    def test_deterministic(self):
        cfg = preset("i-b")
        a = generate_dataset(cfg, n=500, seed=9)
        b = generate_dataset(cfg, n=500, seed=9)
        for f in ("entry", "u", "r_time", "x"):
            assert np.array_equal(getattr(a.data, f), getattr(b.data, f))
        assert np.array_equal(a.truth.t0_star, b.truth.t0_star)

    def test_all_records_valid(self):
        cfg = preset("ii-a-strong")
        sim = generate_dataset(cfg, n=4000, seed=31)
        assert sim.data.validate(cfg.timeline) == []

    def test_requested_unblinding_rate(self):
        sim = generate_dataset(preset("i-a"), n=40000, seed=3)
        frac = (sim.truth.gamma_tilde == 1).mean()
        assert frac == pytest.approx(0.07, abs=0.01)

    def test_agreement_rate(self):
        sim = generate_dataset(preset("i-a"), n=40000, seed=3)
        assert sim.truth.psi_all.mean() == pytest.approx(0.78, abs=0.02)

    def test_placebo_infection_rate_without_crossover(self):
        # ~3% placebo infections over the study when crossover cannot
        # intervene (unblinding pushed to the very end)
        tl = TrialTimeline(t_accrual=12, t_pfizer=50, t_pdcv_start=50.5,
                          t_pdcv_end=51.5, t_analysis=52)
        cfg = ScenarioConfig(timeline=tl)
        sim = generate_dataset(cfg, n=40000, seed=8)
        pl = sim.data.arm == 0
        assert sim.data.infected[pl].mean() == pytest.approx(0.031, abs=0.006)

    def test_declined_crossover_times_present(self):
        sim = generate_dataset(preset("i-a"), n=20000, seed=21)
        d = sim.data
        declined = (d.arm == 0) & (d.gamma >= 1) & (d.psi == 0) & (d.infected == 1)
        assert np.isfinite(sim.truth.t_declined[declined]).all()
        # decliners' infections never activate either counting process
        assert np.all(sim.truth.t_declined[declined] == d.u[declined])

    def test_no_confounding_independence(self):
        # with zeroed coefficients, X1 is independent of the unblinding path
        sim = generate_dataset(preset("i-b"), n=30000, seed=13)
        x1 = sim.data.x[:, 0].astype(int)
        table = np.array([
            [np.sum((x1 == v) & (sim.truth.gamma_tilde == g)) for g in (1, 2)]
            for v in (0, 1)
        ])
        _, p, _, _ = chi2_contingency(table)
        assert p > 0.001
        table2 = np.array([
            [np.sum((x1 == v) & (sim.truth.psi_all == s)) for s in (0, 1)]
            for v in (0, 1)
        ])
        _, p2, _, _ = chi2_contingency(table2)
        assert p2 > 0.001

    def test_confounding_shifts_agreement(self):
        from ve_wane.logistic import fit_logistic

        sim = generate_dataset(preset("ii-b-strong"), n=30000, seed=14)
        d = sim.data
        design = np.column_stack([
            np.ones(d.n), d.x[:, 0], d.x[:, 1], sim.truth.gamma_tilde,
        ])
        fit = fit_logistic(sim.truth.psi_all, design)
        # conditional logit slope on X1 recovers the generative -1.0
        assert fit.gamma[1] == pytest.approx(-1.0, abs=0.12)

    def test_rare_infection_bound(self):
        # cumulative infection probability stays below 5% in every preset
        for name in ("i-a", "i-b", "ii-a", "ii-b", "ii-a-strong", "ii-b-strong"):
            sim = generate_dataset(preset(name), n=20000, seed=60)
            assert sim.data.infected.mean() < 0.05, name

    def test_crossover_compare_flag_changes_assembly(self):
        base = preset("i-a")
        alt = ScenarioConfig(**{**base.__dict__, "crossover_compare": "patient-literal"})
        a = generate_dataset(base, n=5000, seed=44)
        b = generate_dataset(alt, n=5000, seed=44)
        assert not np.array_equal(a.data.u, b.data.u)

    def test_generate_participant_matches_unit_dataset(self):
        cfg = preset("i-a")
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(123)))
        rec = generate_participant(cfg, rng)
        sim = generate_dataset(cfg, n=1, seed=123)
        assert rec.u == sim.data.record(0).u
        assert validate_record(rec, cfg.timeline) == []

    def test_linear_waning_rejected(self):
        with pytest.raises(ValueError, match="piecewise"):
            ScenarioConfig(waning=WaningModelSpec("linear", ()),
                           theta_true=Theta(-3.0, [0.01]))


class TestSamplerFidelity:
    def test_ks_against_analytic_survival(self):
        """Empirical survival of potential infection times against the
        hand-integrated piecewise-exponential curve, both arms."""
        cfg = preset("i-a")
        lam = 0.02
        n = 10 ** 5
        e0, r0 = 6.0, 26.0
        s_r = r0 - e0  # 20 weeks, before lag+knot=26
        th0, th1 = math.log(0.05), math.log(7.0)
        rate_u = 1.25 * math.exp(th0) * lam

        def cumhaz_vaccine(s):
            # [0,6): lam; [6,20): lam e^th0; [20,26): rate_u; [26,inf): rate_u e^th1
            out = lam * min(s, 6.0)
            out += lam * math.exp(th0) * max(0.0, min(s, s_r) - 6.0)
            out += rate_u * max(0.0, min(s, 26.0) - s_r)
            out += rate_u * math.exp(th1) * max(0.0, s - 26.0)
            return out

        def cumhaz_placebo(s):
            # [0,20): lam; [20,26): lam (crossover lag); [26,46): rate_u; then waned
            out = lam * min(s, s_r)
            out += lam * max(0.0, min(s, s_r + 6.0) - s_r)
            out += rate_u * max(0.0, min(s, s_r + 26.0) - (s_r + 6.0))
            out += rate_u * math.exp(th1) * max(0.0, s - (s_r + 26.0))
            return out

        rng = np.random.default_rng(2718)
        for arm, cumhaz in ((1, cumhaz_vaccine), (0, cumhaz_placebo)):
            u = rng.random(n)
            draws = _potential_time_batch(
                cfg, arm, np.full(n, e0), np.full(n, r0), np.full(n, lam), u)
            ts = np.sort(draws)
            emp_cdf = np.arange(1, n + 1) / n
            ana_cdf = 1.0 - np.exp(-np.array([cumhaz(t) for t in ts]))
            ks = np.max(np.abs(emp_cdf - ana_cdf))
            assert ks < 0.005, f"arm {arm}: KS={ks:.4f}"

    def test_never_unblinded_path(self):
        cfg = preset("i-b")
        n = 2000
        rng = np.random.default_rng(5)
        draws = _potential_time_batch(
            cfg, 1, np.full(n, 3.0), np.full(n, np.inf), np.full(n, 0.01),
            rng.random(n))
        assert np.all(draws > 0)
        assert np.isfinite(draws).all()
