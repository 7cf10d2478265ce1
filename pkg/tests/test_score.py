import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from carryover import (
    CarryoverSpec,
    Constant,
    Dataset,
    EventHistory,
    FitResult,
    FixedTau,
    FrailtySpec,
    SimConfig,
    bootstrap_pvalue_fixed,
    bootstrap_pvalue_random,
    fit_random,
    lr_test,
    score_test_fixed,
    score_test_random,
    simulate_dataset,
    wald_test,
)
from carryover.score import (
    bootstrap_p,
    choose_p_source,
    fixed_score_numerator,
    random_score_numerator,
)

from conftest import make_data
from oracles import obs_count, random_history


class TestFixedScore:
    def test_hand_example(self):
        d = Dataset((EventHistory("1", [1.0, 1.5, 3.0], 4.0),))
        r = score_test_fixed(d, "constant", CarryoverSpec(1.0))
        assert r.obs == 1
        assert r.exp == pytest.approx(0.75 * 2.5)

    def test_sign_when_no_event_in_windows(self):
        d = Dataset(tuple(EventHistory(str(i), [1.0, 3.0], 5.0) for i in range(3)))
        r = score_test_fixed(d, "constant", CarryoverSpec(0.5))
        assert r.obs == 0 and r.exp > 0 and r.statistic < 0

    def test_zero_variance_is_an_error(self):
        # threshold 2 with at most one event per subject: no window time anywhere
        d = Dataset((EventHistory("1", [1.0], 4.0), EventHistory("2", [2.0], 4.0)))
        with pytest.raises(ValueError, match="variance"):
            score_test_fixed(d, "constant", CarryoverSpec(1.0, 2))

    def test_powerlaw_variant_runs(self, null_data):
        r = score_test_fixed(null_data, "powerlaw", CarryoverSpec(0.2))
        assert r.variance > 0 and "gamma2" in r.params

    def test_two_sided_p(self, null_data):
        c = CarryoverSpec(0.2)
        one = score_test_fixed(null_data, "constant", c)
        two = score_test_fixed(null_data, "constant", c, two_sided=True)
        assert two.p_value == pytest.approx(2 * min(one.p_value, 1 - one.p_value))


class TestRandomScore:
    def test_forced_poisson_numerator(self):
        d = Dataset((EventHistory("1", [0.4], 1.0),))
        obs, exp = random_score_numerator(d, Constant(1.0), 0.0, CarryoverSpec(0.2))
        assert obs - exp == pytest.approx(-0.2)

    def test_single_subject_poisson_equals_fixed(self):
        d = Dataset((EventHistory("1", [0.4, 0.5, 2.0, 2.2], 3.0),))
        c = CarryoverSpec(0.3)
        r = score_test_random(d, "constant", c, phi=0.0)
        f = score_test_fixed(d, "constant", c)
        assert r.obs == f.obs
        assert r.exp == pytest.approx(f.exp, rel=1e-14)

    def test_boundary_falls_back_to_poisson(self):
        h = [EventHistory(str(i), [1.0, 1.1, 4.0], 5.0) for i in range(30)]
        r = score_test_random(Dataset(tuple(h)), "constant", CarryoverSpec(0.3))
        assert r.params["phi"] == 0.0
        assert any("boundary" in n for n in r.notes)

    def test_huge_phi_numerator_tends_to_fixed(self, null_data):
        c = CarryoverSpec(0.2)
        r = score_test_random(null_data, "constant", c, phi=1e6)
        f = score_test_fixed(null_data, "constant", c)
        assert (r.obs - r.exp) == pytest.approx(f.obs - f.exp, abs=1e-3)

    @pytest.mark.parametrize("family", ["constant", "powerlaw"])
    def test_scale_invariance(self, family):
        d = make_data(m=40, tau=4.0, phi=0.4, seed=8)
        c = CarryoverSpec(0.25)
        for k in (0.01, 7.0):
            a = d.arrays
            scaled = Dataset.from_arrays(a.times * k, a.counts, a.tau * k)
            ck = CarryoverSpec(0.25 * k)
            assert score_test_fixed(scaled, "constant", ck).statistic == pytest.approx(
                score_test_fixed(d, "constant", c).statistic, abs=1e-8)
            if family == "constant":
                assert score_test_random(scaled, family, ck).statistic == pytest.approx(
                    score_test_random(d, family, c).statistic, abs=1e-8)

    def test_variance_matches_full_numeric_schur(self, null_data):
        from carryover.estimate import _Model, numeric_hessian
        from carryover.exposure import ExposureTable
        c = CarryoverSpec(0.2)
        for family in ("constant", "powerlaw"):
            null = fit_random(null_data, family, c, constrain_beta_zero=True)
            model = _Model(ExposureTable.from_dataset(null_data, c), family, "random")
            theta = np.insert(np.array(null.meta["theta"]), -1, 0.0)
            H = -numeric_hessian(model.loglik, theta)
            i = model.names.index("beta")
            o = [k for k in range(theta.size) if k != i]
            v = H[i, i] - H[i, o] @ np.linalg.solve(H[np.ix_(o, o)], H[o, i])
            assert score_test_random(null_data, family, c).variance == pytest.approx(v, rel=1e-4)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), delta=st.floats(0.05, 2.0), thr=st.integers(1, 3))
def test_obs_bounds_and_nonnegative_exp(seed, delta, thr):
    rng = np.random.default_rng(seed)
    hs = []
    for i in range(5):
        t, r, tau = random_history(rng)
        hs.append(EventHistory(str(i), t, tau))
    d = Dataset(tuple(hs))
    c = CarryoverSpec(delta, thr)
    obs, exp = fixed_score_numerator(d, Constant(1.0), c)
    bound = sum(max(0, h.n_events - thr) for h in hs)
    assert obs == sum(obs_count(h.event_times, h.event_times, delta, thr) for h in hs)
    assert 0 <= obs <= bound and exp >= 0
    _, exp_r = random_score_numerator(d, Constant(1.3), 0.7, c)
    assert exp_r >= 0


class TestWaldLR:
    def test_wald_zero(self):
        t = wald_test(FitResult({"beta": 0.0}, {"beta": 0.3}, -1.0, 2))
        assert t.statistic == 0 and t.p_value == 1.0

    def test_wald_table_value(self):
        se = 0.904 / math.sqrt(33.338)
        t = wald_test(FitResult({"beta": 0.904}, {"beta": se}, -1.0, 2))
        assert t.statistic == pytest.approx(33.338)

    def test_wald_errors(self):
        with pytest.raises(ValueError):
            wald_test(FitResult({"beta": 0.2}, {"beta": 0.0}, -1.0, 2))
        with pytest.raises(ValueError):
            wald_test(FitResult({"beta": 0.2}, {}, -1.0, 2))

    def test_lr_identical_and_floor(self, null_data):
        c = CarryoverSpec(0.2)
        full = fit_random(null_data, "constant", c)
        assert lr_test(full, full).statistic == 0
        worse = FitResult(dict(full.params), {}, full.loglik - 1.0, 3, meta=dict(full.meta))
        t = lr_test(full, worse)
        assert t.statistic == 0 and t.notes

    def test_lr_dataset_mismatch(self, null_data):
        c = CarryoverSpec(0.2)
        a = fit_random(null_data, "constant", c)
        b = fit_random(make_data(seed=99), "constant", c)
        with pytest.raises(ValueError, match="different datasets"):
            lr_test(a, b)

    def test_lr_power(self):
        c = CarryoverSpec(0.1054)
        cfg = SimConfig(200, FixedTau(10.0), frailty=FrailtySpec("gamma", 0.3),
                        beta=math.log(3.0), carryover=c, seed=13)
        reject = 0
        for r in range(200):
            d = simulate_dataset(cfg, replicate=r)
            null = fit_random(d, "constant", c, constrain_beta_zero=True, compute_se=False)
            full = fit_random(d, "constant", c, compute_se=False)
            reject += lr_test(null, full).p_value < 0.05
        assert reject / 200 > 0.95


class TestBootstrap:
    def test_p_formula(self):
        assert bootstrap_p(1.0, [0.5, 1.0, 2.0]) == pytest.approx(3 / 4)
        assert bootstrap_p(-3.0, [2.0, 1.0], two_sided=True) == pytest.approx(1 / 3)

    def test_guards(self, null_data):
        c = CarryoverSpec(0.2)
        with pytest.raises(ValueError):
            bootstrap_pvalue_fixed(null_data, "constant", c, B=0)
        with pytest.raises(ValueError):
            bootstrap_pvalue_random(null_data, "constant", c, B=0)
        with_res = make_data(refractory=0.1, seed=5)
        with pytest.raises(ValueError):
            bootstrap_pvalue_fixed(with_res, "constant", c, B=5)

    def test_random_b_one(self, null_data):
        t = bootstrap_pvalue_random(null_data, "constant", CarryoverSpec(0.2), B=1, seed=3)
        assert t.p_value in (0.5, 1.0)

    def test_deterministic_and_thread_invariant(self, null_data):
        c = CarryoverSpec(0.2)
        a = bootstrap_pvalue_fixed(null_data, "constant", c, B=40, seed=2)
        b = bootstrap_pvalue_fixed(null_data, "constant", c, B=40, seed=2, threads=2)
        assert a.p_value == b.p_value

    def test_fixed_bootstrap_alternative(self):
        d = make_data(m=200, tau=5.0, phi=0.5, beta=math.log(2.5), delta=0.2, seed=4)
        t = bootstrap_pvalue_fixed(d, "constant", CarryoverSpec(0.2), B=999, seed=1)
        assert t.p_value == pytest.approx(1 / 1000)

    def test_random_bootstrap_alternative(self):
        c = CarryoverSpec(0.2)
        for seed in range(3):
            d = make_data(m=100, tau=5.0, phi=0.3, beta=math.log(3.0), delta=0.2, seed=seed)
            assert bootstrap_pvalue_random(d, "constant", c, B=39, seed=seed).p_value == 1 / 40


def test_choose_p_source():
    big = make_data(m=120, tau=5.0, phi=0.3, seed=1)
    assert choose_p_source(big, CarryoverSpec(0.2)) == "normal"
    assert choose_p_source(big, CarryoverSpec(0.001)) == "bootstrap"
    assert choose_p_source(make_data(m=20), CarryoverSpec(0.2)) == "bootstrap"
