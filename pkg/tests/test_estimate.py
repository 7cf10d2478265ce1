import math

import numpy as np
import pytest

from carryover import (
    CarryoverSpec,
    Constant,
    Dataset,
    EventHistory,
    FixedTau,
    FrailtySpec,
    PowerLaw,
    SimConfig,
    fit_fixed,
    fit_poisson,
    fit_random,
    loglik_random,
    profile_delta,
    profile_loglik_fixed,
    simulate_dataset,
)
from carryover.estimate import (
    loglik_fixed_full,
    loglik_poisson,
    nelder_mead,
    score_beta_random,
)
from carryover.score import fixed_score_numerator

from conftest import make_data
from oracles import richardson

C = CarryoverSpec(0.2)


@pytest.mark.parametrize("gamma", [0.5, 1.0, 2.0])
def test_profile_single_event_is_minus_log_tau(gamma):
    d = Dataset((EventHistory("1", [0.7], 3.0),))
    assert profile_loglik_fixed(d, Constant(gamma), 0.0, C) == pytest.approx(-math.log(3.0))


def test_profile_no_events_is_zero():
    d = Dataset((EventHistory("1", [], 3.0), EventHistory("2", [], 1.0)))
    assert profile_loglik_fixed(d, Constant(1.0), 0.3, C) == 0.0


def test_profile_derivative_is_obs_minus_exp(null_data):
    f = lambda b: profile_loglik_fixed(null_data, Constant(1.0), b, C)
    obs, exp = fixed_score_numerator(null_data, Constant(1.0), C)
    assert richardson(f, 0.0, 1e-3) == pytest.approx(obs - exp, rel=1e-6)


def test_profile_identity(null_data):
    b, beta = PowerLaw(1.2, 0.9), 0.4
    from carryover.exposure import ExposureTable
    r, _ = ExposureTable.from_dataset(null_data, C).r_values(b, beta)
    n = null_data.arrays.counts
    alphas = np.where(n > 0, n / r, 0.0)
    pos = n > 0
    full = loglik_fixed_full(null_data, b, beta, alphas, C)
    prof = profile_loglik_fixed(null_data, b, beta, C)
    assert full == pytest.approx(prof + np.sum(n[pos] * (np.log(n[pos]) - 1)), rel=1e-12)


def test_random_single_subject_no_events():
    d = Dataset((EventHistory("1", [], 1.0),))
    assert loglik_random(d, Constant(1.0), 0.0, 1.0, C) == pytest.approx(-math.log(2.0))


def test_random_tends_to_poisson(null_data):
    b = Constant(1.3)
    lr = loglik_random(null_data, b, 0.2, 1e-10, C)
    assert lr == pytest.approx(loglik_poisson(null_data, b, 0.2, C), abs=1e-6)
    # just above the floor the exact formula is used and still agrees
    assert loglik_random(null_data, b, 0.2, 1e-7, C) == pytest.approx(lr, abs=1e-4)


def test_random_is_additive_over_subjects():
    h1 = EventHistory("1", [0.5, 0.6, 2.0], 3.0)
    h2 = EventHistory("2", [1.0], 2.0)
    one = loglik_random(Dataset((h1,)), Constant(1.1), 0.3, 0.4, C)
    two = loglik_random(Dataset((h2,)), Constant(1.1), 0.3, 0.4, C)
    dup = loglik_random(Dataset((h1, h1, h2)), Constant(1.1), 0.3, 0.4, C)
    assert dup == pytest.approx(2 * one + two, rel=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_analytic_beta_score(seed):
    d = make_data(m=30, seed=seed, beta=0.3)
    b = PowerLaw(1.1, 1.2)
    rng = np.random.default_rng(seed)
    beta, phi = rng.uniform(-0.5, 0.5), rng.uniform(0.05, 2.0)
    fd = richardson(lambda x: loglik_random(d, b, x, phi, C), beta, 1e-3)
    assert score_beta_random(d, b, beta, phi, C) == pytest.approx(fd, rel=1e-6)


def test_fixed_null_alphas_are_rates(null_data):
    fit = fit_fixed(null_data, "constant", C, constrain_beta_zero=True)
    a = null_data.arrays
    np.testing.assert_allclose(fit.fixed_effect_alphas, a.counts / a.tau, rtol=1e-12)
    assert fit.params["gamma"] == 1.0
    assert any("not identifiable" in n for n in fit.meta["notes"])


def test_powerlaw_fixed_null_fit_recovers_shape():
    d = make_data(m=200, tau=10.0, phi=0.3, seed=21)
    fit = fit_fixed(d, "powerlaw", C, constrain_beta_zero=True)
    assert fit.params["gamma2"] == pytest.approx(1.0, abs=0.1)


def test_no_events_is_an_error():
    d = Dataset((EventHistory("1", [], 1.0),))
    for f in (fit_fixed, fit_random, fit_poisson):
        with pytest.raises(ValueError, match="no events"):
            f(d, "constant", C)


def test_random_null_gamma_is_rate_for_equal_tau(null_data):
    fit = fit_random(null_data, "constant", C, constrain_beta_zero=True)
    a = null_data.arrays
    assert fit.params["gamma"] == pytest.approx(a.counts.sum() / a.tau.sum(), rel=1e-6)


def test_random_fit_recovers_beta_on_average():
    cfg = SimConfig(200, FixedTau(10.0), frailty=FrailtySpec("gamma", 0.3), beta=math.log(3.0),
                    carryover=CarryoverSpec(0.1054), seed=31)
    c = CarryoverSpec(0.1054)
    betas = [fit_random(simulate_dataset(cfg, replicate=r), "constant", c,
                        compute_se=False).params["beta"] for r in range(100)]
    assert np.mean(betas) == pytest.approx(math.log(3.0), abs=0.25)


def test_fit_result_fields(null_data):
    fit = fit_random(null_data, "powerlaw", C)
    assert set(fit.params) == {"gamma1", "gamma2", "beta", "phi"}
    assert all(fit.std_errors[k] > 0 for k in fit.params)
    assert fit.aic == -2 * fit.loglik + 2 * fit.n_params
    assert fit.meta["dataset_hash"] == null_data.digest
    assert fit.converged


def test_boundary_flag_without_heterogeneity():
    # identical subjects: no overdispersion, phi estimate on the floor
    h = [EventHistory(str(i), [1.0, 2.5, 4.0], 5.0) for i in range(40)]
    fit = fit_random(Dataset(tuple(h)), "constant", C, constrain_beta_zero=True)
    assert fit.boundary
    assert fit.params["phi"] == pytest.approx(1e-8, rel=1e-6)


def test_huge_phi_matches_fixed_effects():
    for seed in range(5):
        d = make_data(m=80, tau=6.0, phi=0.5, beta=0.4, seed=seed)
        fixed = fit_fixed(d, "constant", C, compute_se=False).params["beta"]
        huge = fit_random(d, "constant", C, phi=1e6, compute_se=False).params["beta"]
        assert huge == pytest.approx(fixed, abs=0.05)


def test_profile_delta():
    d = make_data(m=80, tau=5.0, phi=0.3, beta=0.8, delta=0.3, seed=3)
    prof = profile_delta(d, "constant", [0.6, 0.3, 0.2])
    assert [dl for dl, _ in prof.fits] == [0.2, 0.3, 0.6]
    assert len({f.meta["dataset_hash"] for _, f in prof.fits}) == 1
    single = profile_delta(d, "constant", [0.3]).fits[0][1]
    assert single.loglik == pytest.approx(fit_random(d, "constant", C.__class__(0.3)).loglik)
    with pytest.raises(ValueError):
        profile_delta(d, "constant", [])


def test_profile_delta_prefers_true_window():
    d0 = 0.1054
    cfg = SimConfig(200, FixedTau(10.0), frailty=FrailtySpec("gamma", 0.3), beta=math.log(3.0),
                    carryover=CarryoverSpec(d0), seed=41)
    wins = 0
    for r in range(100):
        prof = profile_delta(simulate_dataset(cfg, replicate=r), "constant",
                             [2 * d0 / 3, d0, 2 * d0])
        wins += prof.best_by_loglik == d0
    assert wins > 50


def test_nelder_mead_rosenbrock():
    f = lambda x: (1 - x[0]) ** 2 + 100 * (x[1] - x[0] ** 2) ** 2
    res = nelder_mead(f, [-1.2, 1.0])
    assert res.converged
    np.testing.assert_allclose(res.x, [1.0, 1.0], atol=1e-6)
