import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from carryover import (
    CarryoverSpec,
    Constant,
    Dataset,
    EventHistory,
    PowerLaw,
    carryover_exposure,
    carryover_indicator,
    conditional_frailty_intensity,
    exposure_summary,
    r_integral,
)
from carryover.exposure import ExposureTable, baseline_cumulative

from oracles import indicators, obs_count, r_quadrature, random_history


def test_hand_example_exposure():
    h = EventHistory("1", [1.0, 1.5, 3.0], 4.0)
    c = CarryoverSpec(1.0)
    assert carryover_exposure(h, c) == pytest.approx(2.5)
    value, d1, d2 = r_integral(h, Constant(1.0), math.log(2.0), c)
    assert value == pytest.approx(4.0 + 2.5)
    assert d1 == pytest.approx(5.0) and d2 == pytest.approx(5.0)


def test_window_truncated_at_tau():
    h = EventHistory("1", [1.0], 1.2)
    assert carryover_exposure(h, CarryoverSpec(1.0)) == pytest.approx(0.2)


def test_indicator_boundaries():
    h = EventHistory("1", [1.0, 3.0], 5.0)
    c = CarryoverSpec(0.5)
    assert carryover_indicator(h, 1.0, c) == 0  # N(t-) excludes the event itself
    assert carryover_indicator(h, 1.5, c) == 1  # closed at the window end
    assert carryover_indicator(h, 1.5000001, c) == 0
    with pytest.raises(ValueError):
        carryover_indicator(h, 6.0, c)


def test_threshold_two():
    h = EventHistory("1", [1.0, 1.2, 3.0], 4.0)
    c = CarryoverSpec(0.5, prior_event_threshold=2)
    assert carryover_indicator(h, 1.1, c) == 0
    assert carryover_indicator(h, 1.3, c) == 1
    # windows after the second and third events
    assert carryover_exposure(h, c) == pytest.approx(1.0)


def test_refractory_excludes_non_at_risk_time():
    h = EventHistory("1", [1.0], 4.0, [2.0])
    c = CarryoverSpec(0.5)
    assert carryover_indicator(h, 1.5, c) == 0
    assert carryover_indicator(h, 2.4, c) == 1
    s = exposure_summary(h, Constant(2.0), c)
    assert s.at_risk_baseline_integral == pytest.approx(2.0 * 3.0)
    assert s.weighted_window_integral == pytest.approx(1.0)


def test_baseline_cumulative_order():
    assert baseline_cumulative(PowerLaw(1.0, 2.0), 1.0, 2.0) == pytest.approx(3.0)
    with pytest.raises(ValueError):
        baseline_cumulative(Constant(1.0), 2.0, 1.0)


def test_conditional_frailty_intensity():
    h = EventHistory("1", [0.5], 2.0)
    c = CarryoverSpec(0.1)
    # just after the event: (1/phi + 1)/(1/phi + 0.5)
    val = conditional_frailty_intensity(h, 0.5000001, Constant(1.0), 1.0, 0.0, c)
    assert val == pytest.approx(4.0 / 3.0, rel=1e-6)
    with pytest.raises(ValueError):
        conditional_frailty_intensity(h, 1.0, Constant(1.0), 0.0, 0.0, c)


def _table_for(times, res, tau, delta, thr=1):
    d = Dataset((EventHistory("1", times, tau, res),))
    return ExposureTable.from_dataset(d, CarryoverSpec(delta, thr))


@settings(max_examples=150, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), delta=st.floats(0.01, 3.0),
       thr=st.integers(1, 3), refractory=st.booleans())
def test_kernels_match_pointwise_oracle(seed, delta, thr, refractory):
    rng = np.random.default_rng(seed)
    times, res, tau = random_history(rng, refractory=refractory)
    tab = _table_for(times, res, tau, delta, thr)
    assert tab.obs == obs_count(times, res, delta, thr)
    b = PowerLaw(1.3, 0.8)
    beta = 0.7
    expected = r_quadrature(times, res, tau, lambda t: float(b.rate(t)), beta, delta, thr)
    r, _ = tab.r_values(b, beta)
    assert r[0] == pytest.approx(expected, rel=1e-9)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), delta=st.floats(0.01, 3.0))
def test_obs_bounds_and_nonnegative_exposure(seed, delta):
    rng = np.random.default_rng(seed)
    times, res, tau = random_history(rng, refractory=True)
    tab = _table_for(times, res, tau, delta)
    assert 0 <= tab.obs <= max(0, times.size - 1)
    assert tab.window_time()[0] >= 0
    assert tab.window_time()[0] <= tab.at_risk_time()[0] + 1e-12


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), delta=st.floats(0.01, 2.0), scale=st.floats(0.1, 10))
def test_exposure_scales_with_time(seed, delta, scale):
    rng = np.random.default_rng(seed)
    times, res, tau = random_history(rng)
    a = _table_for(times, res, tau, delta)
    b = _table_for(times * scale, res * scale, tau * scale, delta * scale)
    assert b.obs == a.obs
    assert b.window_time()[0] == pytest.approx(scale * a.window_time()[0], rel=1e-9, abs=1e-12)


def test_indicator_function_matches_oracle():
    rng = np.random.default_rng(5)
    for _ in range(200):
        times, res, tau = random_history(rng, refractory=True)
        h = EventHistory("1", times, tau, res)
        c = CarryoverSpec(rng.uniform(0.05, 2.0))
        for t in rng.uniform(0, tau, 10):
            assert carryover_indicator(h, t, c) == indicators(times, res, t, c.delta)[1]
