
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from carryover import Dataset, EventHistory
from carryover.diagnostics import (
    StepFunction,
    extract_gaps,
    gap_cumulative_hazard,
    gap_hazard_piecewise,
    nelson_aalen_mean,
    obs_exp_table,
    piecewise_hazard,
)

from conftest import make_data
from gap_table import EDGES, SECOND_H, SECOND_h, THIRD_H, THIRD_h


class TestNelsonAalen:
    def test_single_subject(self):
        f = nelson_aalen_mean(Dataset((EventHistory("1", [1.0, 2.0], 3.0),)))
        assert f.jump_times.tolist() == [1.0, 2.0]
        assert f.cumulative_values.tolist() == [1.0, 2.0]
        assert f(0.5) == 0.0 and f(1.0) == 1.0 and f(2.9) == 2.0

    def test_duplicated_histories(self):
        h = EventHistory("1", [0.4, 1.7, 2.2], 3.0)
        one = nelson_aalen_mean(Dataset((h,)))
        two = nelson_aalen_mean(Dataset((h, EventHistory("2", h.event_times, 3.0))))
        assert np.array_equal(one.cumulative_values, two.cumulative_values)

    def test_hpp_mean_at_tau(self):
        d = make_data(m=500, tau=10.0, phi=0.0, kind="none", delta=0.1, seed=3)
        assert abs(nelson_aalen_mean(d)(10.0) - 10.0) <= 0.5

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_order_invariance(self, seed):
        rng = np.random.default_rng(seed)
        hs = [EventHistory(str(i), np.sort(rng.uniform(0, 4, rng.integers(1, 5))), 4.0)
              for i in range(6)]
        perm = rng.permutation(6)
        a = nelson_aalen_mean(Dataset(tuple(hs)))
        b = nelson_aalen_mean(Dataset(tuple(hs[i] for i in perm)))
        assert np.allclose(a.cumulative_values, b.cumulative_values, rtol=1e-14, atol=0)
        assert np.allclose(a.variance, b.variance, rtol=1e-12, atol=0)

    def test_step_function_guards(self):
        with pytest.raises(ValueError):
            StepFunction(np.array([1.0, 2.0]), np.array([1.0]))
        with pytest.raises(ValueError):
            StepFunction(np.array([1.0, 2.0]), np.array([1.0, 0.5]))


class TestGapHazard:
    @pytest.mark.parametrize("H, h", [(SECOND_H, SECOND_h), (THIRD_H, THIRD_h)])
    def test_published_differences(self, H, h):
        rows = piecewise_hazard(EDGES, H)
        assert [round(r.h, 5) for r in rows] == list(h)

    def test_first_two_entries(self):
        rows = piecewise_hazard((0.0, 60.0, 120.0), (0.0, 0.19263, 0.26584))
        assert round(rows[0].h, 5) == 0.00321
        assert round(rows[1].h, 5) == 0.00122

    def test_all_censored(self):
        rows = gap_hazard_piecewise([(1.0, True), (2.5, True)], (0.0, 1.0, 2.0, 3.0))
        assert all(r.H == 0 and r.h == 0 for r in rows)

    def test_negative_duration(self):
        with pytest.raises(ValueError):
            gap_cumulative_hazard([(-0.1, False)])

    def test_edges_must_start_at_zero(self):
        with pytest.raises(ValueError):
            gap_hazard_piecewise([(1.0, False)], (0.5, 1.0))

    def test_hand_censoring(self):
        # at risk: 3 at t=1, 1 at t=3 after a censoring at 2
        H = gap_cumulative_hazard([(1.0, False), (2.0, True), (3.0, False)])
        assert H.cumulative_values.tolist() == pytest.approx([1 / 3, 1 / 3 + 1])

    def test_exponential_recovers_rate(self):
        lam = 0.5
        rng = np.random.default_rng(9)
        dur = rng.exponential(1 / lam, 10_000)
        edges = (0.0, 0.5, 1.0, 2.0, 3.0, 4.0, 6.0, 8.0)
        rows = gap_hazard_piecewise([(x, False) for x in dur], edges)
        for r in rows:
            n_in = np.sum((dur > r.lower) & (dur <= r.upper))
            if n_in >= 100:
                assert abs(r.h - lam) <= 0.1 * lam

    def test_gap_extraction(self):
        h = EventHistory("1", [1.0, 3.0], 5.0, resolution_times=[1.5, 3.0])
        gaps = extract_gaps(Dataset((h,)))
        assert [(g.duration, g.censored, g.index) for g in gaps] == [
            (1.0, False, 1), (1.5, False, 2), (2.0, True, 3)]
        by = extract_gaps(Dataset((h,)), by_index=True)
        assert list(by) == [1, 2, 3]


class TestObsExp:
    def test_singleton_grid(self, null_data):
        rows = obs_exp_table(null_data, "constant", [0.2])
        assert len(rows) == 1
        r = rows[0]
        assert r._fields == ("delta", "obs", "exp", "gamma", "beta", "phi", "S2", "Z2", "loglik")
        assert isinstance(r.obs, int)

    def test_empty_grid(self, null_data):
        with pytest.raises(ValueError):
            obs_exp_table(null_data, "constant", [])

    def test_obs_same_across_models(self, null_data):
        grid = [0.1, 0.3]
        fx = obs_exp_table(null_data, "constant", grid, model="fixed")
        rn = obs_exp_table(null_data, "constant", grid, model="random")
        assert [r.obs for r in fx] == [r.obs for r in rn]
        assert all(a.exp != b.exp for a, b in zip(fx, rn))

    def test_null_rows_close(self):
        d = make_data(m=150, tau=10.0, phi=0.3, seed=12)
        for r in obs_exp_table(d, "constant", [0.05, 0.1, 0.2]):
            assert r.S2 < 4.0
