import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from gapcast import (DataError, band_fill, copy_previous,
                     copy_previous_normalizers, mape, mase, mean_fill,
                     welch_t_test)


class TestMape:
    def test_perfect_forecast(self):
        assert mape([1.0, 2.0], [1.0, 2.0]).value == 0.0

    def test_single_step_ten_percent(self):
        r = mape([11.0], [10.0])
        assert r.value == pytest.approx(10.0)

    def test_zero_actual_excluded_and_counted(self):
        r = mape([11.0, 5.0], [10.0, 0.0])
        assert r.value == pytest.approx(10.0)
        assert r.excluded == 1 and r.scored == 1

    def test_all_excluded_flags_undefined(self):
        r = mape([1.0, 2.0], [0.0, 0.0])
        assert np.isnan(r.value) and r.excluded == 2

    def test_missing_steps_skipped(self):
        r = mape([11.0, 3.0], [10.0, np.nan])
        assert r.value == pytest.approx(10.0) and r.scored == 1


def brute_force_mase(preds, actuals, train, horizon):
    """Spreadsheet-style re-computation with explicit loops."""
    n = len(train)
    scaled = []
    for i in range(1, horizon + 1):
        pairs = [abs(train[t + i] - train[t]) for t in range(n - horizon)
                 if not (np.isnan(train[t + i]) or np.isnan(train[t]))]
        norm = sum(pairs) / len(pairs)
        a, p = actuals[i - 1], preds[i - 1]
        if not (np.isnan(a) or np.isnan(p)):
            scaled.append(abs(p - a) / norm)
    return sum(scaled) / len(scaled)


class TestMase:
    def test_perfect_forecast_is_zero(self):
        train = np.arange(1.0, 13.0)
        r = mase([12.5, 13.0], [12.5, 13.0], train)
        assert r.value == 0.0

    def test_copy_previous_in_sample_is_one_per_step(self):
        rng = np.random.default_rng(8)
        train = rng.normal(size=40)
        k = 3
        norms = copy_previous_normalizers(train, np.ones(40, dtype=bool), k)
        # averaging the copy-previous scaled errors over every anchor gives
        # exactly 1 for every step
        for i in range(1, k + 1):
            errs = [abs(train[t + i] - train[t]) / norms[i - 1]
                    for t in range(40 - k)]
            assert np.mean(errs) == pytest.approx(1.0, abs=1e-12)

    def test_hand_built_series_matches_brute_force(self):
        train = np.array([3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0, 5.0, 3.0, 5.0, 8.0])
        preds = np.array([4.0, 7.0])
        actuals = np.array([6.0, 4.0])
        r = mase(preds, actuals, train)
        assert r.value == pytest.approx(brute_force_mase(preds, actuals, train, 2),
                                        abs=1e-12)

    def test_gappy_training_series_uses_observed_pairs(self):
        train = np.array([3.0, np.nan, 4.0, 1.0, np.nan, 9.0, 2.0, 6.0])
        preds = np.array([5.0, 5.0])
        actuals = np.array([6.0, 4.0])
        r = mase(preds, actuals, train)
        assert r.value == pytest.approx(
            brute_force_mase(preds, actuals, train, 2), abs=1e-12)

    def test_constant_training_series_flags_undefined(self):
        r = mase([1.0], [2.0], np.full(10, 7.0))
        assert np.isnan(r.value)

    def test_missing_actuals_skipped(self):
        train = np.arange(1.0, 13.0)
        full = mase([12.5], [12.0], train)
        partial = mase([12.5, 99.0], [12.0, np.nan], train)
        assert partial.value == pytest.approx(full.value)
        assert partial.scored == 1


class TestCopyPrevious:
    def test_replicates_last_observed(self):
        vals = np.array([1.0, 7.0, np.nan])
        obs = np.array([True, True, False])
        assert copy_previous(vals, obs, 3, 4).tolist() == [7.0] * 4

    def test_single_step(self):
        assert copy_previous(np.array([3.0]), np.array([True]), 1, 1).tolist() == [3.0]

    def test_skips_gap_before_window(self):
        vals = np.array([1.0, 5.0, np.nan, np.nan])
        obs = np.array([True, True, False, False])
        assert copy_previous(vals, obs, 4, 2).tolist() == [5.0, 5.0]

    def test_no_prior_observation_raises(self):
        with pytest.raises(DataError):
            copy_previous(np.array([np.nan, 1.0]), np.array([False, True]), 1, 2)


def integrated_t_p_value(t, dof):
    """Two-sided p by numerically integrating the t density."""
    def pdf(u):
        from math import gamma, sqrt, pi
        c = gamma((dof + 1) / 2) / (gamma(dof / 2) * sqrt(dof * pi))
        return c * (1 + u * u / dof) ** (-(dof + 1) / 2)

    tail, _ = quad(pdf, abs(t), np.inf)
    return 2 * tail


class TestWelch:
    def test_identical_samples(self):
        r = welch_t_test([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
        assert r.t == 0.0 and r.p == 1.0 and not r.significant

    def test_hand_case(self):
        r = welch_t_test([1, 2, 3, 4, 5], [2, 3, 4, 5, 6])
        assert r.t == pytest.approx(-1.0)
        assert r.dof == pytest.approx(8.0)

    def test_extreme_separation(self):
        rng = np.random.default_rng(0)
        a = rng.normal(0, 1, 10)
        b = rng.normal(100, 1, 10)
        r = welch_t_test(a, b)
        assert r.p < 1e-6 and r.significant

    def test_degenerate_sample_flags_undefined(self):
        r = welch_t_test([1.0], [1.0, 2.0, 3.0])
        assert not r.defined

    def test_constant_equal_samples_defined(self):
        r = welch_t_test([2.0, 2.0], [2.0, 2.0])
        assert r.defined and r.p == 1.0

    @given(st.lists(st.floats(-10, 10), min_size=3, max_size=12),
           st.lists(st.floats(-10, 10), min_size=3, max_size=12))
    @settings(max_examples=100, deadline=None)
    def test_swap_antisymmetry(self, a, b):
        r1 = welch_t_test(a, b)
        r2 = welch_t_test(b, a)
        if r1.defined:
            assert r1.t == pytest.approx(-r2.t, abs=1e-12)
            assert r1.p == pytest.approx(r2.p, abs=1e-12)

    def test_p_matches_numerical_integration(self):
        rng = np.random.default_rng(4)
        for _ in range(3):
            a = rng.normal(0, 1, 8)
            b = rng.normal(0.8, 2, 6)
            r = welch_t_test(a, b)
            assert r.p == pytest.approx(integrated_t_p_value(r.t, r.dof), abs=1e-9)


class TestImputationRules:
    def test_mean_fill(self):
        got = mean_fill(np.array([1.0, 0.0, 0.0, 0.0, 2.0]),
                        np.array([True, False, False, False, True]), 4.0)
        assert got.tolist() == [1.0, 4.0, 4.0, 4.0, 2.0]

    def test_band_three_wide_gap(self):
        # left=2, right=6, mean=4: ramp to the mean at the center tick
        got = band_fill(np.array([2.0, 0, 0, 0, 6.0]),
                        np.array([True, False, False, False, True]), 4.0)
        assert got.tolist() == [2.0, 3.0, 4.0, 5.0, 6.0]

    def test_band_single_gap_gets_mean(self):
        got = band_fill(np.array([2.0, 0.0, 6.0]),
                        np.array([True, False, True]), 4.0)
        assert got[1] == 4.0

    def test_boundary_gap_falls_back_to_mean(self):
        got = band_fill(np.array([0.0, 0.0, 5.0]),
                        np.array([False, False, True]), 4.0)
        assert got.tolist() == [4.0, 4.0, 5.0]

    def test_no_gaps_identical_between_rules(self):
        v = np.array([1.0, 2.0, 3.0])
        obs = np.ones(3, dtype=bool)
        assert np.array_equal(mean_fill(v, obs, 9.0), band_fill(v, obs, 9.0))
        assert np.array_equal(mean_fill(v, obs, 9.0), v)

    @given(st.integers(2, 9), st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5))
    @settings(max_examples=150, deadline=None)
    def test_edge_values_sit_between_boundary_and_mean(self, width, left, right, mean):
        v = np.concatenate([[left], np.zeros(width), [right]])
        obs = np.array([True] + [False] * width + [True])
        got = band_fill(v, obs, mean)
        first, last = got[1], got[width]
        for val, bound in ((first, left), (last, right)):
            lo, hi = min(bound, mean), max(bound, mean)
            assert lo - 1e-12 <= val <= hi + 1e-12
            if abs(bound - mean) > 1e-9:
                assert lo < val < hi or val == pytest.approx(mean)
