import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reachcal.calibration import (
    CalibrationResult,
    RiskBudget,
    build_grid,
    calibrate_scores,
    empirical_risk,
    hb_pvalue,
    min_calibration_size,
    select_threshold,
)
from reachcal.errors import (
    CalibrationInfeasibleError,
    ConfigurationError,
    DegenerateGridError,
)


from oracles import hb_pvalue_oracle


class TestEmpiricalRisk:
    def test_direct_count(self):
        assert empirical_risk([1, 2, 3, 4], 2.5) == 0.5

    def test_at_or_above_max(self):
        assert empirical_risk([1, 2, 3, 4], 4.0) == 0.0

    def test_below_min(self):
        assert empirical_risk([1, 2, 3, 4], 0.5) == 1.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            empirical_risk([], 0.0)


class TestHbPvalue:
    def test_zero_risk_hoeffding_dominates(self):
        # Hoeffding (0.95)^100 ~ 5.92e-3 beats Bentkus e*(0.95)^100 ~ 1.61e-2
        p = hb_pvalue(0.0, 100, 0.05)
        assert p == pytest.approx(0.95**100, rel=1e-12)

    def test_risk_at_or_above_alpha_clips_to_one(self):
        assert hb_pvalue(0.08, 100, 0.05) == 1.0
        assert hb_pvalue(0.05, 100, 0.05) == 1.0

    def test_known_hoeffding_term(self):
        # r=0.05, n=200, alpha=0.10: exp(-200*h1(.05,.10)) ~ 3.54e-2
        h1 = 0.05 * math.log(0.5) + 0.95 * math.log(0.95 / 0.90)
        expected_hoeffding = math.exp(-200 * h1)
        assert expected_hoeffding == pytest.approx(3.54e-2, rel=0.01)
        assert hb_pvalue(0.05, 200, 0.10) == pytest.approx(
            min(expected_hoeffding, hb_pvalue_oracle(0.05, 200, 0.10)), rel=1e-10
        )

    def test_against_high_precision_oracle(self):
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(200):
            n = int(rng.integers(1, 10_000))
            alpha = float(rng.uniform(0.001, 0.5))
            r_hat = float(rng.uniform(0.0, 1.0))
            got = hb_pvalue(r_hat, n, alpha)
            want = hb_pvalue_oracle(r_hat, n, alpha)
            worst = max(worst, abs(got - want))
        assert worst < 1e-12

    @settings(max_examples=60, deadline=None)
    @given(
        n=st.integers(1, 2000),
        alpha=st.floats(0.01, 0.4),
        r_lo=st.floats(0.0, 1.0),
        r_hi=st.floats(0.0, 1.0),
    )
    def test_monotone_in_empirical_risk(self, n, alpha, r_lo, r_hi):
        lo, hi = sorted((r_lo, r_hi))
        assert hb_pvalue(lo, n, alpha) <= hb_pvalue(hi, n, alpha) + 1e-15

    def test_input_validation(self):
        with pytest.raises(ValueError):
            hb_pvalue(1.5, 10, 0.05)
        with pytest.raises(ValueError):
            hb_pvalue(0.1, 0, 0.05)


class TestGrid:
    def test_three_point_grid(self):
        grid = build_grid(np.array([0.0, 10.0]), grid_size=3)
        assert np.array_equal(grid.values, [0.0, 5.0, 10.0])

    def test_endpoints_match_observed_range(self):
        scores = np.random.default_rng(0).uniform(2.0, 9.0, size=100)
        grid = build_grid(scores, grid_size=50)
        assert grid.values[0] == scores.min()
        assert grid.values[-1] == scores.max()

    def test_degenerate_scores_rejected(self):
        with pytest.raises(DegenerateGridError):
            build_grid(np.full(10, 3.3))


class TestSelectThreshold:
    def test_smallest_passing_candidate(self):
        # uniform scores, a budget the zero-risk tail passes comfortably
        rng = np.random.default_rng(1)
        scores = rng.uniform(size=500)
        budget = RiskBudget(alpha=0.2, delta=0.2, n_steps=1)
        grid = build_grid(scores, grid_size=200)
        record = select_threshold(grid, scores, budget)
        assert record.threshold is not None
        idx = np.nonzero(record.p_values <= budget.per_step_budget)[0][0]
        assert record.threshold == grid.values[idx]
        # every candidate p-value agrees with the scalar route
        for j in (0, idx, len(grid.values) - 1):
            assert record.p_values[j] == pytest.approx(
                hb_pvalue(record.empirical_risks[j], 500, 0.2), abs=1e-14
            )

    def test_none_when_budget_unreachable(self):
        scores = np.random.default_rng(2).uniform(size=30)
        budget = RiskBudget(alpha=0.05, delta=0.2, n_steps=30)
        record = select_threshold(build_grid(scores, 50), scores, budget)
        assert record.threshold is None

    def test_minimum_zero_risk_sample_count(self):
        # smallest n with (0.95)^n <= 0.2/30 is 98
        assert min_calibration_size(0.05, 0.2 / 30) == 98
        assert 0.95**98 <= 0.2 / 30 < 0.95**97

    def test_monotone_risks_and_pvalues_along_grid(self):
        scores = np.random.default_rng(3).normal(size=400)
        budget = RiskBudget(alpha=0.1, delta=0.2, n_steps=2)
        record = select_threshold(build_grid(scores, 300), scores, budget)
        assert np.all(np.diff(record.empirical_risks) <= 0)
        assert np.all(np.diff(record.p_values) <= 1e-15)


class TestCalibrateScores:
    def test_single_step_budget_is_delta(self):
        budget = RiskBudget(alpha=0.1, delta=0.2, n_steps=1)
        assert budget.per_step_budget == 0.2
        scores = np.random.default_rng(0).uniform(size=300)
        result = calibrate_scores([scores], budget, grid_size=200)
        assert result.thresholds.shape == (1,)

    def test_infeasible_step_reports_k_and_min_n(self):
        budget = RiskBudget(alpha=0.05, delta=0.2, n_steps=2)
        good = np.random.default_rng(0).uniform(size=500)
        bad = np.random.default_rng(1).uniform(size=20)
        with pytest.raises(CalibrationInfeasibleError, match="step 1") as err:
            calibrate_scores([good, bad], budget, grid_size=100)
        n_min = min_calibration_size(0.05, 0.1)
        assert f"n >= {n_min}" in str(err.value)

    def test_coverage_on_fresh_draws(self):
        """Calibrated threshold admits >= 1-alpha of fresh points from the
        same distribution (uniform square, distance-from-center score)."""
        rng = np.random.default_rng(5)
        cal = rng.uniform(-1, 1, size=(2000, 2))
        cal_scores = np.abs(cal).max(axis=1)
        budget = RiskBudget(alpha=0.1, delta=0.2, n_steps=1)
        result = calibrate_scores([cal_scores], budget, grid_size=2000)
        q = result.thresholds[0]
        fresh = rng.uniform(-1, 1, size=(100_000, 2))
        fresh_scores = np.abs(fresh).max(axis=1)
        assert (fresh_scores <= q).mean() >= 1 - budget.alpha

    def test_membership_boundary_inclusive_and_replay(self):
        rng = np.random.default_rng(6)
        scores = rng.uniform(size=400)
        budget = RiskBudget(alpha=0.2, delta=0.3, n_steps=1)
        result = calibrate_scores([scores], budget, grid_size=400)
        q = result.thresholds[0]
        record = result.steps[0]
        # boundary convention: score exactly q is accepted
        assert (np.array([q]) <= q)[0]
        # when the selected risk is zero every calibration point replays as accepted
        risk_at_q = (scores > q).mean()
        if risk_at_q == 0.0:
            assert scores.max() <= q
        assert record.empirical_risks[np.searchsorted(record.grid, q)] == risk_at_q

    def test_audit_round_trip(self):
        rng = np.random.default_rng(7)
        budget = RiskBudget(alpha=0.1, delta=0.2, n_steps=2)
        result = calibrate_scores(
            [rng.uniform(size=300), rng.uniform(size=300)], budget, grid_size=50
        )
        text = result.to_json()
        again = CalibrationResult.from_json(text)
        assert again.to_json() == text
        assert np.array_equal(again.thresholds, result.thresholds)

    def test_budget_validation(self):
        with pytest.raises(ConfigurationError):
            RiskBudget(alpha=0.0, delta=0.2, n_steps=5)
        with pytest.raises(ConfigurationError):
            RiskBudget(alpha=0.1, delta=1.0, n_steps=5)
