"""Calibration tests: closed-form probability oracle, finite-difference
derivative oracles, and simulation-based parameter recovery."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit

from aqdyn.measurement import (
    CalibrationModel,
    CalibrationPair,
    ConvergenceError,
    KIT_LABELS,
    _nll_grad_hess,
    calibration_fit_report,
    default_synthetic_calibration,
    fit_calibration,
    floor_detection_limit,
    kit_category_probabilities,
    kit_label_to_category,
    kit_log_likelihood,
    kit_loglik_and_grad,
    load_calibration,
    save_calibration,
)


def simulate_pairs(model, n, rng, log_mean=4.0, log_sd=1.3):
    """Simulation oracle: draw lab values lognormally, categories from the model.

    Categories are drawn conditional on the floored value, since flooring is
    applied to the predictor before any fit."""
    y = floor_detection_limit(np.exp(rng.normal(log_mean, log_sd, n)))
    cdf = expit(model.cutpoints[None, :] + model.slope * np.log(y)[:, None])
    probs = np.diff(
        np.concatenate([np.zeros((n, 1)), cdf, np.ones((n, 1))], axis=1)
    )
    cats = np.array([rng.choice(9, p=p / p.sum()) + 1 for p in probs])
    return [CalibrationPair(float(v), int(k)) for v, k in zip(y, cats)]


class TestProbabilities:
    def test_closed_form_oracle(self):
        model = default_synthetic_calibration()
        z = np.log(50.0)
        probs = kit_category_probabilities(model, z)
        cdf = expit(model.cutpoints + model.slope * z)
        expected = np.diff(np.concatenate([[0.0], cdf, [1.0]]))
        np.testing.assert_allclose(probs, expected, atol=1e-15)
        assert abs(probs.sum() - 1.0) < 1e-12

    @given(
        st.floats(min_value=-4.0, max_value=-0.2),
        st.floats(min_value=1.0, max_value=1000.0),
    )
    @settings(max_examples=60, deadline=None)
    def test_probabilities_sum_to_one(self, slope, y):
        model = CalibrationModel(np.linspace(2.0, 20.0, 8) * abs(slope) / 2, slope)
        probs = kit_category_probabilities(model, np.log(y))
        assert abs(probs.sum() - 1.0) < 1e-12
        assert np.all(probs >= -1e-15)

    def test_stochastic_dominance_in_concentration(self):
        # With a negative slope, higher concentration shifts mass upward:
        # every cumulative probability at y=300 is below its y=30 value.
        model = default_synthetic_calibration()
        cdf_hi = np.cumsum(kit_category_probabilities(model, np.log(300.0)))
        cdf_lo = np.cumsum(kit_category_probabilities(model, np.log(30.0)))
        assert np.all(cdf_hi[:-1] <= cdf_lo[:-1] + 1e-15)
        assert cdf_hi[0] < cdf_lo[0]

    def test_loglik_normalizes(self):
        model = default_synthetic_calibration()
        z = np.log(120.0)
        total = sum(np.exp(kit_log_likelihood(model, w, z)) for w in range(1, 10))
        assert abs(total - 1.0) < 1e-12

    def test_loglik_gradient_matches_finite_differences(self):
        model = default_synthetic_calibration()
        rng = np.random.default_rng(2)
        cats = rng.integers(1, 10, 40)
        z = rng.normal(4.0, 1.5, 40)
        _, grad = kit_loglik_and_grad(model, cats, z)
        h = 1e-6
        up, _ = kit_loglik_and_grad(model, cats, z + h)
        dn, _ = kit_loglik_and_grad(model, cats, z - h)
        np.testing.assert_allclose(grad, (up - dn) / (2 * h), rtol=1e-5, atol=1e-7)

    def test_extreme_predictors_stay_finite(self):
        model = default_synthetic_calibration()
        ll, grad = kit_loglik_and_grad(model, [1, 5, 9], [60.0, -60.0, 60.0])
        assert np.all(np.isfinite(ll))
        assert np.all(np.isfinite(grad))


class TestLabelsAndFlooring:
    def test_label_mapping(self):
        assert [kit_label_to_category(v) for v in KIT_LABELS] == list(range(1, 10))
        assert kit_label_to_category("500") == 8

    def test_unknown_label_lists_valid(self):
        with pytest.raises(ValueError, match="0, 10, 25, 50, 100, 200, 300, 500, 1000"):
            kit_label_to_category(42)

    def test_detection_limit_flooring(self):
        np.testing.assert_allclose(
            floor_detection_limit([0.0, 4.9, 5.0, 120.0]), [2.5, 2.5, 5.0, 120.0]
        )
        with pytest.raises(ValueError):
            floor_detection_limit([-1.0])


class TestFit:
    def test_nll_gradient_and_hessian_match_finite_differences(self):
        rng = np.random.default_rng(3)
        pairs = simulate_pairs(default_synthetic_calibration(), 300, rng)
        z = np.log(np.array([p.lab_value for p in pairs]))
        w = np.array([p.kit_category for p in pairs])
        phi = np.concatenate([[4.0], np.log(np.full(7, 2.0)), [-2.5]])
        f, g, H = _nll_grad_hess(phi, z, w)
        h = 1e-5
        for i in range(9):
            e = np.zeros(9)
            e[i] = h
            fp, gp, _ = _nll_grad_hess(phi + e, z, w)
            fm, gm, _ = _nll_grad_hess(phi - e, z, w)
            assert abs((fp - fm) / (2 * h) - g[i]) < 1e-4 * max(1.0, abs(g[i]))
            np.testing.assert_allclose(H[:, i], (gp - gm) / (2 * h), rtol=1e-3, atol=1e-3)

    def test_recovery_within_three_standard_errors(self):
        truth = default_synthetic_calibration()
        hits = 0
        for seed in range(3):
            rng = np.random.default_rng(100 + seed)
            pairs = simulate_pairs(truth, 944, rng)
            fitted = fit_calibration(pairs)
            report = calibration_fit_report(fitted, pairs)
            ok = np.all(
                np.abs(fitted.cutpoints - truth.cutpoints) <= 3 * report.cutpoint_se
            ) and abs(fitted.slope - truth.slope) <= 3 * report.slope_se
            hits += bool(ok)
        assert hits >= 2

    def test_report_confusion_concentrates_on_diagonal(self):
        truth = default_synthetic_calibration()
        rng = np.random.default_rng(5)
        pairs = simulate_pairs(truth, 944, rng)
        fitted = fit_calibration(pairs)
        report = calibration_fit_report(fitted, pairs)
        assert report.n_pairs == 944
        assert report.log_likelihood < 0
        assert abs(report.confusion.sum() - 944) < 1e-6
        # expected predictions concentrate on and around the observed category
        diag_share = np.trace(report.confusion) / report.confusion.sum()
        assert diag_share > 0.35
        for k in range(9):
            row = report.confusion[k]
            if row.sum() > 50:
                near = row[max(0, k - 1) : k + 2].sum()
                assert near / row.sum() > 0.6

    def test_too_few_pairs_rejected(self):
        pairs = [CalibrationPair(10.0, 2)] * 9
        with pytest.raises(ValueError, match="at least 10"):
            fit_calibration(pairs)

    def test_single_category_rejected(self):
        pairs = [CalibrationPair(10.0 + i, 3) for i in range(20)]
        with pytest.raises(ValueError, match="single"):
            fit_calibration(pairs)

    def test_budget_exhaustion_reports_gradient_norm(self):
        rng = np.random.default_rng(6)
        pairs = simulate_pairs(default_synthetic_calibration(), 200, rng)
        with pytest.raises(ConvergenceError, match="gradient norm"):
            fit_calibration(pairs, max_iter=1)


class TestSerialization:
    def test_round_trip(self, tmp_path):
        model = default_synthetic_calibration()
        path = tmp_path / "calibration.json"
        save_calibration(model, path)
        back = load_calibration(path)
        np.testing.assert_allclose(back.cutpoints, model.cutpoints)
        assert back.slope == model.slope

    def test_non_ascending_cutpoints_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"cutpoints": [1,2,3,4,5,6,8,7], "slope": -3}')
        with pytest.raises(ValueError, match="ascending"):
            load_calibration(path)

    def test_positive_slope_warns(self, tmp_path):
        path = tmp_path / "odd.json"
        path.write_text('{"cutpoints": [1,2,3,4,5,6,7,8], "slope": 0.5}')
        with pytest.warns(UserWarning):
            load_calibration(path)
