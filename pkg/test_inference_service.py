import math
from types import SimpleNamespace

import numpy as np
import pytest
from scipy.optimize import brentq
from scipy.special import ndtri

from conftest import make_inference, make_logistic
from services.errors import (
    BracketError,
    ConfigError,
    CurvatureError,
    ProfileInconsistencyError,
    SignInconsistencyError,
)
from services.expansion_service import LinearRepr
from services.inference_service import (
    decompose,
    likelihood_root,
    p_values,
    q_stat,
    r_star,
    rho_stat,
    score_stat,
    wald_stat,
)
from services.model_service import LINEAR_EXPONENTIAL, LOCATION_SCALE, Dataset


class TestStatistics:
    def test_likelihood_root(self):
        assert likelihood_root(-10.0, -12.0, 1.0, 0.0) == pytest.approx(2.0)
        assert likelihood_root(-10.0, -12.0, 0.0, 1.0) == pytest.approx(-2.0)

    def test_small_negative_difference_is_clipped(self):
        assert likelihood_root(-10.0, -10.0 + 1e-10, 0.3, 0.2) == 0.0

    def test_constrained_above_maximum_is_inconsistent(self):
        with pytest.raises(ProfileInconsistencyError):
            likelihood_root(-10.0, -9.999, 0.3, 0.2)

    def test_wald_and_score(self):
        assert wald_stat(1.5, 0.5, 4.0) == pytest.approx(2.0)
        assert score_stat(3.0, 9.0) == pytest.approx(1.0)
        with pytest.raises(CurvatureError):
            wald_stat(1.0, 0.0, 0.0)
        with pytest.raises(CurvatureError):
            score_stat(1.0, -2.0)

    def test_rho_and_q(self):
        assert rho_stat(2.0, 0.0) == pytest.approx(math.e)
        assert q_stat(LINEAR_EXPONENTIAL, 1.5, 2.0) == pytest.approx(3.0)
        assert q_stat(LOCATION_SCALE, 1.5, 2.0) == pytest.approx(0.75)
        with pytest.raises(ConfigError):
            q_stat("poisson", 1.0, 1.0)

    def test_r_star_formula(self):
        linear = LinearRepr(c0=0.1, c1=0.02, family=LINEAR_EXPONENTIAL, n=100)
        value, patched = r_star(2.0, 2.0 * math.e, linear)
        assert value == pytest.approx(2.5)
        assert not patched

    def test_r_star_near_zero_uses_linear_representation(self):
        linear = LinearRepr(c0=0.1, c1=0.02, family=LINEAR_EXPONENTIAL, n=100)
        value, patched = r_star(0.01, 123.0, linear)
        assert patched
        assert value == pytest.approx(0.1 + 1.02 * 0.01)
        assert r_star(0.0, 0.0, linear) == (pytest.approx(0.1), True)

    def test_r_star_sign_mismatch(self):
        linear = LinearRepr(c0=0.0, c1=0.0, family=LINEAR_EXPONENTIAL, n=10)
        with pytest.raises(SignInconsistencyError):
            r_star(1.0, -0.5, linear)

    def test_decompose_sums_to_r_star(self):
        r, rho, t = 2.0, math.e, 2.0 * math.exp(0.4)
        r_np, r_inf = decompose(r, rho, t, LINEAR_EXPONENTIAL)
        assert (r_np, r_inf) == (pytest.approx(0.5), pytest.approx(0.2))
        value, _ = r_star(r, q_stat(LINEAR_EXPONENTIAL, t, rho), LinearRepr(0.0, 0.0, LINEAR_EXPONENTIAL, 1))
        assert r + r_np + r_inf == pytest.approx(value, abs=1e-14)

    def test_decompose_location_scale_sign(self):
        r_np, r_inf = decompose(2.0, math.e, 2.0, LOCATION_SCALE)
        assert r_np == pytest.approx(-0.5)
        assert r_inf == pytest.approx(0.0)

    def test_decompose_inside_band(self):
        with pytest.raises(SignInconsistencyError):
            decompose(0.01, 1.0, 0.01, LINEAR_EXPONENTIAL)

    def test_p_values(self):
        assert p_values(0.0) == (pytest.approx(0.5), pytest.approx(1.0))
        one, two = p_values(1.959963984540054)
        assert one == pytest.approx(0.025, rel=1e-9)
        assert two == pytest.approx(0.05, rel=1e-9)
        one, two = p_values(-1.0)
        assert one == pytest.approx(0.8413447460685429, rel=1e-12)
        assert two == pytest.approx(0.3173105078629141, rel=1e-12)


class TestInferenceService:
    def test_at_psi_hat(self, logistic_inference, logistic_analysis, logistic_data):
        report = logistic_inference.test(logistic_data, logistic_analysis.fit.psi_hat, logistic_analysis)
        assert abs(report.r) < 1e-5
        assert report.rho == pytest.approx(1.0, rel=1e-8)
        assert report.near_zero_patched
        assert report.r_star == pytest.approx(logistic_analysis.linear.predict(report.r))
        assert report.r == 0.0
        assert report.p_two_sided == 1.0
        assert report.p_star_two_sided == pytest.approx(p_values(report.r_star)[1], rel=1e-12)

    @pytest.mark.parametrize("offset", [-2.5, -1.0, 1.0, 2.5])
    def test_logistic_identities(self, logistic_inference, logistic_analysis, logistic_data, offset):
        fit = logistic_analysis.fit
        psi0 = fit.psi_hat + offset * fit.standard_error()
        report = logistic_inference.test(logistic_data, psi0, logistic_analysis)
        assert report.w == report.r ** 2
        assert np.sign(report.r) == -np.sign(offset)
        assert report.score_s is None
        assert report.r + report.r_np + report.r_inf == pytest.approx(report.r_star, abs=1e-12)
        assert report.q == pytest.approx(report.wald_t * report.rho, rel=1e-14)

    @pytest.mark.parametrize("offset", [-2.0, 1.5])
    def test_location_scale_identities(self, t5_inference, t5_analysis, t5_data, offset):
        fit = t5_analysis.fit
        psi0 = fit.psi_hat + offset * fit.standard_error()
        report = t5_inference.test(t5_data, psi0, t5_analysis)
        assert report.score_s is not None
        assert report.q == pytest.approx(report.score_s / report.rho, rel=1e-14)
        assert report.r + report.r_np + report.r_inf == pytest.approx(report.r_star, abs=1e-12)

    def test_wald_ratio_tends_to_one(self, logistic_inference, logistic_analysis, logistic_data):
        fit = logistic_analysis.fit
        se = fit.standard_error()
        gaps = []
        for offset in (2.0, 0.6, 0.2):
            report = logistic_inference.test(logistic_data, fit.psi_hat - offset * se, logistic_analysis)
            gaps.append(abs(report.wald_t / report.r - 1.0))
        assert gaps[-1] < gaps[0]
        assert gaps[-1] < 0.05

    def test_rho_matches_determinants(self, t5_inference, t5_analysis, t5_data):
        fit = t5_analysis.fit
        psi0 = fit.psi_hat - 0.2
        report = t5_inference.test(t5_data, psi0, t5_analysis)
        constrained = t5_inference.estimator.fit_constrained(t5_data, psi0, warm_start=fit)
        hat_block = np.delete(np.delete(fit.observed_info, 1, axis=0), 1, axis=1)
        expected = math.sqrt(np.linalg.det(hat_block) / np.linalg.det(constrained.nuisance_info))
        assert report.rho == pytest.approx(expected, rel=1e-8)

    @pytest.mark.parametrize("offset", [-1.7, 0.8])
    def test_known_scale_normal_has_no_correction(self, known_inference, known_analysis, normal_data, offset):
        fit = known_analysis.fit
        report = known_inference.test(normal_data, fit.psi_hat + offset * fit.standard_error(), known_analysis)
        assert report.rho == 1.0
        assert report.wald_t == pytest.approx(report.r, rel=1e-6)
        assert report.score_s == pytest.approx(report.r, rel=1e-6)
        assert report.r_star == pytest.approx(report.r, abs=1e-8)

    def test_score_on_request_for_logistic(self, logistic_inference, logistic_analysis, logistic_data):
        fit = logistic_analysis.fit
        report = logistic_inference.test(logistic_data, fit.psi_hat + 0.1, logistic_analysis, score=True)
        assert report.score_s is not None
        assert np.sign(report.score_s) == np.sign(report.r)

    @pytest.mark.parametrize("seed", [77, 20240601, 5])
    def test_patch_is_continuous_at_the_band_edge(self, seed):
        data = make_logistic(n=1000, seed=seed)
        inference = make_inference("logistic")
        analysis = inference.analyse(data)
        fit = analysis.fit
        se = fit.standard_error()
        edge = inference.epsilon0

        def root_gap(psi):
            constrained = inference.estimator.fit_constrained(data, psi, warm_start=fit)
            return likelihood_root(fit.loglik_at_max, constrained.loglik_profile, fit.psi_hat, psi) - edge

        psi0 = brentq(root_gap, fit.psi_hat - 0.3 * se, fit.psi_hat - 1e-3 * se, xtol=1e-12 * se)
        report = inference.test(data, psi0, analysis)
        assert report.r == pytest.approx(edge, abs=1e-8)
        exact, patched = r_star(report.r, report.q, analysis.linear, epsilon0=0.0)
        assert not patched
        assert abs(exact - analysis.linear.predict(report.r)) <= 5e-4

    def test_to_dict(self, t5_inference, t5_analysis, t5_data):
        payload = t5_inference.test(t5_data, 0.0, t5_analysis).to_dict()
        for key in ("r", "r_star", "r_np", "r_inf", "p_one_sided", "p_two_sided", "near_zero_patched",
                    "linear_representation", "profile"):
            assert key in payload
        assert payload["family"] == LOCATION_SCALE
        linear = t5_analysis.linear
        assert payload["r_star_ratio_form"] == pytest.approx(linear.ratio_form(payload["r"]), rel=1e-12)
        assert payload["r_star_linear"] == pytest.approx(linear.predict(payload["r"]), rel=1e-12)
        # both forms agree to first order in the coefficients
        assert payload["r_star_ratio_form"] == pytest.approx(payload["r_star_linear"], abs=0.05 * (1 + abs(payload["r"])))


class TestConfidenceInterval:
    def test_known_scale_normal_is_wald_interval(self, known_inference, known_analysis, normal_data):
        fit = known_analysis.fit
        se = fit.standard_error()
        z = ndtri(0.975)
        for which in ("r", "r_star"):
            lower, upper = known_inference.confidence_interval(normal_data, which, 0.95, known_analysis)
            assert lower == pytest.approx(fit.psi_hat - z * se, abs=1e-5 * se)
            assert upper == pytest.approx(fit.psi_hat + z * se, abs=1e-5 * se)

    def test_contains_estimate(self, logistic_inference, logistic_analysis, logistic_data):
        psi_hat = logistic_analysis.fit.psi_hat
        lower, upper = logistic_inference.confidence_interval(logistic_data, "r_star", 0.9, logistic_analysis)
        assert lower < psi_hat < upper

    def test_endpoints_solve_the_statistic(self, logistic_inference, logistic_analysis, logistic_data):
        lower, upper = logistic_inference.confidence_interval(logistic_data, "r", 0.95, logistic_analysis)
        z = ndtri(0.975)
        assert logistic_inference.test(logistic_data, lower, logistic_analysis).r == pytest.approx(z, abs=1e-4)
        assert logistic_inference.test(logistic_data, upper, logistic_analysis).r == pytest.approx(-z, abs=1e-4)

    def test_small_sample_r_star_interval_shifts(self):
        x = np.linspace(0.0, 3.0, 30)
        y = np.array([0.0 if i % 3 == 0 else 1.0 for i in range(30)])
        data = Dataset(y, np.column_stack([np.ones(30), x]), ("(intercept)", "x"))
        inference = make_inference("logistic")
        analysis = inference.analyse(data)
        se = analysis.fit.standard_error()
        by_r = inference.confidence_interval(data, "r", 0.95, analysis)
        by_star = inference.confidence_interval(data, "r_star", 0.95, analysis)
        assert by_r[0] < analysis.fit.psi_hat < by_r[1]
        assert by_star[0] < analysis.fit.psi_hat < by_star[1]
        assert max(abs(a - b) for a, b in zip(by_r, by_star)) > 1e-3 * se

    def test_bad_arguments(self, logistic_inference, logistic_data, logistic_analysis):
        with pytest.raises(ConfigError):
            logistic_inference.confidence_interval(logistic_data, "wald", 0.95, logistic_analysis)
        with pytest.raises(ConfigError):
            logistic_inference.confidence_interval(logistic_data, "r", 1.5, logistic_analysis)

    def test_no_bracket(self, monkeypatch, logistic_data, logistic_analysis):
        inference = make_inference("logistic")
        monkeypatch.setattr(inference, "test", lambda *args, **kwargs: SimpleNamespace(r=0.0, r_star=0.0))
        with pytest.raises(BracketError):
            inference.confidence_interval(logistic_data, "r_star", 0.95, logistic_analysis)
