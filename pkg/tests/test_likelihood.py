import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import linalg
from scipy.special import expit

from sepmodel.errors import (
    DataFormatError,
    DomainError,
    InfiniteSojournError,
    LogDomainError,
    ParameterDomainError,
)
from sepmodel.likelihood import (
    ObservationSet,
    RegressionCoefficients,
    contextual_objective,
    delta_inter_arrival,
    delta_sojourn,
    expected_sojourn,
    featureless_loglik,
    hypo_terms,
    obs_terms,
    predict_arrays,
    predict_client_params,
    project_beta,
    project_gamma,
)
from sepmodel.phase_type import CoxianParams, FitConfig, GeneratorMatrix, coxian_mean

from conftest import FEATURELESS, random_coxian


def small_obs():
    return ObservationSet([3.0, 40.0, 7.5, 120.0, 1.0], [0, 0, 1, 2, 2],
                          [10.0, 300.0, 55.0], [0, 1, 2])


def expm_loglik(params, p, obs):
    """Reference log-likelihood through the generator matrix."""
    gen = GeneratorMatrix.from_coxian(params)
    one = np.ones(params.n)
    total = 0.0
    for t in obs.uncensored_t:
        total += math.log(gen.alpha @ linalg.expm(gen.Q * t) @ gen.a) + math.log1p(-p)
    for t in obs.censored_t:
        sf = gen.alpha @ linalg.expm(gen.Q * t) @ one
        total += math.log(sf * (1 - p) + p)
    return total


class TestObservationSet:
    def test_lengths_and_clients(self):
        obs = small_obs()
        assert len(obs) == 8
        assert obs.n_clients == 3

    def test_rejects_duplicate_censoring(self):
        with pytest.raises(DomainError):
            ObservationSet([], [], [1.0, 2.0], [0, 0])

    def test_rejects_negative_time(self):
        with pytest.raises(DomainError):
            ObservationSet([-1.0], [0], [], [])

    def test_subset_duplicates_clients(self):
        sub = small_obs().subset_clients([2, 2, 0])
        assert sub.n_clients == 3
        assert len(sub.uncensored_t) == 2 + 2 + 2
        np.testing.assert_array_equal(np.sort(sub.censored_t), [10.0, 55.0, 55.0])

    def test_csv_round_trip(self, tmp_path):
        obs = ObservationSet([1.5, 2.25], [0, 1], [3.0, 4.0], [0, 1], client_ids=["a", "b"])
        obs.to_csv(tmp_path)
        assert ObservationSet.from_csv(tmp_path).same_as(obs)

    def test_csv_bad_header(self, tmp_path):
        (tmp_path / "uncensored.csv").write_text("id,t\n")
        (tmp_path / "censored.csv").write_text("client_id,gap_days\n")
        with pytest.raises(DataFormatError, match="line 1"):
            ObservationSet.from_csv(tmp_path)


class TestFeaturelessLoglik:
    def test_against_matrix_exponential(self, rng):
        obs = small_obs()
        for _ in range(10):
            params = random_coxian(rng)
            p = rng.uniform(0.01, 0.5)
            ll = featureless_loglik(params.beta, params.gamma, p, obs)
            assert ll == pytest.approx(expm_loglik(params, p, obs), rel=1e-10)

    def test_hand_computed_single_phase(self):
        obs = ObservationSet([2.0], [0], [5.0], [0])
        lam, p = 0.3, 0.2
        ref = math.log(lam) - 2 * lam + math.log(0.8) + math.log(math.exp(-5 * lam) * 0.8 + 0.2)
        assert featureless_loglik([1.0], [lam], p, obs) == pytest.approx(ref, rel=1e-14)

    def test_empty_is_zero(self):
        assert featureless_loglik([1.0], [0.1], 0.1, ObservationSet.empty()) == 0.0

    def test_exit_probability_one(self):
        # certain exit: any uncensored gap is impossible
        with pytest.raises(LogDomainError) as info:
            featureless_loglik([1.0], [0.1], 1.0, ObservationSet([1.0], [0], [2.0], [0]))
        assert info.value.kind == "uncensored"

    def test_censored_underflow_reported(self):
        obs = ObservationSet([], [], [1e5], [0])
        with pytest.raises(LogDomainError) as info:
            featureless_loglik([1.0], [1.0], 0.0, obs)
        assert info.value.kind == "censored" and info.value.index == 0

    def test_invalid_p(self):
        with pytest.raises(ParameterDomainError):
            featureless_loglik([1.0], [0.1], -0.1, small_obs())

    @settings(max_examples=40, deadline=None)
    @given(st.floats(0.01, 0.9), st.floats(0.001, 0.2), st.floats(1.5, 30.0))
    def test_more_censoring_never_hurts_a_higher_exit(self, p, g2, ratio):
        # the censored term S(1-p) + p is increasing in p
        params = CoxianParams([0.7, 0.3], [g2 * ratio, g2])
        obs = ObservationSet([], [], [50.0], [0])
        lo = featureless_loglik(params.beta, params.gamma, p, obs)
        hi = featureless_loglik(params.beta, params.gamma, min(p + 0.05, 1.0), obs)
        assert hi >= lo - 1e-12


class TestGradients:
    def test_hypo_terms_derivatives(self, rng):
        gamma = np.array([[0.2, 0.05, 0.01]])
        t = np.array([17.0])
        f, S, df, dS = hypo_terms(gamma, t, grad=True)
        h = 1e-7
        for m in range(3):
            e = np.zeros_like(gamma)
            e[0, m] = h
            fp, Sp = hypo_terms(gamma + e, t)
            fm, Sm = hypo_terms(gamma - e, t)
            np.testing.assert_allclose(df[0, :, m], (fp - fm)[0] / (2 * h), rtol=1e-5, atol=1e-12)
            np.testing.assert_allclose(dS[0, :, m], (Sp - Sm)[0] / (2 * h), rtol=1e-5, atol=1e-12)

    def test_obs_terms_derivatives(self):
        beta = np.array([[0.6, 0.4], [0.6, 0.4]])
        gamma = np.array([[0.05, 0.004], [0.05, 0.004]])
        p = np.array([0.1, 0.1])
        t = np.array([20.0, 200.0])
        cens = np.array([False, True])
        ll, db, dg, dp = obs_terms(beta, gamma, p, t, cens, grad=True)
        h = 1e-7
        for k in range(2):
            e = np.zeros_like(beta)
            e[:, k] = h
            fd = (obs_terms(beta + e, gamma, p, t, cens) - obs_terms(beta - e, gamma, p, t, cens)) / (2 * h)
            np.testing.assert_allclose(db[:, k], fd, rtol=1e-5)
            e = np.zeros_like(gamma)
            e[:, k] = 1e-9
            fd = (obs_terms(beta, gamma + e, p, t, cens) - obs_terms(beta, gamma - e, p, t, cens)) / 2e-9
            np.testing.assert_allclose(dg[:, k], fd, rtol=1e-4)
        fd = (obs_terms(beta, gamma, p + h, t, cens) - obs_terms(beta, gamma, p - h, t, cens)) / (2 * h)
        np.testing.assert_allclose(dp, fd, rtol=1e-5)


class TestPrediction:
    def test_projection_onto_simplex(self):
        B = project_beta(np.array([[1.2, -0.1], [0.5, 0.5], [-1.0, -2.0]]))
        np.testing.assert_allclose(B, [[1.0, 0.0], [0.5, 0.5], [0.5, 0.5]])

    def test_projection_of_rates(self):
        cfg = FitConfig()
        G = project_gamma(np.array([[0.004, 0.0001]]), cfg)
        np.testing.assert_allclose(G, [[cfg.gamma_floor + cfg.delta, cfg.gamma_floor]])

    def test_zero_features_give_intercepts(self):
        coeffs = RegressionCoefficients.featureless(FEATURELESS, ("a", "b"))
        p = predict_client_params(coeffs, np.zeros(2))
        np.testing.assert_array_equal(p.beta, FEATURELESS.beta)
        np.testing.assert_array_equal(p.gamma, FEATURELESS.gamma)
        assert p.exit_p == pytest.approx(FEATURELESS.exit_p, rel=1e-14)

    def test_logistic_exit(self):
        coeffs = RegressionCoefficients.featureless(FEATURELESS, ("a",))
        coeffs.rho[1] = 0.7
        _, _, p = predict_arrays(coeffs, np.array([[1.0], [-2.0]]))
        np.testing.assert_allclose(p, expit(coeffs.rho[0] + np.array([0.7, -1.4])))

    def test_large_projection_warns(self):
        coeffs = RegressionCoefficients.featureless(FEATURELESS, ("a",))
        coeffs.b[:, 1] = [0.5, -0.5]
        with pytest.warns(RuntimeWarning):
            predict_client_params(coeffs, [1.0])

    def test_json_round_trip(self, tmp_path):
        coeffs = RegressionCoefficients.featureless(FEATURELESS, ("a", "b"))
        coeffs.g[0, 2] = 0.001
        coeffs.save(tmp_path / "c.json")
        back = RegressionCoefficients.load(tmp_path / "c.json")
        np.testing.assert_array_equal(back.g, coeffs.g)
        assert back.feature_names == ("a", "b")

    def test_shape_checks(self):
        with pytest.raises(DomainError):
            RegressionCoefficients(np.zeros((2, 3)), np.zeros((2, 2)), np.zeros(3))


class TestSojourn:
    def test_featureless_value(self):
        # mean gap times expected number of returns (1 - p) / p
        expect = coxian_mean(FEATURELESS) * (1 - 0.0981) / 0.0981
        assert expected_sojourn(FEATURELESS) == pytest.approx(expect, rel=1e-12)
        assert expected_sojourn(FEATURELESS) == pytest.approx(730.3, abs=0.1)

    def test_never_leaving(self):
        with pytest.raises(InfiniteSojournError):
            expected_sojourn(FEATURELESS.with_exit_p(0.0))

    def test_deltas(self):
        coeffs = RegressionCoefficients.featureless(FEATURELESS, ("a", "b"))
        coeffs.g[1, 1] = -0.001
        coeffs.rho[2] = 0.5
        one = CoxianParams(FEATURELESS.beta, [0.052, 0.002], FEATURELESS.exit_p)
        assert delta_inter_arrival(coeffs, 1) == pytest.approx(
            coxian_mean(one) - coxian_mean(FEATURELESS), rel=1e-12)
        assert delta_inter_arrival(coeffs, 2) == 0.0
        assert delta_sojourn(coeffs, 2) < 0
        with pytest.raises(DomainError):
            delta_inter_arrival(coeffs, 3)


class TestContextualObjective:
    def test_reduces_to_featureless(self):
        obs = small_obs()
        coeffs = RegressionCoefficients.featureless(FEATURELESS, ("a",))
        X = np.array([[0.3], [-1.0], [2.0]])
        beta = np.tile(FEATURELESS.beta, (3, 1))
        val = contextual_objective(coeffs, beta, None, obs, X)
        ref = featureless_loglik(FEATURELESS.beta, FEATURELESS.gamma, FEATURELESS.exit_p, obs)
        assert val.loglik == pytest.approx(ref, rel=1e-12)
        assert val.total == pytest.approx(ref, rel=1e-12)

    def test_penalties(self):
        obs = small_obs()
        cfg = FitConfig()
        coeffs = RegressionCoefficients.featureless(FEATURELESS, ("a",))
        coeffs.b[:, 1] = [0.01, -0.01]
        coeffs.g[0, 1] = 0.002
        coeffs.rho[1] = 0.3
        X = np.array([[1.0], [0.0], [0.0]])
        beta = np.tile(FEATURELESS.beta, (3, 1))
        val = contextual_objective(coeffs, beta, None, obs, X, cfg)
        assert val.penalty_b == pytest.approx(cfg.eta_b * 2e-4)
        assert val.penalty_g == pytest.approx(cfg.eta_g * 4e-6)
        assert val.penalty_rho == pytest.approx(cfg.eta_rho * 0.09)
        assert val.penalty_eps == pytest.approx(cfg.eta_beta * 2e-4)
        assert val.total == pytest.approx(
            val.loglik - val.penalty_eps - val.penalty_b - val.penalty_g - val.penalty_rho)

    def test_rejects_off_simplex_beta(self):
        coeffs = RegressionCoefficients.featureless(FEATURELESS, ("a",))
        with pytest.raises(ParameterDomainError):
            contextual_objective(coeffs, np.full((3, 2), 0.6), None, small_obs(), np.zeros((3, 1)))

    def test_shape_mismatch(self):
        coeffs = RegressionCoefficients.featureless(FEATURELESS, ("a",))
        with pytest.raises(DomainError):
            contextual_objective(coeffs, np.full((3, 2), 0.5), None, small_obs(), np.zeros((2, 1)))
