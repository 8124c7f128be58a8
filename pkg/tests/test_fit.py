import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sepmodel.errors import NonConvergenceError
from sepmodel.fit import (
    BootstrapTable,
    ContextualProblem,
    FitResult,
    bootstrap_significance,
    coefficient_signs,
    featureless_objective,
    featureless_params,
    featureless_theta,
    fit_contextual,
    fit_featureless,
    gaps_to_rates,
    project_gamma_jac,
    rates_to_gaps,
    stick_breaking,
    beta_to_logits,
)
from sepmodel.likelihood import ObservationSet, RegressionCoefficients, featureless_loglik
from sepmodel.optim import check_gradient
from sepmodel.phase_type import CoxianParams, FitConfig
from sepmodel.simulate import ClientModel, sample_observations

from conftest import FEATURELESS


@pytest.fixture(scope="module")
def featureless_data():
    rng = np.random.default_rng(77)
    return sample_observations(FEATURELESS, rng.uniform(0, 400, 3000), 700, rng)


@pytest.fixture(scope="module")
def contextual_data():
    rng = np.random.default_rng(78)
    V = 800
    X = np.column_stack((rng.standard_normal(V), rng.binomial(1, 0.4, V)))
    truth = RegressionCoefficients.featureless(FEATURELESS, ("a", "b"))
    truth.rho[1:] = [0.6, -0.5]
    truth.g[0, 1] = 0.006
    model = ClientModel.from_coefficients(truth, X)
    obs = sample_observations(model, rng.uniform(0, 1500, V), 2310, rng)
    return obs, X, truth


class TestReparametrization:
    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-8, 8), min_size=1, max_size=3))
    def test_stick_breaking_on_simplex(self, z):
        beta, _ = stick_breaking(np.array(z))
        assert np.all(beta >= 0)
        assert beta.sum() == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(beta_to_logits(beta), z, atol=1e-6)

    def test_stick_breaking_jacobian(self):
        z = np.array([0.3, -1.2])
        _, jac = stick_breaking(z)
        h = 1e-7
        for l in range(2):
            e = np.zeros(2)
            e[l] = h
            fd = (stick_breaking(z + e)[0] - stick_breaking(z - e)[0]) / (2 * h)
            np.testing.assert_allclose(jac[:, l], fd, rtol=1e-6, atol=1e-10)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-12, 2), min_size=1, max_size=3))
    def test_rates_feasible_and_invertible(self, u):
        cfg = FitConfig()
        gamma, _ = gaps_to_rates(np.array(u), cfg)
        CoxianParams(np.full(len(u), 1 / len(u)), gamma).check_feasible(cfg, slack=1e-15)
        np.testing.assert_allclose(rates_to_gaps(gamma, cfg), u, atol=1e-6)

    def test_params_round_trip(self):
        back = featureless_params(featureless_theta(FEATURELESS))
        np.testing.assert_allclose(back.beta, FEATURELESS.beta, rtol=1e-12)
        np.testing.assert_allclose(back.gamma, FEATURELESS.gamma, rtol=1e-12)
        assert back.exit_p == pytest.approx(FEATURELESS.exit_p)

    def test_projection_jacobian(self):
        cfg = FitConfig()
        G = np.array([[0.05, 0.003], [0.004, 0.002], [0.01, 0.0001]])
        _, J = project_gamma_jac(G, cfg)
        h = 1e-9
        for k in range(2):
            e = np.zeros_like(G)
            e[:, k] = h
            fd = (project_gamma_jac(G + e, cfg)[0] - project_gamma_jac(G - e, cfg)[0]) / (2 * h)
            np.testing.assert_allclose(J[:, :, k], fd, atol=1e-6)


class TestFeaturelessFit:
    def test_gradient(self, featureless_data):
        fun = featureless_objective(featureless_data)
        assert check_gradient(fun, featureless_theta(FEATURELESS)) < 1e-5

    def test_objective_matches_loglik(self, featureless_data):
        val, _ = featureless_objective(featureless_data)(featureless_theta(FEATURELESS))
        ref = featureless_loglik(FEATURELESS.beta, FEATURELESS.gamma, FEATURELESS.exit_p,
                                 featureless_data)
        assert val == pytest.approx(ref, rel=1e-10)

    def test_fit(self, featureless_data):
        res = fit_featureless(featureless_data, seed=1)
        p = res.params_or_coeffs
        assert res.converged
        assert np.all(np.diff(res.objective_trace) >= 0)
        assert len(res.start_objectives) == FitConfig().n_starts
        assert res.objective >= max(res.start_objectives) - 1e-9
        # the truth cannot beat the maximum
        ref = featureless_loglik(FEATURELESS.beta, FEATURELESS.gamma, FEATURELESS.exit_p,
                                 featureless_data)
        assert res.objective >= ref
        p.check_feasible(FitConfig())
        assert p.beta[0] == pytest.approx(0.8194, abs=0.05)
        assert p.gamma[0] == pytest.approx(0.052, rel=0.1)
        assert p.exit_p == pytest.approx(0.0981, abs=0.02)

    def test_time_unit_invariance(self, featureless_data):
        # refitting in hours scales the rates by 1/24 and leaves the likelihood shape alone
        days = fit_featureless(featureless_data, seed=1).params_or_coeffs
        cfg = FitConfig().scaled(24.0)
        hours = fit_featureless(featureless_data.scaled(24.0), cfg, seed=1).params_or_coeffs
        np.testing.assert_allclose(hours.gamma * 24.0, days.gamma, rtol=1e-3)
        np.testing.assert_allclose(hours.beta, days.beta, atol=1e-3)

    def test_single_phase_closed_form(self):
        # one phase: MLE rate is (#uncensored) / (total exposure) when p is free
        rng = np.random.default_rng(5)
        t = rng.exponential(20.0, 4000)
        obs = ObservationSet(t, np.zeros(len(t), dtype=int), [], [])
        cfg = FitConfig(n_phases=1)
        res = fit_featureless(obs, cfg)
        assert res.params_or_coeffs.gamma[0] == pytest.approx(len(t) / t.sum(), rel=1e-4)

    def test_result_json(self, featureless_data):
        res = fit_featureless(featureless_data, FitConfig(n_starts=2))
        back = FitResult.from_json(json.loads(res.dumps()))
        assert back.params_or_coeffs == res.params_or_coeffs
        assert back.objective_trace == res.objective_trace

    def test_empty(self):
        with pytest.raises(ValueError):
            fit_featureless(ObservationSet.empty())


class TestContextualFit:
    def test_gradient(self, contextual_data):
        obs, X, _ = contextual_data
        prob = ContextualProblem(obs, X, FEATURELESS, FitConfig())
        rng = np.random.default_rng(0)
        theta = prob.initial() + rng.normal(0, 0.01, prob.initial().shape)
        assert check_gradient(lambda th: prob.evaluate(th), theta, h=1e-4) < 1e-3

    def test_recovers_signs(self, contextual_data):
        obs, X, truth = contextual_data
        res = fit_contextual(obs, X, FEATURELESS, feature_names=("a", "b"))
        c = res.params_or_coeffs
        assert res.converged
        assert np.all(np.diff(res.objective_trace) >= 0)
        assert c.rho[1] > 0.3 and c.rho[2] < -0.2
        assert c.g[0, 1] > 0
        # intercepts stay fixed
        np.testing.assert_array_equal(c.b[:, 0], FEATURELESS.beta)
        np.testing.assert_array_equal(c.g[:, 0], FEATURELESS.gamma)
        assert res.per_client_beta.shape == (obs.n_clients, 2)
        np.testing.assert_allclose(res.per_client_beta.sum(axis=1), 1.0)

    def test_coefficient_signs_columns(self, contextual_data):
        _, _, truth = contextual_data
        cols, vals = coefficient_signs(truth)
        assert cols == ("rho", "b1", "g1", "g2", "Delta", "T")
        assert vals.shape == (2, 6)
        assert vals[0, 0] == 0.6 and vals[0, 2] == 0.006
        # a faster active rate shortens the mean gap
        assert vals[0, 4] < 0


class TestBootstrap:
    def test_small_bootstrap(self, contextual_data):
        obs, X, _ = contextual_data
        tab = bootstrap_significance(obs, X, FEATURELESS, B=6, seed=3, feature_names=("a", "b"))
        assert tab.B == 6 and tab.n_failed == 0
        assert tab.count("a", "rho") == 6
        assert tab.count("b", "rho") == 0
        assert "Factor" in tab.format()
        again = bootstrap_significance(obs, X, FEATURELESS, B=6, seed=3, feature_names=("a", "b"))
        np.testing.assert_array_equal(tab.counts, again.counts)

    def test_parallel_matches_serial(self, contextual_data):
        obs, X, _ = contextual_data
        a = bootstrap_significance(obs, X, FEATURELESS, B=3, seed=9)
        b = bootstrap_significance(obs, X, FEATURELESS, B=3, seed=9, n_jobs=2)
        np.testing.assert_array_equal(a.counts, b.counts)

    def test_too_many_failures(self, contextual_data, monkeypatch):
        import sepmodel.fit as fit_mod

        def broken(*args, **kwargs):
            raise NonConvergenceError("forced")

        monkeypatch.setattr(fit_mod, "fit_contextual", broken)
        obs, X, _ = contextual_data
        with pytest.raises(NonConvergenceError):
            bootstrap_significance(obs, X, FEATURELESS, B=5)

    def test_table_significance(self):
        tab = BootstrapTable(("a",), ("rho", "T"), np.array([[95, 50]]), 100, 0)
        np.testing.assert_array_equal(tab.significant, [[True, False]])
        assert tab.to_json()["rows"][0]["rho"] == 95

    def test_exact_zeros_are_not_significant(self):
        # a feature constant in the data keeps a zero coefficient in every refit
        tab = BootstrapTable(("const",), ("rho",), np.array([[0]]), 50, 0, np.array([[0]]))
        assert not tab.significant[0, 0]
        assert tab.to_json()["rows"][0]["negative"]["rho"] == 0
