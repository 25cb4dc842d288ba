import json
import math

import numpy as np
import pytest
from scipy import optimize
from scipy.special import softmax

from hmmar import (
    FitConfig,
    FitFailedError,
    HmMarParams,
    InvalidInputError,
    NumericalFailureError,
    SimSpec,
    TimeSeries,
    e_step,
    emission_density,
    expected_complete_loglik,
    fit,
    init_params,
    m_step,
    ols_ar,
    posteriors,
    run_em,
    simulate_path,
)
import hmmar.em as em


def q_by_summation(series, params, post):
    """Expected complete-data log-likelihood written out term by term."""
    p, K = params.p, params.K
    q = sum(post.gamma[0, k] * math.log(params.rho[k]) for k in range(K) if post.gamma[0, k] > 0)
    for s, t in enumerate(range(p + 1, series.T + 1)):
        x = series.regressor(t, p)
        for k in range(K):
            q += post.gamma[s, k] * math.log(emission_density(series.y(t), x, k, params))
            if s:
                for j in range(K):
                    q += post.xi[s - 1, j, k] * math.log(params.trans[j, k])
    return q


@pytest.fixture
def small_instance(make_params):
    rng = np.random.default_rng(7)
    params = make_params(rng, 2, 1)
    series, _ = simulate_path(SimSpec(params, T=40, seed=7))
    return series, params


class TestQFunction:
    def test_finite(self, small_instance):
        series, params = small_instance
        post = e_step(series, params)
        assert np.isfinite(expected_complete_loglik(series, params, post))

    def test_matches_direct_summation(self, small_instance):
        series, params = small_instance
        post = e_step(series, params)
        assert expected_complete_loglik(series, params, post) == pytest.approx(
            q_by_summation(series, params, post), rel=1e-12
        )

    def test_single_state_is_complete_loglik(self):
        params = HmMarParams(coeffs=[[0.2, 0.5]], sigmas=[0.9], rho=[1.0], trans=[[1.0]])
        y = np.random.default_rng(1).normal(size=20)
        post = e_step(y, params)
        assert expected_complete_loglik(y, params, post) == pytest.approx(posteriors(y, params).loglik, rel=1e-13)


class TestMStep:
    def test_noiseless_linear_data(self):
        y = [0.0]
        for _ in range(14):
            y.append(2.0 + 0.5 * y[-1])
        start = HmMarParams(coeffs=[[0.0, 0.0]], sigmas=[1.0], rho=[1.0], trans=[[1.0]])
        notes = []
        new = m_step(y, e_step(y, start), start, FitConfig(), notes)
        np.testing.assert_allclose(new.coeffs[0], [2.0, 0.5], atol=1e-9)
        assert new.sigmas[0] == pytest.approx(math.sqrt(1e-10 * np.var(y)), rel=1e-12)
        assert any("variance floor" in n for n in notes)

    def test_single_state_is_ols(self):
        y = np.random.default_rng(2).normal(size=80).cumsum() * 0.1
        start = HmMarParams(coeffs=[[0.0, 0.0, 0.0]], sigmas=[1.0], rho=[1.0], trans=[[1.0]])
        new = m_step(y, e_step(y, start), start)
        X, target = TimeSeries(y).design(2)
        np.testing.assert_allclose(new.coeffs[0], np.linalg.lstsq(X, target, rcond=None)[0], rtol=1e-10)

    def test_blocks_match_numeric_maximisation(self, make_params):
        rng = np.random.default_rng(8)
        K, p = 2, 1
        params = make_params(rng, K, p)
        series, _ = simulate_path(SimSpec(params, T=60, seed=8))
        post = e_step(series, params)
        new = m_step(series, post, params)

        def q(**changes):
            return expected_complete_loglik(series, new.replace(**changes), post)

        for k in range(K):
            def neg_a(a, k=k):
                coeffs = np.array(new.coeffs)
                coeffs[k] = a
                return -q(coeffs=coeffs)

            res = optimize.minimize(neg_a, np.zeros(p + 1), method="BFGS", options={"gtol": 1e-10})
            np.testing.assert_allclose(new.coeffs[k], res.x, atol=1e-6)

            def neg_s(log_s, k=k):
                sig = np.array(new.sigmas)
                sig[k] = math.exp(log_s)
                return -q(sigmas=sig)

            res = optimize.minimize_scalar(neg_s, bounds=(-10, 5), method="bounded", options={"xatol": 1e-12})
            assert new.sigmas[k] == pytest.approx(math.exp(res.x), abs=1e-6)

            def neg_row(u, k=k):
                trans = np.array(new.trans)
                trans[k] = softmax(np.append(u, 0.0))
                return -q(trans=trans)

            res = optimize.minimize(neg_row, np.zeros(K - 1), method="BFGS", options={"gtol": 1e-12})
            np.testing.assert_allclose(new.trans[k], softmax(np.append(res.x, 0.0)), atol=1e-6)

        res = optimize.minimize(lambda u: -q(rho=softmax(np.append(u, 0.0))), np.zeros(K - 1),
                                method="BFGS", options={"gtol": 1e-12})
        np.testing.assert_allclose(new.rho, softmax(np.append(res.x, 0.0)), atol=1e-6)

    def test_normal_equations_hold(self, make_params):
        rng = np.random.default_rng(9)
        params = make_params(rng, 3, 2)
        series, _ = simulate_path(SimSpec(params, T=200, seed=9))
        post = e_step(series, params)
        new = m_step(series, post, params)
        X, y = series.design(2)
        for k in range(3):
            g = post.gamma[:, k]
            rhs = X.T @ (g * y)
            resid = rhs - X.T @ (g * (X @ new.coeffs[k]))
            assert np.linalg.norm(resid) <= 1e-8 * np.linalg.norm(rhs)

    def test_stochastic_blocks_exact(self, small_instance):
        series, params = small_instance
        new = m_step(series, e_step(series, params), params)
        np.testing.assert_allclose(new.trans.sum(axis=1), 1.0, atol=1e-12)
        assert abs(new.rho.sum() - 1.0) <= 1e-12

    def test_rho_update_variants(self, small_instance):
        series, params = small_instance
        post = e_step(series, params)
        first = m_step(series, post, params, FitConfig(rho_update="first"))
        occ = m_step(series, post, params, FitConfig(rho_update="occupancy"))
        np.testing.assert_allclose(first.rho, post.gamma[0], atol=1e-15)
        np.testing.assert_allclose(occ.rho, post.gamma.sum(axis=0) / post.gamma.shape[0], atol=1e-15)
        np.testing.assert_array_equal(first.coeffs, occ.coeffs)

    def test_transition_denominator(self, small_instance):
        series, params = small_instance
        post = e_step(series, params)
        new = m_step(series, post, params)
        expected = post.xi.sum(axis=0) / post.gamma[:-1].sum(axis=0)[:, None]
        np.testing.assert_allclose(new.trans, expected, atol=1e-12)

    def test_empty_component_is_frozen(self, small_instance):
        series, params = small_instance
        post = e_step(series, params)
        gamma = np.zeros_like(post.gamma)
        gamma[:, 0] = 1.0
        xi = np.zeros_like(post.xi)
        xi[:, 0, 0] = 1.0
        notes = []
        new = m_step(series, type(post)(gamma, xi), params, FitConfig(), notes)
        np.testing.assert_array_equal(new.coeffs[1], params.coeffs[1])
        assert new.sigmas[1] == params.sigmas[1]
        np.testing.assert_array_equal(new.trans[1], params.trans[1])
        assert any("empty component 2" in n for n in notes)

    def test_collinear_lags_get_ridge(self):
        y = np.tile([1.0, 3.0], 20)
        start = HmMarParams(coeffs=[[0.0, 0.0, 0.0]], sigmas=[1.0], rho=[1.0], trans=[[1.0]])
        notes = []
        new = m_step(y, e_step(y, start), start, FitConfig(), notes)
        assert any("ridge" in n for n in notes)
        X, target = TimeSeries(y).design(2)
        np.testing.assert_allclose(X @ new.coeffs[0], target, atol=1e-6)

    def test_singular_beyond_rescue(self, monkeypatch):
        monkeypatch.setattr(em, "SINGULAR_COND", 0.5)
        y = np.random.default_rng(3).normal(size=30)
        start = HmMarParams(coeffs=[[0.0, 0.0]], sigmas=[1.0], rho=[1.0], trans=[[1.0]])
        with pytest.raises(NumericalFailureError, match="component 1") as info:
            m_step(y, e_step(y, start), start)
        assert info.value.component == 1

    def test_rejects_mismatched_posteriors(self, small_instance):
        series, params = small_instance
        post = e_step(series.values[:-3], params)
        with pytest.raises(InvalidInputError):
            m_step(series, post, params)


class TestPerturbation:
    @pytest.mark.parametrize("seed", range(3))
    def test_q_not_improved(self, make_params, seed):
        rng = np.random.default_rng(seed)
        params = make_params(rng, 3, 1)
        series, _ = simulate_path(SimSpec(params, T=150, seed=seed))
        post = e_step(series, params)
        new = m_step(series, post, params)
        q0 = expected_complete_loglik(series, new, post)
        for cand in _perturbations(new, 1e-4):
            assert expected_complete_loglik(series, cand, post) <= q0 + 1e-8


def _perturbations(params, eps):
    for delta in (eps, -eps):
        for k in range(params.K):
            for i in range(params.p + 1):
                c = np.array(params.coeffs)
                c[k, i] += delta
                yield params.replace(coeffs=c)
            s = np.array(params.sigmas)
            s[k] += delta
            yield params.replace(sigmas=s)
            for j in range(params.K):
                t = np.array(params.trans)
                t[k, j] = max(t[k, j] + delta, 0.0)
                t[k] /= t[k].sum()
                yield params.replace(trans=t)
            r = np.array(params.rho)
            r[k] = max(r[k] + delta, 0.0)
            yield params.replace(rho=r / r.sum())


class TestInit:
    def test_single_component_is_ols(self):
        y = np.random.default_rng(4).normal(size=50)
        start = init_params(y, 1, 2, np.random.default_rng(0))
        coef, sigma, _ = ols_ar(y, 2)
        np.testing.assert_array_equal(start.coeffs[0], coef)
        assert start.sigmas[0] == sigma

    def test_same_seed_same_start(self):
        y = np.random.default_rng(5).normal(size=50)
        a = init_params(y, 3, 1, np.random.default_rng(42))
        b = init_params(y, 3, 1, np.random.default_rng(42))
        assert a == b

    def test_restarts_differ(self):
        y = np.random.default_rng(6).normal(size=50)
        seeds = np.random.SeedSequence(0).spawn(5)
        starts = [init_params(y, 2, 1, np.random.default_rng(s)) for s in seeds]
        for i in range(5):
            for j in range(i + 1, 5):
                assert not np.array_equal(starts[i].coeffs, starts[j].coeffs)

    def test_valid_and_plausible(self):
        y = np.random.default_rng(7).normal(size=100)
        start = init_params(y, 4, 2, np.random.default_rng(1))
        _, sigma, _ = ols_ar(y, 2)
        assert np.all(start.sigmas >= 0.5 * sigma) and np.all(start.sigmas <= 2 * sigma)
        np.testing.assert_array_equal(start.rho, 0.25)
        assert np.all(start.trans >= 0.5 / 4)


class TestFit:
    def test_single_component_ols(self):
        y = np.random.default_rng(10).normal(size=300)
        report = fit(y, 1, 2)
        coef, sigma, _ = ols_ar(y, 2)
        np.testing.assert_allclose(report.params.coeffs[0], coef, atol=1e-8)
        assert report.params.sigmas[0] == pytest.approx(sigma, rel=1e-10)
        assert report.converged and report.iterations == 1
        assert len(report.loglik_trace) == 2

    def test_monotone_on_many_instances(self, two_state):
        for seed in range(20):
            series, _ = simulate_path(SimSpec(two_state, T=150, seed=seed))
            report = run_em(series, init_params(series, 2, 1, np.random.default_rng(seed)))
            assert np.all(np.diff(report.loglik_trace) >= -1e-9)

    def test_deterministic_and_parallel_parity(self, two_state):
        series, _ = simulate_path(SimSpec(two_state, T=300, seed=1))
        cfg = FitConfig(seed=3, n_restarts=4)
        a = fit(series, 2, 1, cfg)
        b = fit(series, 2, 1, cfg)
        c = fit(series, 2, 1, cfg, n_jobs=4)
        assert a.to_json() == b.to_json() == c.to_json()

    def test_permutation_equivariance(self, two_state):
        series, _ = simulate_path(SimSpec(two_state, T=400, seed=2))
        start = init_params(series, 2, 1, np.random.default_rng(9))
        a = run_em(series, start).params
        b = run_em(series, start.permute([1, 0])).params
        back = b.permute([1, 0])
        for name in ("coeffs", "sigmas", "rho", "trans"):
            np.testing.assert_allclose(getattr(back, name), getattr(a, name), atol=1e-7)

    def test_refit_is_fixed_point(self, two_state):
        series, _ = simulate_path(SimSpec(two_state, T=500, seed=4))
        cfg = FitConfig()
        first = fit(series, 2, 1, cfg)
        again = fit(series, 2, 1, cfg, init=first.params)
        assert abs(again.loglik - first.loglik) / (1 + abs(first.loglik)) < cfg.tol

    def test_best_restart_selected(self, two_state):
        series, _ = simulate_path(SimSpec(two_state, T=300, seed=5))
        report = fit(series, 2, 1, FitConfig(n_restarts=4, seed=1))
        assert len(report.restart_logliks) == 4
        assert report.loglik == max(report.restart_logliks)
        assert report.restart_logliks[report.best_restart] == report.loglik

    def test_all_restarts_failing(self, monkeypatch):
        def boom(series, start, cfg):
            raise NumericalFailureError("boom")

        monkeypatch.setattr(em, "run_em", boom)
        with pytest.raises(FitFailedError) as info:
            fit(np.random.default_rng(0).normal(size=50), 2, 1, FitConfig(n_restarts=3))
        assert len(info.value.failures) == 3

    def test_partial_failure_is_reported(self, monkeypatch, two_state):
        real = em.run_em
        calls = []

        def flaky(series, start, cfg):
            calls.append(1)
            if len(calls) == 1:
                raise NumericalFailureError("boom")
            return real(series, start, cfg)

        monkeypatch.setattr(em, "run_em", flaky)
        series, _ = simulate_path(SimSpec(two_state, T=200, seed=6))
        report = fit(series, 2, 1, FitConfig(n_restarts=2))
        assert report.restart_logliks[0] == -math.inf
        assert report.best_restart == 1
        assert any("restart 0 failed" in w for w in report.warnings)
        assert json.loads(report.to_json())["restart_logliks"][0] is None

    def test_too_short(self):
        with pytest.raises(InvalidInputError):
            fit([1.0, 2.0], 2, 1)

    def test_config_validation(self):
        with pytest.raises(InvalidInputError):
            FitConfig(max_iters=0)
        with pytest.raises(InvalidInputError):
            FitConfig(tol=0.0)
        with pytest.raises(InvalidInputError):
            FitConfig(rho_update="last")

    def test_report_json(self, two_state):
        series, _ = simulate_path(SimSpec(two_state, T=200, seed=7))
        report = fit(series, 2, 1, FitConfig(n_restarts=2))
        doc = json.loads(report.to_json())
        assert doc["n_params"] == 10 and doc["n_free_params"] == 7
        for key in ("loglik_trace", "converged", "iterations", "warnings", "restart_logliks"):
            assert key in doc
        reloaded = HmMarParams.from_dict(doc)
        np.testing.assert_array_equal(reloaded.coeffs, report.params.coeffs)
        assert "component 1" in report.summary()
