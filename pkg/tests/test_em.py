import numpy as np
import pytest
import statsmodels.api as sm
from numpy.testing import assert_allclose
from scipy import stats
from scipy.special import expit

from bidimix.data import PanelDataset, SubjectRecord, build_dropout_indicators
from bidimix.em import (FitConfig, FitResult, PosteriorWeights, RankDeficientError, e_step, fit,
                        m_step_dropout, m_step_longitudinal, m_step_pi, n_free_params, run_em,
                        push_unbounded_locations, starting_values)
from bidimix.model import observed_loglik
from bidimix.simulate import generate

from conftest import make_spec, small_dataset
from oracles import stacked_logistic, stacked_regression


def _random_weights(rng, n, K1, K2):
    return PosteriorWeights(rng.dirichlet(np.ones(K1 * K2), size=n).reshape(n, K1, K2))


def test_e_step_is_bayes_rule():
    ds, th = small_dataset(1, 20, 4, K1=2, K2=3)
    W = e_step(ds, th).W
    for i, s in enumerate(ds.subjects[:5]):
        f = np.empty((2, 3))
        for g in range(2):
            for l in range(3):
                f[g, l] = th.Pi[g, l] * np.prod(stats.norm.pdf(s.y, th.zeta1[g] + s.X @ th.beta, th.sigma_y)) \
                    * np.prod(stats.bernoulli.pmf(s.r, expit(th.zeta2[l] + s.V @ th.gamma)))
        assert_allclose(W[i], f / f.sum(), rtol=1e-10)


def test_m_step_pi_average_and_floor():
    rng = np.random.default_rng(0)
    w = _random_weights(rng, 50, 2, 3)
    assert_allclose(m_step_pi(w).Pi, w.W.mean(axis=0), rtol=1e-14)
    W = w.W.copy()
    W[:, 0, 0] = 0.0
    W /= W.sum(axis=(1, 2), keepdims=True)
    up = m_step_pi(PosteriorWeights(W), mass_floor=1e-4)
    assert up.Pi[0, 0] == 1e-4 and up.floored[0, 0]
    assert_allclose(up.Pi.sum(), 1.0)
    # free cells keep their relative proportions
    s = W.mean(axis=0)
    ratio = up.Pi[~up.floored] / s[~up.floored]
    assert_allclose(ratio, ratio[0])
    r1 = m_step_pi(w, rank_one=True).Pi
    assert_allclose(r1, np.outer(w.row_marginal.mean(0), w.col_marginal.mean(0)))


@pytest.mark.parametrize("seed", range(3))
def test_m_step_longitudinal_matches_wls(seed):
    rng = np.random.default_rng(seed)
    ds, _ = small_dataset(seed, 60, 4, K1=3, K2=2, p=2)
    w = _random_weights(rng, ds.n, 3, 2)
    up = m_step_longitudinal(ds, w)
    X, y, wt = stacked_regression(ds, w.row_marginal)
    ols = sm.WLS(y, X, weights=wt).fit()
    assert_allclose(up.zeta1, ols.params[:3], rtol=1e-8, atol=1e-10)
    assert_allclose(up.beta, ols.params[3:], rtol=1e-8, atol=1e-10)
    s2 = np.sum(wt * (y - X @ ols.params) ** 2) / wt.sum()
    assert_allclose(up.sigma_y, np.sqrt(s2), rtol=1e-8)


@pytest.mark.parametrize("seed", range(3))
def test_m_step_dropout_matches_glm(seed):
    rng = np.random.default_rng(10 + seed)
    ds, _ = small_dataset(seed, 80, 5, K1=2, K2=3, q=2)
    w = _random_weights(rng, ds.n, 2, 3)
    up = m_step_dropout(ds, w)
    X, r, wt = stacked_logistic(ds, w.col_marginal)
    glm = sm.GLM(r, X, family=sm.families.Binomial(), freq_weights=wt).fit(tol=1e-13, maxiter=200)
    assert up.converged
    assert_allclose(up.zeta2, glm.params[:3], rtol=1e-6, atol=1e-8)
    assert_allclose(up.gamma, glm.params[3:], rtol=1e-6, atol=1e-8)


def test_m_step_dropout_no_events_flagged():
    subs = [SubjectRecord(f"s{i}", [0.1 * i, 0.2], np.zeros((2, 0)), np.ones((2, 1)) * (i % 2),
                          build_dropout_indicators(2, 2), 2, True) for i in range(6)]
    ds = PanelDataset(subs, 2, [], ["v"], {})
    up = m_step_dropout(ds, PosteriorWeights(np.ones((6, 1, 1))))
    assert up.separated[0] and up.zeta2[0] == -30.0


def test_unbounded_location_pushed_to_bound():
    subs = [SubjectRecord(f"s{i}", [0.1 * i, 0.2], np.zeros((2, 0)), np.ones((2, 1)) * (i % 2),
                          build_dropout_indicators(2, 2), 2, True) for i in range(6)]
    ds = PanelDataset(subs, 2, [], ["v"], {})
    from bidimix.model import Theta
    th = Theta([], [0.0], 1.0, [0.0], [-12.0, -5.0], [[0.5, 0.5]])
    pushed, moved = push_unbounded_locations(ds, th)
    assert moved.tolist() == [True, False]
    assert pushed.zeta2[0] == -30.0
    assert observed_loglik(ds, pushed) > observed_loglik(ds, th)
    # a location with a finite optimum is left alone
    same, moved = push_unbounded_locations(ds, th, trigger=20.0)
    assert not moved.any() and same is th


def test_collinear_design_raises():
    subs = [SubjectRecord(f"s{i}", [0.1 * i, 0.3], np.ones((2, 1)), np.zeros((3, 0)),
                          build_dropout_indicators(2, 3), 2, False) for i in range(6)]
    ds = PanelDataset(subs, 3, ["const"], [], {})
    with pytest.raises(RankDeficientError):
        m_step_longitudinal(ds, PosteriorWeights(np.ones((6, 1, 1))))


def test_starting_values_deterministic():
    ds, _ = small_dataset(2, 50, 4)
    a = starting_values(ds, 3, 2, 5, seed=7)
    b = starting_values(ds, 3, 2, 5, seed=7)
    assert len(a) == 5
    for x, y in zip(a, b):
        assert_allclose(x.zeta1, y.zeta1)
        assert_allclose(x.Pi, y.Pi)
        assert x.is_canonical()


@pytest.mark.parametrize("K1, K2, mode", [(2, 2, "MNAR"), (3, 2, "MNAR"), (2, 3, "MAR")])
def test_em_traces_monotone(K1, K2, mode):
    ds, _ = small_dataset(3, 120, 5, K1=2, K2=2)
    cfg = FitConfig(K1, K2, mode, n_starts=3, max_iter=500)
    for th in starting_values(ds, K1, K2, 3):
        run = run_em(ds, th, cfg)
        assert np.min(np.diff(run.trace)) >= -1e-10
    res = fit(ds, cfg)
    assert np.min(np.diff(res.loglik_trace)) >= -1e-10
    assert_allclose(res.loglik, observed_loglik(ds, res.theta), rtol=1e-12)


def test_fit_is_deterministic():
    ds, _ = small_dataset(4, 100, 4)
    cfg = FitConfig(2, 2, "MNAR", n_starts=3, seed=5)
    a, b = fit(ds, cfg), fit(ds, cfg)
    assert a.loglik == b.loglik
    assert_allclose(a.theta.Pi, b.theta.Pi, rtol=0, atol=0)


def test_fit_result_roundtrip():
    ds, _ = small_dataset(4, 80, 4)
    a = fit(ds, FitConfig(2, 1, "MAR", n_starts=2))
    b = FitResult.from_dict(a.to_dict())
    assert b.loglik == a.loglik and b.basis == "mar"
    assert_allclose(b.theta.zeta1, a.theta.zeta1)


def test_single_component_fit_is_ols_plus_logit():
    ds, _ = small_dataset(5, 150, 5, K1=1, K2=1)
    res = fit(ds, FitConfig(1, 1, "MAR", n_starts=1))
    X, y, _ = stacked_regression(ds, np.ones((ds.n, 1)))
    assert_allclose(np.r_[res.theta.zeta1, res.theta.beta], sm.OLS(y, X).fit().params, rtol=1e-9)
    V, r, _ = stacked_logistic(ds, np.ones((ds.n, 1)))
    glm = sm.GLM(r, V, family=sm.families.Binomial()).fit(tol=1e-13)
    assert_allclose(np.r_[res.theta.zeta2, res.theta.gamma], glm.params, rtol=1e-7)
    assert_allclose(res.loglik, sm.OLS(y, X).fit().llf + glm.llf, rtol=1e-10)


@pytest.fixture(scope="module")
def mar_mnar():
    ds = generate(make_spec(21, n=300))
    mar = fit(ds, FitConfig(2, 2, "MAR", n_starts=3))
    frozen = fit(ds, FitConfig(2, 2, "MNAR", n_starts=3, freeze_lambda=True))
    mnar = fit(ds, FitConfig(2, 2, "MNAR", n_starts=3), mar_fit=mar)
    return ds, mar, frozen, mnar


def test_frozen_lambda_reproduces_mar(mar_mnar):
    _, mar, frozen, _ = mar_mnar
    assert_allclose(frozen.loglik, mar.loglik, rtol=1e-8)
    assert frozen.n_params == mar.n_params


def test_mnar_not_below_mar(mar_mnar):
    _, mar, _, mnar = mar_mnar
    assert mnar.loglik >= mar.loglik - 1e-9
    assert mnar.n_params == mar.n_params + 1


def test_mar_mass_matrix_is_rank_one(mar_mnar):
    _, mar, _, _ = mar_mnar
    P = mar.theta.Pi
    assert_allclose(P, np.outer(P.sum(1), P.sum(0)), atol=1e-15)


def test_information_criteria(mar_mnar):
    ds, _, _, mnar = mar_mnar
    k = n_free_params(ds.p, 2, ds.q, 2, False)
    assert mnar.n_params == k == ds.p + 2 + 1 + ds.q + 2 + 3
    assert_allclose(mnar.bic, -2 * mnar.loglik + k * np.log(ds.n))
    assert_allclose(mnar.aic, -2 * mnar.loglik + 2 * k)


def test_config_validation():
    with pytest.raises(ValueError):
        FitConfig(mode="xyz")
    with pytest.raises(ValueError):
        FitConfig(K1=0)
    assert FitConfig(mode="mar").mode == "MAR"
