import numpy as np
import pandas as pd
import pytest
import statsmodels.api as sm
from numpy.testing import assert_allclose

from bidimix.derivatives import derivatives
from bidimix.em import FitConfig, fit
from bidimix.inference import (mass_table, moments_with_se, observed_information,
                               sandwich_covariance, se_table, subject_scores)
from bidimix.model import ParamLayout, Theta, observed_loglik
from bidimix.simulate import generate

from conftest import make_spec, small_dataset
from oracles import central_diff


def _rank_one(th: Theta) -> Theta:
    return th.replace(Pi=np.outer(th.row_masses, th.col_masses))


@pytest.mark.parametrize("basis, K1, K2", [("mnar", 2, 3), ("mar", 3, 2), ("isni", 2, 2), ("mnar", 1, 1)])
def test_scores_match_finite_differences(basis, K1, K2):
    ds, th = small_dataset(7, 40, 4, K1=K1, K2=K2)
    if basis == "mar":
        th = _rank_one(th)
    lay = ParamLayout.for_dataset(ds, K1, K2, basis)
    x0 = lay.pack(th)
    d = derivatives(ds, th, basis)
    fd = central_diff(lambda x: observed_loglik(ds, lay.unpack(x)), x0, h=1e-6)
    assert_allclose(d.score, fd, rtol=1e-6, atol=1e-6)
    assert_allclose(d.scores.sum(axis=0), d.score, atol=1e-10)


@pytest.mark.parametrize("basis", ["mnar", "isni"])
def test_oakes_hessian_matches_fd(basis):
    ds, th = small_dataset(8, 40, 4, K1=2, K2=2)
    lay = ParamLayout.for_dataset(ds, 2, 2, basis)
    x0 = lay.pack(th)
    H = derivatives(ds, th, basis).hessian
    fd = central_diff(lambda x: derivatives(ds, lay.unpack(x), basis, hessian=False).score, x0, h=1e-5)
    assert_allclose(H, fd, rtol=1e-6, atol=1e-6)
    info, comp, corr = observed_information(ds, th, basis, parts=True)
    assert_allclose(info, comp - corr, atol=1e-10)
    assert_allclose(info, -0.5 * (H + H.T), atol=1e-10)


def test_subject_scores_shape():
    ds, th = small_dataset(9, 25, 3)
    assert subject_scores(ds, th).shape == (25, ParamLayout.for_dataset(ds, 2, 2).size)


def test_single_component_sandwich_matches_statsmodels():
    """K1 = K2 = 1: the blocks are OLS and logistic regression with subject clusters."""
    ds, _ = small_dataset(10, 200, 5, K1=1, K2=1)
    res = fit(ds, FitConfig(1, 1, "MNAR", n_starts=1))
    cov = sandwich_covariance(ds, res)
    lay = ParamLayout.for_dataset(ds, 1, 1, "mnar")

    ids = np.concatenate([[i] * s.T_i for i, s in enumerate(ds.subjects)])
    X = np.vstack([np.hstack([np.ones((s.T_i, 1)), s.X]) for s in ds.subjects])
    y = np.concatenate([s.y for s in ds.subjects])
    ols = sm.OLS(y, X).fit(cov_type="cluster", cov_kwds={"groups": ids, "use_correction": False,
                                                        "df_correction": False})
    assert_allclose(res.theta.beta, ols.params[1:], rtol=1e-8)
    assert_allclose(res.theta.zeta1, ols.params[:1], rtol=1e-8)
    idx = np.r_[lay.zeta1, lay.beta]
    assert_allclose(cov.sandwich[np.ix_(idx, idx)], ols.cov_params(), rtol=1e-5)

    rid = np.concatenate([[i] * len(s.r) for i, s in enumerate(ds.subjects)])
    V = np.vstack([np.hstack([np.ones((len(s.r), 1)), s.V]) for s in ds.subjects])
    r = np.concatenate([s.r for s in ds.subjects])
    glm = sm.GLM(r, V, family=sm.families.Binomial()).fit(
        cov_type="cluster", cov_kwds={"groups": rid, "use_correction": False, "df_correction": False},
        tol=1e-12)
    assert_allclose(res.theta.gamma, glm.params[1:], rtol=1e-6)
    idx = np.r_[lay.zeta2, lay.gamma]
    assert_allclose(cov.sandwich[np.ix_(idx, idx)], glm.cov_params(), rtol=1e-4)


@pytest.fixture(scope="module")
def fitted():
    ds = generate(make_spec(12, n=300))
    res = fit(ds, FitConfig(2, 2, "MNAR", n_starts=3))
    assert not res.diagnostics["small_mass_cells"]
    return ds, res, sandwich_covariance(ds, res)


def test_covariance_roundtrip(fitted):
    from bidimix.inference import CovarianceEstimate
    _, _, cov = fitted
    back = CovarianceEstimate.from_dict(cov.to_dict())
    assert_allclose(back.sandwich, cov.sandwich)
    assert_allclose(back.se, cov.se)


def test_se_table_layout(fitted):
    ds, res, cov = fitted
    tab = se_table(ds, res, cov)
    assert list(tab.columns) == ["process", "variable", "coeff", "std_err"]
    y = tab[tab.process == "Y"].variable.tolist()
    r = tab[tab.process == "R"].variable.tolist()
    assert y == ["Intercept", *ds.x_names, "sigma_y", "sigma_b1"]
    assert r == ["Intercept", *ds.v_names, "sigma_b2", "sigma_b1b2", "rho_b1b2"]
    assert tab.variable.tolist()[-2:] == ["logL", "BIC"]
    assert np.isnan(tab.std_err[tab.variable == "Intercept"]).all()
    # covariate SEs are the sandwich diagonal
    lay = ParamLayout.for_dataset(ds, 2, 2, "mnar")
    assert_allclose(tab[tab.process == "Y"].std_err.iloc[1:1 + ds.p], cov.se[lay.beta])


def test_moment_se_delta_method_fd(fitted):
    ds, res, cov = fitted
    from bidimix.model import mixing_moments
    lay = ParamLayout.for_dataset(ds, 2, 2, "mnar")
    x0 = lay.pack(res.theta)
    G = central_diff(lambda x: np.array(mixing_moments(lay.unpack(x))), x0, h=1e-6)
    se_fd = np.sqrt(np.einsum("kd,de,ke->k", G, cov.sandwich, G))
    assert_allclose(moments_with_se(res.theta, cov, lay).std_err, se_fd, rtol=1e-5)


def test_mass_table_rows(fitted):
    _, res, _ = fitted
    tab = mass_table(res.theta)
    assert list(tab.columns) == ["zeta1", "zeta2[1]", "zeta2[2]", "total"]
    assert tab.zeta1.tolist() == ["zeta1_g", *(f"{z:.17g}" for z in res.theta.zeta1), "Tot."]
    assert_allclose(tab.iloc[0, 1:-1].to_numpy(dtype=float), res.theta.zeta2)
    body = tab.iloc[1:-1, 1:-1].to_numpy(dtype=float)
    assert_allclose(body.sum(axis=1), 1.0)
    assert_allclose(body * res.theta.row_masses[:, None], res.theta.Pi)
    assert_allclose(tab.iloc[-1, 1:-1].to_numpy(dtype=float), res.theta.col_masses)


def test_sandwich_on_rank_one_fit_uses_mar_basis():
    ds, _ = small_dataset(13, 150, 4, K1=2, K2=2)
    res = fit(ds, FitConfig(2, 2, "MAR", n_starts=2))
    cov = sandwich_covariance(ds, res)
    assert cov.basis == "mar"
    assert cov.sandwich.shape[0] == ParamLayout.for_dataset(ds, 2, 2, "mar").size
    tab = se_table(ds, res, cov)
    assert "rho_b1b2" not in tab.variable.tolist()
    assert isinstance(tab, pd.DataFrame)
