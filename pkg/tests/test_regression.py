import numpy as np
import pytest
import statsmodels.api as sm
from numpy.testing import assert_allclose

from borderdisparity.aggregation import COVARIATES, PlaceSummary
from borderdisparity.errors import ContractViolation, RankError
from borderdisparity.regression import (
    INTERCEPT,
    RegressionSpec,
    build_design_matrix,
    clustered_se,
    fit,
    ols_fit,
)


def design(rng, n=60, k=4):
    X = np.column_stack([np.ones(n), rng.normal(size=(n, k - 1))])
    y = X @ rng.normal(size=k) + rng.normal(size=n)
    return X, y


def sandwich(X, u, g):
    n, k = X.shape
    bread = np.linalg.inv(X.T @ X)
    meat = np.zeros((k, k))
    labels = sorted(set(g))
    for c in labels:
        idx = [i for i in range(n) if g[i] == c]
        s = X[idx].T @ u[idx]
        meat += np.outer(s, s)
    G = len(labels)
    return G / (G - 1) * (n - 1) / (n - k) * bread @ meat @ bread


@pytest.mark.parametrize("seed", range(5))
def test_ols_matches_normal_equations(seed):
    X, y = design(np.random.default_rng(seed))
    res = ols_fit(X, y)
    beta = np.linalg.solve(X.T @ X, X.T @ y)
    assert_allclose(res.coefficients, beta, rtol=0, atol=1e-10)
    assert_allclose(res.residuals, y - X @ beta, atol=1e-10)


def test_r2_matches_statsmodels():
    X, y = design(np.random.default_rng(9))
    res = ols_fit(X, y)
    ref = sm.OLS(y, X).fit()
    assert res.r2 == pytest.approx(ref.rsquared, abs=1e-12)
    assert res.adj_r2 == pytest.approx(ref.rsquared_adj, abs=1e-12)


def test_clustered_se_matches_sandwich_and_statsmodels():
    rng = np.random.default_rng(4)
    X, y = design(rng, n=80)
    g = rng.integers(0, 9, size=80)
    res = ols_fit(X, y)
    cov = clustered_se(X, res.residuals, g)
    assert_allclose(cov.cov, sandwich(X, res.residuals, g), rtol=0, atol=1e-10)
    ref = sm.OLS(y, X).fit(cov_type="cluster", cov_kwds={"groups": g})
    assert_allclose(cov.se, ref.bse, rtol=1e-10)
    assert cov.df == cov.n_clusters - 1 == 8


def test_one_observation_per_cluster_is_hc1():
    X, y = design(np.random.default_rng(5), n=40)
    res = ols_fit(X, y)
    cov = clustered_se(X, res.residuals, np.arange(40))
    ref = sm.OLS(y, X).fit(cov_type="HC1")
    assert_allclose(cov.cov, ref.cov_params(), rtol=0, atol=1e-10)


def test_intercept_only_two_clusters_by_hand():
    X = np.ones((6, 1))
    y = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
    u = y - 3.5
    cov = clustered_se(X, u, ["a", "a", "a", "b", "b", "b"])
    # scores: -4.5 and +4.5; meat 40.5; bread 1/6; factor 2 * 5/5
    assert cov.cov[0, 0] == pytest.approx(2 * 40.5 / 36, abs=1e-15)


def test_clustered_covariance_is_psd():
    rng = np.random.default_rng(8)
    X, y = design(rng, n=50, k=5)
    res = ols_fit(X, y)
    cov = clustered_se(X, res.residuals, rng.integers(0, 12, size=50))
    assert np.linalg.eigvalsh(cov.cov).min() > -1e-12
    assert_allclose(cov.cov, cov.cov.T)


def test_single_cluster_rejected():
    X, y = design(np.random.default_rng(1), n=10, k=2)
    with pytest.raises(ContractViolation):
        clustered_se(X, y, ["a"] * 10)


def test_cluster_se_monte_carlo_coverage():
    # clustered errors: the CR1 standard error should track the true spread
    rng = np.random.default_rng(123)
    n, G, reps = 1000, 50, 200
    g = np.repeat(np.arange(G), n // G)
    slopes, ses = [], []
    for _ in range(reps):
        xg = rng.normal(size=G)[g] + rng.normal(size=n)
        e = rng.normal(size=G)[g] + rng.normal(size=n)
        X = np.column_stack([np.ones(n), xg])
        res = ols_fit(X, 2.0 * xg + e)
        slopes.append(res.coefficients[1])
        ses.append(clustered_se(X, res.residuals, g).se[1])
    assert np.mean(ses) == pytest.approx(np.std(slopes, ddof=1), rel=0.25)


def test_zero_column_raises_rank_error():
    X, y = design(np.random.default_rng(2), n=20, k=3)
    X = np.column_stack([X, np.zeros(20)])
    with pytest.raises(RankError) as info:
        ols_fit(X, y, ["INPT", "a", "b", "zero"])
    assert info.value.columns == ["zero"]


def test_duplicate_column_named_in_error():
    X, y = design(np.random.default_rng(2), n=20, k=3)
    X = np.column_stack([X, X[:, 1]])
    with pytest.raises(RankError) as info:
        ols_fit(X, y, ["INPT", "a", "b", "a2"])
    assert info.value.columns[0] in ("a", "a2")


def test_invariance_to_row_order_and_scaling():
    rng = np.random.default_rng(6)
    X, y = design(rng)
    base = ols_fit(X, y)
    perm = rng.permutation(len(y))
    assert_allclose(ols_fit(X[perm], y[perm]).coefficients, base.coefficients, atol=1e-12)
    Xs = X.copy()
    Xs[:, 1] *= 1000.0
    scaled = ols_fit(Xs, y)
    assert scaled.coefficients[1] * 1000 == pytest.approx(base.coefficients[1], rel=1e-10)
    assert scaled.r2 == pytest.approx(base.r2, abs=1e-12)


def _places(rng, n=40, n_msa=6):
    out = []
    for i in range(n):
        cov = {c: float(rng.normal()) for c in COVARIATES}
        out.append(
            PlaceSummary(
                f"S{i:02d}", f"M{i % n_msa}", 3, 0.0, 0.0, float(rng.normal()), -0.1, 0.1,
                attribute="herfindahl", covariates=cov,
            )
        )
    return out


def test_spec_validation():
    with pytest.raises(ContractViolation):
        RegressionSpec("max_bdi_h", ("H", "H"))
    with pytest.raises(ContractViolation):
        RegressionSpec("max_bdi_h", ("NOPE",))
    with pytest.raises(ContractViolation):
        RegressionSpec("mean_bdi", ("H",))
    spec = RegressionSpec.from_dict({"dependent": "max_bdi_pblack", "regressors": ["H"], "name": "x"})
    assert RegressionSpec.from_dict(spec.as_dict()) == spec


def test_design_matrix_listwise_deletion():
    places = _places(np.random.default_rng(1))
    bad = places[3]
    places[3] = PlaceSummary(
        bad.place_id, bad.msa_id, 1, 0, 0, 0.2, 0, 0, attribute="herfindahl",
        covariates={**bad.covariates, "MEDINC": None},
    )
    dm = build_design_matrix(places, RegressionSpec("max_bdi_h", ("H", "MEDINC")))
    assert dm.columns == (INTERCEPT, "H", "MEDINC")
    assert dm.dropped == ("S03",)
    assert dm.X.shape == (39, 3)


def test_design_matrix_rejects_wrong_attribute():
    places = _places(np.random.default_rng(1))
    with pytest.raises(ContractViolation):
        build_design_matrix(places, RegressionSpec("max_bdi_pblack", ("H",)))


def test_design_matrix_dummies():
    places = _places(np.random.default_rng(1), n_msa=4)
    region = {"M0": "south", "M1": "west", "M2": "west", "M3": "east"}
    dm = build_design_matrix(places, RegressionSpec("max_bdi_h", ("H",), dummies={"REG": region}))
    assert dm.columns == (INTERCEPT, "H", "REG[south]", "REG[west]")
    assert dm.X[:, 2].sum() == 10


def test_too_few_rows_is_rank_error():
    places = _places(np.random.default_rng(1), n=5)
    with pytest.raises(RankError):
        build_design_matrix(places, RegressionSpec("max_bdi_h", COVARIATES))


def test_fit_end_to_end_matches_statsmodels():
    places = _places(np.random.default_rng(3))
    spec = RegressionSpec("max_bdi_h", ("H", "BORDER", "PERCBLK"))
    res = fit(places, spec)
    dm = build_design_matrix(places, spec)
    ref = sm.OLS(dm.y, dm.X).fit(
        cov_type="cluster", cov_kwds={"groups": np.unique(dm.clusters, return_inverse=True)[1]}
    )
    assert_allclose(res.coefficients, ref.params, atol=1e-10)
    assert_allclose(res.se, ref.bse, rtol=1e-10)
    assert res.n_clusters == 6
    meta = res.metadata()
    assert meta["n"] == 40 and meta["clusters"] == 6
    assert meta["specification"]["regressors"] == ["H", "BORDER", "PERCBLK"]


def test_fitted_plus_residuals_reconstruct_y():
    X, y = design(np.random.default_rng(14))
    res = ols_fit(X, y)
    assert_allclose(res.fitted + res.residuals, y, rtol=0, atol=1e-10)


def test_cluster_relabeling_leaves_se_unchanged():
    rng = np.random.default_rng(15)
    X, y = design(rng, n=70)
    g = rng.integers(0, 7, size=70)
    res = ols_fit(X, y)
    a = clustered_se(X, res.residuals, g)
    b = clustered_se(X, res.residuals, [f"metro-{(v * 5) % 7}" for v in g])
    assert_allclose(a.cov, b.cov, rtol=1e-13, atol=1e-15)
