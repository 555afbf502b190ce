"""OLS of suburban maximum BDI with metro-clustered standard errors."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg
from scipy import stats

from .aggregation import COVARIATES, PlaceSummary
from .errors import ContractViolation, RankError

logger = logging.getLogger(__name__)

__all__ = [
    "DEPENDENTS",
    "RegressionSpec",
    "DesignMatrix",
    "OLSFit",
    "ClusteredCovariance",
    "RegressionResult",
    "build_design_matrix",
    "ols_fit",
    "clustered_se",
    "fit",
]

# dependent variable -> attribute the place summaries must have been built on
DEPENDENTS = {"max_bdi_h": "herfindahl", "max_bdi_pblack": "percent_black"}
INTERCEPT = "INPT"


@dataclass(frozen=True)
class RegressionSpec:
    """Which covariates explain which maximum-BDI series.

    ``dummies`` optionally declares categorical covariates as
    ``{name: {msa_id: category}}``; each gets one indicator column per
    category except the alphabetically first.
    """

    dependent: str = "max_bdi_h"
    regressors: tuple[str, ...] = ()
    name: str = "model"
    dummies: Mapping[str, Mapping[str, str]] = field(default_factory=dict)

    def __post_init__(self):
        if self.dependent not in DEPENDENTS:
            raise ContractViolation(
                f"unknown dependent {self.dependent!r}; expected one of {sorted(DEPENDENTS)}"
            )
        regs = tuple(self.regressors)
        unknown = [r for r in regs if r not in COVARIATES]
        if unknown:
            raise ContractViolation(f"unknown regressors {unknown}", unknown)
        dupes = sorted({r for r in regs if regs.count(r) > 1})
        if dupes:
            raise ContractViolation(f"duplicate regressors {dupes}", dupes)
        object.__setattr__(self, "regressors", regs)

    @classmethod
    def from_dict(cls, d: Mapping) -> "RegressionSpec":
        return cls(
            dependent=d.get("dependent", "max_bdi_h"),
            regressors=tuple(d.get("regressors", ())),
            name=d.get("name", "model"),
            dummies=d.get("dummies", {}),
        )

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "dependent": self.dependent,
            "regressors": list(self.regressors),
            "dummies": {k: dict(v) for k, v in self.dummies.items()},
        }


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    X: np.ndarray
    y: np.ndarray
    clusters: np.ndarray
    columns: tuple[str, ...]
    place_ids: tuple[str, ...]
    dropped: tuple[str, ...]


def _missing(v) -> bool:
    return v is None or (isinstance(v, float) and math.isnan(v))


def build_design_matrix(
    summaries: Sequence[PlaceSummary], spec: RegressionSpec
) -> DesignMatrix:
    """Intercept plus regressors in the given order, one row per suburb.

    Rows with any missing covariate are dropped (listwise deletion) and
    their place ids reported in ``dropped``.
    """
    rows = [s for s in summaries if not s.is_core]
    if not rows:
        raise ContractViolation("no suburb summaries to regress")
    want = DEPENDENTS[spec.dependent]
    wrong = sorted({s.attribute for s in rows if s.attribute and s.attribute != want})
    if wrong:
        raise ContractViolation(
            f"{spec.dependent} needs summaries built on {want!r}, got {wrong}"
        )

    dummy_cols: list[tuple[str, str, str]] = []
    for name in sorted(spec.dummies):
        cats = sorted(set(spec.dummies[name].values()))
        dummy_cols += [(f"{name}[{c}]", name, c) for c in cats[1:]]

    X, y, clusters, ids, dropped = [], [], [], [], []
    for s in rows:
        vals = [s.covariates.get(r) for r in spec.regressors]
        cats = {name: spec.dummies[name].get(s.msa_id) for name in spec.dummies}
        if any(_missing(v) for v in vals) or any(c is None for c in cats.values()):
            dropped.append(s.place_id)
            continue
        X.append([1.0, *map(float, vals), *(float(cats[n] == c) for _, n, c in dummy_cols)])
        y.append(s.max)
        clusters.append(s.msa_id)
        ids.append(s.place_id)
    if dropped:
        logger.info("dropped %d suburbs with missing covariates: %s", len(dropped), dropped)
    columns = (INTERCEPT, *spec.regressors, *(c for c, _, _ in dummy_cols))
    if len(y) <= len(columns):
        raise RankError(
            f"{len(y)} complete rows for {len(columns)} columns", columns
        )
    return DesignMatrix(
        X=np.asarray(X, dtype=np.float64),
        y=np.asarray(y, dtype=np.float64),
        clusters=np.asarray(clusters, dtype=object),
        columns=columns,
        place_ids=tuple(ids),
        dropped=tuple(dropped),
    )


@dataclass(frozen=True, eq=False)
class OLSFit:
    coefficients: np.ndarray
    residuals: np.ndarray
    fitted: np.ndarray
    r2: float
    adj_r2: float


def ols_fit(X, y, columns: Sequence[str] | None = None) -> OLSFit:
    """Least squares with an explicit rank check.

    Rank is read off a column-pivoted QR factorization; a deficient design
    raises :class:`RankError` naming the columns the pivoting pushed out.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, k = X.shape
    columns = list(columns) if columns is not None else [f"x{j}" for j in range(k)]
    if len(y) != n:
        raise ContractViolation(f"X has {n} rows but y has {len(y)}")
    if n < k:
        raise RankError(f"{n} rows for {k} columns", columns)
    Q, R, piv = scipy.linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = max(n, k) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
    rank = int((diag > tol).sum())
    if rank < k:
        bad = [columns[j] for j in piv[rank:]]
        raise RankError(f"design matrix has rank {rank} < {k}; collinear: {bad}", bad)
    beta_p = scipy.linalg.solve_triangular(R, Q.T @ y)
    beta = np.empty(k)
    beta[piv] = beta_p
    fitted = X @ beta
    resid = y - fitted
    ssr = float(resid @ resid)
    yc = y - y.mean()
    sst = float(yc @ yc)
    r2 = 1.0 - ssr / sst if sst > 0 else math.nan
    adj = 1.0 - (1.0 - r2) * (n - 1) / (n - k) if n > k else math.nan
    return OLSFit(beta, resid, fitted, r2, adj)


@dataclass(frozen=True, eq=False)
class ClusteredCovariance:
    cov: np.ndarray
    se: np.ndarray
    n_clusters: int
    df: int
    correction: float


def clustered_se(X, residuals, cluster_ids) -> ClusteredCovariance:
    """Cluster-robust (CR1) sandwich covariance.

    ``(X'X)^-1 (sum_g X_g' u_g u_g' X_g) (X'X)^-1`` scaled by
    ``G / (G - 1) * (n - 1) / (n - k)``; inference uses ``G - 1`` degrees
    of freedom.
    """
    X = np.asarray(X, dtype=np.float64)
    u = np.asarray(residuals, dtype=np.float64)
    n, k = X.shape
    codes, inverse = np.unique(np.asarray(cluster_ids, dtype=str), return_inverse=True)
    G = len(codes)
    if G < 2:
        raise ContractViolation(f"clustered errors need at least 2 clusters, got {G}")
    scores = np.zeros((G, k))
    np.add.at(scores, inverse, X * u[:, None])
    meat = scores.T @ scores
    bread = np.linalg.inv(X.T @ X)
    c = G / (G - 1) * (n - 1) / (n - k)
    cov = c * bread @ meat @ bread
    cov = (cov + cov.T) / 2
    return ClusteredCovariance(cov, np.sqrt(np.clip(np.diag(cov), 0, None)), G, G - 1, c)


@dataclass(frozen=True, eq=False)
class RegressionResult:
    spec: RegressionSpec
    columns: tuple[str, ...]
    coefficients: np.ndarray
    se: np.ndarray
    t: np.ndarray
    p: np.ndarray
    r2: float
    adj_r2: float
    n_used: int
    n_clusters: int
    dropped: tuple[str, ...] = ()

    def metadata(self) -> dict:
        return {
            "specification": self.spec.as_dict(),
            "n": self.n_used,
            "clusters": self.n_clusters,
            "r2": self.r2,
            "adj_r2": self.adj_r2,
            "dropped": list(self.dropped),
            "covariance": "cluster-robust by MSA, CR1 small-sample factor",
            "inference": f"t distribution with {self.n_clusters - 1} df (clusters - 1)",
        }


def fit(summaries: Sequence[PlaceSummary], spec: RegressionSpec) -> RegressionResult:
    dm = build_design_matrix(summaries, spec)
    ols = ols_fit(dm.X, dm.y, dm.columns)
    cov = clustered_se(dm.X, ols.residuals, dm.clusters)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = ols.coefficients / cov.se
    p = 2.0 * stats.t.sf(np.abs(t), cov.df)
    return RegressionResult(
        spec=spec,
        columns=dm.columns,
        coefficients=ols.coefficients,
        se=cov.se,
        t=t,
        p=p,
        r2=ols.r2,
        adj_r2=ols.adj_r2,
        n_used=len(dm.y),
        n_clusters=cov.n_clusters,
        dropped=dm.dropped,
    )
