"""Full-sample, metro and place-level summaries of border disparity values."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractViolation
from .indices import DisparityRecord
from .ingestion import GROUPS, Region

__all__ = [
    "SUMMARY_QUANTILES",
    "COVARIATES",
    "PLACE_METRICS",
    "FieldSummary",
    "MetroSummary",
    "PlaceProfile",
    "PlaceSummary",
    "quantiles",
    "summarize",
    "pooled_stats",
    "extreme_shares",
    "metro_summaries",
    "place_covariates",
    "place_summaries",
    "spearman",
    "metric_correlations",
    "rank_places",
]

SUMMARY_QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)
COVARIATES = (
    "H", "HGAP", "BORDER", "PERCBORDER", "PERCBLK", "BLKDIFF", "WHTDIFF",
    "MEDINC", "MEDINCRAT", "POPDENS", "POPDENSRAT", "POPRATIO",
)
PLACE_METRICS = ("mean", "sum", "max", "min", "range")


def quantiles(values: Sequence[float], qs: Iterable[float]) -> list[float]:
    """Linear-interpolation quantiles: ``q * (n - 1)`` indexes the sorted data."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ContractViolation("quantiles of an empty sample")
    if np.isnan(v).any():
        raise ContractViolation("quantiles of a sample containing NaN")
    out = []
    for q in qs:
        if not 0.0 <= q <= 1.0:
            raise ContractViolation(f"probability {q} outside [0, 1]")
        h = q * (v.size - 1)
        lo = math.floor(h)
        hi = min(lo + 1, v.size - 1)
        out.append(float(v[lo] + (h - lo) * (v[hi] - v[lo])))
    return out


@dataclass(frozen=True)
class FieldSummary:
    min: float
    q05: float
    q25: float
    median: float
    q75: float
    q95: float
    max: float
    mean: float
    sd: float
    n: int

    @classmethod
    def empty(cls) -> "FieldSummary":
        nan = math.nan
        return cls(nan, nan, nan, nan, nan, nan, nan, nan, nan, 0)


def summarize(values: Sequence[float]) -> FieldSummary:
    """Order statistics, mean and sample (n - 1) standard deviation."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return FieldSummary.empty()
    q05, q25, med, q75, q95 = quantiles(v, SUMMARY_QUANTILES)
    sd = float(v.std(ddof=1)) if v.size > 1 else math.nan
    return FieldSummary(
        float(v.min()), q05, q25, med, q75, q95, float(v.max()), float(v.mean()), sd, int(v.size)
    )


def _border_values(records: Iterable[DisparityRecord]) -> list[DisparityRecord]:
    return [r for r in records if r.on_border and r.defined]


def pooled_stats(records: Iterable[DisparityRecord]) -> tuple[float, float]:
    """Mean and sample standard deviation of BDI over all border units."""
    v = np.array([r.bdi for r in _border_values(records)])
    if v.size < 2:
        raise ContractViolation(f"need at least 2 border units, got {v.size}")
    return float(v.mean()), float(v.std(ddof=1))


def extreme_shares(
    records: Iterable[DisparityRecord],
    pooled_mean: float | None = None,
    pooled_sd: float | None = None,
    k: float = 2.0,
) -> dict[tuple[str, str], tuple[float, float]]:
    """Share of each (metro, region)'s border units beyond ``mean +/- k sd``.

    Returns ``{(msa_id, region): (positive_share, negative_share)}``. The
    pooled mean and standard deviation default to those of all border
    units in ``records``.
    """
    border = _border_values(records)
    if len(border) < 2:
        raise ContractViolation(f"need at least 2 border units, got {len(border)}")
    if pooled_mean is None or pooled_sd is None:
        pooled_mean, pooled_sd = pooled_stats(border)
    upper = pooled_mean + k * pooled_sd
    lower = pooled_mean - k * pooled_sd
    groups: dict[tuple[str, str], list[float]] = {}
    for r in border:
        groups.setdefault((r.msa_id, r.region_label), []).append(r.bdi)
    out = {}
    for key in sorted(groups):
        v = np.asarray(groups[key])
        out[key] = (float((v > upper).mean()), float((v < lower).mean()))
    return out


@dataclass(frozen=True)
class MetroSummary:
    msa_id: str
    h: FieldSummary
    bdi: FieldSummary
    city_pos: float
    city_neg: float
    sub_pos: float
    sub_neg: float
    n_suburbs: int = 0
    max_in_core: bool = False
    min_in_core: bool = False


def metro_summaries(
    records: Sequence[DisparityRecord],
    n_suburbs: Mapping[str, int] | None = None,
    k: float = 2.0,
    pooled_label: str = "ALL",
) -> list[MetroSummary]:
    """One summary per metro plus a pooled full-sample row.

    H is summarized over every record; BDI over border units only. The
    extreme shares use the pooled full-sample mean and standard deviation.
    ``max_in_core`` / ``min_in_core`` tell whether the metro's extreme BDI
    value lies on the core-city side.
    """
    n_suburbs = dict(n_suburbs or {})
    border = _border_values(records)
    mean, sd = pooled_stats(border)
    shares = extreme_shares(border, mean, sd, k)
    core, sub = Region.CORE.value, Region.SUBURB.value

    out = []
    for msa in sorted({r.msa_id for r in records}):
        rec = [r for r in records if r.msa_id == msa]
        b = [r for r in border if r.msa_id == msa]
        cp, cn = shares.get((msa, core), (0.0, 0.0))
        sp_, sn = shares.get((msa, sub), (0.0, 0.0))
        hi = max(b, key=lambda r: r.bdi) if b else None
        lo = min(b, key=lambda r: r.bdi) if b else None
        out.append(
            MetroSummary(
                msa_id=msa,
                h=summarize([r.H for r in rec if not math.isnan(r.H)]),
                bdi=summarize([r.bdi for r in b]),
                city_pos=cp, city_neg=cn, sub_pos=sp_, sub_neg=sn,
                n_suburbs=n_suburbs.get(msa, 0),
                max_in_core=hi is not None and hi.region_label == core,
                min_in_core=lo is not None and lo.region_label == core,
            )
        )

    def pooled(region):
        v = [r for r in border if r.region_label == region]
        if not v:
            return 0.0, 0.0
        a = np.array([r.bdi for r in v])
        return float((a > mean + k * sd).mean()), float((a < mean - k * sd).mean())

    (cp, cn), (sp_, sn) = pooled(core), pooled(sub)
    out.append(
        MetroSummary(
            msa_id=pooled_label,
            h=summarize([r.H for r in records if not math.isnan(r.H)]),
            bdi=summarize([r.bdi for r in border]),
            city_pos=cp, city_neg=cn, sub_pos=sp_, sub_neg=sn,
            n_suburbs=sum(n_suburbs.values()),
        )
    )
    return out


@dataclass(frozen=True)
class PlaceProfile:
    """Place-level demographics used to build regression covariates."""

    counts: tuple[int, int, int, int, int]
    median_income: float | None = None
    land_area_m2: float | None = None

    @property
    def population(self) -> int:
        return sum(self.counts)

    @property
    def H(self) -> float:
        pop = self.population
        if pop <= 0:
            return math.nan
        return 1.0 - math.fsum((c / pop) ** 2 for c in self.counts)

    def percent(self, group: str) -> float:
        pop = self.population
        return 100.0 * self.counts[GROUPS.index(group)] / pop if pop > 0 else math.nan

    @property
    def density(self) -> float | None:
        """Thousands of residents per square kilometer."""
        if not self.land_area_m2:
            return None
        return self.population / (self.land_area_m2 / 1e6) / 1000.0

    @classmethod
    def combine(cls, profiles: Sequence["PlaceProfile"]) -> "PlaceProfile":
        """Merge several places (e.g. a two-city core) into one profile.

        Counts and land areas add up; median income becomes the
        population-weighted mean of the known values.
        """
        counts = tuple(int(sum(p.counts[g] for p in profiles)) for g in range(len(GROUPS)))
        known = [p for p in profiles if p.median_income is not None and p.population > 0]
        income = None
        if known and len(known) == len(profiles):
            pop = sum(p.population for p in known)
            income = sum(p.median_income * p.population for p in known) / pop
        areas = [p.land_area_m2 for p in profiles]
        area = None if any(a is None for a in areas) else float(sum(areas))
        return cls(counts, income, area)


def _ratio(a: float | None, b: float | None) -> float | None:
    if a is None or b is None or b == 0 or math.isnan(a) or math.isnan(b):
        return None
    return a / b


def _diff(a: float, b: float) -> float | None:
    if math.isnan(a) or math.isnan(b):
        return None
    return a - b


def place_covariates(
    suburb: PlaceProfile,
    core: PlaceProfile,
    border_length: float,
    perimeter: float,
) -> dict[str, float | None]:
    """Regression covariates of one suburb relative to its core city.

    Percentages and their differences are in percentage points; ratios are
    suburb over core, so equal values give exactly 1.
    """
    pblk, cblk = suburb.percent("black"), core.percent("black")
    pwht, cwht = suburb.percent("white"), core.percent("white")
    h = suburb.H
    return {
        "H": None if math.isnan(h) else h,
        "HGAP": _diff(h, core.H),
        "BORDER": float(border_length),
        "PERCBORDER": 100.0 * border_length / perimeter if perimeter > 0 else None,
        "PERCBLK": None if math.isnan(pblk) else pblk,
        "BLKDIFF": _diff(pblk, cblk),
        "WHTDIFF": _diff(pwht, cwht),
        "MEDINC": suburb.median_income,
        "MEDINCRAT": _ratio(suburb.median_income, core.median_income),
        "POPDENS": suburb.density,
        "POPDENSRAT": _ratio(suburb.density, core.density),
        "POPRATIO": _ratio(float(suburb.population), float(core.population)),
    }


@dataclass(frozen=True)
class PlaceSummary:
    place_id: str
    msa_id: str
    n_border: int
    mean: float
    sum: float
    max: float
    min: float
    range: float
    is_core: bool = False
    attribute: str = ""
    covariates: Mapping[str, float | None] = field(default_factory=dict)

    def metric(self, name: str) -> float:
        return getattr(self, name)


def place_summaries(
    records: Iterable[DisparityRecord],
    suburbs: Mapping[str, str],
    covariates: Mapping[str, Mapping[str, float | None]] | None = None,
    cores: Mapping[str, str] | None = None,
    attribute: str = "",
) -> tuple[list[PlaceSummary], list[str]]:
    """Aggregate border BDI values by suburb (and by core place).

    ``suburbs`` and ``cores`` map place ids to metro ids. Only a place's own
    border units count: Suburb-labeled units for suburbs, Core-labeled
    units for core pseudo-places. Suburbs without border units are left out
    and reported in the returned diagnostics.
    """
    covariates = covariates or {}
    cores = dict(cores or {})
    by_place: dict[tuple[str, str], list[float]] = {}
    for r in _border_values(records):
        by_place.setdefault((r.place_id, r.region_label), []).append(r.bdi)

    out, diagnostics = [], []
    todo = [(pid, msa, False) for pid, msa in suburbs.items()]
    todo += [(pid, msa, True) for pid, msa in cores.items()]
    for pid, msa, is_core in sorted(todo, key=lambda t: (t[1], t[2], t[0])):
        label = Region.CORE.value if is_core else Region.SUBURB.value
        v = by_place.get((pid, label))
        if not v:
            if not is_core:
                diagnostics.append(f"{pid}: no border units")
            continue
        a = np.asarray(v)
        hi, lo = float(a.max()), float(a.min())
        out.append(
            PlaceSummary(
                place_id=pid,
                msa_id=msa,
                n_border=int(a.size),
                mean=float(a.mean()),
                sum=float(a.sum()),
                max=hi,
                min=lo,
                range=hi - lo,
                is_core=is_core,
                attribute=attribute,
                covariates=dict(covariates.get(pid, {})) if not is_core else {},
            )
        )
    return out, diagnostics


def _average_ranks(v: np.ndarray) -> np.ndarray:
    order = np.argsort(v, kind="mergesort")
    s = v[order]
    n = v.size
    starts = np.flatnonzero(np.concatenate([[True], s[1:] != s[:-1]]))
    ends = np.concatenate([starts[1:], [n]])
    avg = (starts + ends - 1) / 2.0 + 1.0
    ranks = np.empty(n)
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Spearman rank correlation with average ranks for ties.

    Returns NaN when either variable has no rank variance.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ContractViolation(f"inputs of shapes {x.shape} and {y.shape}")
    if x.size < 3:
        raise ContractViolation(f"need at least 3 pairs, got {x.size}")
    if np.isnan(x).any() or np.isnan(y).any():
        raise ContractViolation("spearman inputs contain NaN")
    rx = _average_ranks(x)
    ry = _average_ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    sxx = float(rx @ rx)
    syy = float(ry @ ry)
    if sxx == 0 or syy == 0:
        return math.nan
    r = float(rx @ ry) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def metric_correlations(summaries: Sequence[PlaceSummary]) -> dict[tuple[str, str], float]:
    """Pairwise Spearman correlations among the candidate place metrics."""
    rows = [s for s in summaries if not s.is_core]
    out = {}
    for a in PLACE_METRICS:
        for b in PLACE_METRICS:
            if len(rows) < 3:
                out[a, b] = math.nan
            else:
                out[a, b] = spearman([s.metric(a) for s in rows], [s.metric(b) for s in rows])
    return out


def rank_places(
    summaries: Sequence[PlaceSummary], metric: str = "max", cutoff_fraction: float = 0.05
) -> list[PlaceSummary]:
    """Top suburbs by largest maximum or smallest minimum BDI.

    Keeps ``ceil(cutoff_fraction * n_suburbs)`` rows; ties go to the
    lexicographically smaller place id. Core pseudo-places are ignored.
    """
    if metric not in ("max", "min"):
        raise ContractViolation(f"rank metric must be 'max' or 'min', not {metric!r}")
    rows = [s for s in summaries if not s.is_core]
    if not rows:
        raise ContractViolation("no suburb summaries to rank")
    # round first so 0.05 * 20 does not become 1.0000000000000002
    size = math.ceil(round(cutoff_fraction * len(rows), 9))
    if metric == "max":
        rows.sort(key=lambda s: (-s.max, s.place_id))
    else:
        rows.sort(key=lambda s: (s.min, s.place_id))
    return rows[:size]
