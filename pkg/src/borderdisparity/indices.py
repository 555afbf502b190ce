"""Diversity, spatial lags, border disparity and local Moran's I."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .contiguity import ContiguityMatrix
from .errors import ContractViolation
from .ingestion import GROUPS

__all__ = [
    "EthnicComposition",
    "DisparityRecord",
    "MoranResult",
    "herfindahl",
    "herfindahl_from_counts",
    "percent_attribute",
    "share_from_counts",
    "spatial_lag",
    "disparity",
    "bdi",
    "local_morans_i",
]

MAX_H = 1.0 - 1.0 / len(GROUPS)


@dataclass(frozen=True)
class EthnicComposition:
    """Population shares of the five groups, in ``GROUPS`` order."""

    p: tuple[float, float, float, float, float]

    def __post_init__(self):
        p = tuple(float(v) for v in self.p)
        if len(p) != len(GROUPS):
            raise ContractViolation(f"need {len(GROUPS)} proportions, got {len(p)}")
        if any(not (0.0 <= v <= 1.0) for v in p):
            raise ContractViolation(f"proportions must lie in [0, 1]: {p}")
        if abs(math.fsum(p) - 1.0) > 1e-9:
            raise ContractViolation(f"proportions sum to {math.fsum(p)}, not 1")
        object.__setattr__(self, "p", p)

    @classmethod
    def from_counts(cls, counts: Sequence[int]) -> "EthnicComposition":
        total = sum(counts)
        if total <= 0:
            raise ContractViolation("composition of an empty population is undefined")
        return cls(tuple(c / total for c in counts))


def herfindahl(c: EthnicComposition) -> float:
    """``1 - sum(p_i ** 2)``: 0 for one group, 0.8 for five equal groups."""
    return 1.0 - math.fsum(v * v for v in c.p)


def herfindahl_from_counts(counts: np.ndarray) -> np.ndarray:
    """Row-wise Herfindahl diversity of an ``(n, 5)`` count array.

    Rows with zero population give NaN.
    """
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        p = counts / total[:, None]
    return 1.0 - (p * p).sum(axis=1)


def percent_attribute(c: EthnicComposition, group: str) -> float:
    """Share of one group, e.g. ``percent_attribute(c, "black")``."""
    try:
        return c.p[GROUPS.index(group)]
    except ValueError:
        raise ContractViolation(f"unknown group {group!r}; expected one of {GROUPS}") from None


def share_from_counts(counts: np.ndarray, group: str) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    if group not in GROUPS:
        raise ContractViolation(f"unknown group {group!r}; expected one of {GROUPS}")
    with np.errstate(invalid="ignore", divide="ignore"):
        return counts[:, GROUPS.index(group)] / counts.sum(axis=1)


def spatial_lag(W: ContiguityMatrix, x: Sequence[float]) -> np.ndarray:
    """Weighted neighbor average ``W @ x``; NaN where a row is empty."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or len(x) != W.n:
        raise ContractViolation(f"vector of length {x.shape} for {W.n} units")
    if not W.normalized:
        raise ContractViolation("spatial lag needs a row-normalized matrix")
    out = W.sparse @ x
    out[W.degree == 0] = np.nan
    return out


@dataclass(frozen=True)
class DisparityRecord:
    id: str
    H: float
    attribute_value: float
    ndi_u: float
    ndi_a: float
    bdi: float
    on_border: bool
    region_label: str = ""
    msa_id: str = ""
    place_id: str = ""

    @property
    def defined(self) -> bool:
        return not (math.isnan(self.ndi_u) or math.isnan(self.ndi_a))


def _check_provenance(W_u: ContiguityMatrix, W_a: ContiguityMatrix) -> None:
    if W_u.n != W_a.n:
        raise ContractViolation(f"matrices cover {W_u.n} and {W_a.n} units")
    if not (W_u.normalized and W_a.normalized):
        raise ContractViolation("both weights matrices must be row-normalized")
    bu = W_u.sparse.copy()
    bu.data = np.ones_like(bu.data)
    ba = W_a.sparse.copy()
    ba.data = np.ones_like(ba.data)
    if sp.csr_matrix.multiply(ba, bu).nnz != ba.nnz:
        raise ContractViolation("adjusted weights are not a masking of the unadjusted weights")


def disparity(
    W_u: ContiguityMatrix, W_a: ContiguityMatrix, x: Sequence[float]
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Array form of :func:`bdi`: ``(ndi_u, ndi_a, bdi, on_border)``.

    A unit is on the border when masking removed at least one of its
    neighbors. Values are NaN where either lag is undefined.
    """
    _check_provenance(W_u, W_a)
    ndi_u = spatial_lag(W_u, x)
    ndi_a = spatial_lag(W_a, x)
    on_border = W_a.degree < W_u.degree
    return ndi_u, ndi_a, ndi_u - ndi_a, on_border


def bdi(
    W_u: ContiguityMatrix,
    W_a: ContiguityMatrix,
    x: Sequence[float],
    ids: Sequence[str] | None = None,
    labels: Sequence | None = None,
    H: Sequence[float] | None = None,
) -> list[DisparityRecord]:
    """Border disparity ``W_u @ x - W_a @ x`` for every unit.

    Positive values mean the unit's cross-border neighbors raise its
    neighborhood average (the border keeps higher values out); negative
    values mean the border keeps them in.
    """
    x = np.asarray(x, dtype=np.float64)
    ndi_u, ndi_a, d, on_border = disparity(W_u, W_a, x)
    n = W_u.n
    ids = list(ids) if ids is not None else [str(i) for i in range(n)]
    labels = [str(getattr(v, "value", v)) for v in labels] if labels is not None else [""] * n
    H = np.asarray(H, dtype=np.float64) if H is not None else x
    return [
        DisparityRecord(
            id=ids[i],
            H=float(H[i]),
            attribute_value=float(x[i]),
            ndi_u=float(ndi_u[i]),
            ndi_a=float(ndi_a[i]),
            bdi=float(d[i]),
            on_border=bool(on_border[i]),
            region_label=labels[i],
        )
        for i in range(n)
    ]


@dataclass(frozen=True, eq=False)
class MoranResult:
    local_i: np.ndarray
    pseudo_p: np.ndarray
    cluster: np.ndarray
    z: np.ndarray
    lag: np.ndarray
    permutations: int
    seed: int


def _draw_without_replacement(rng, n_other: int, k: int, perms: int) -> np.ndarray:
    idx = rng.integers(0, n_other, size=(perms, k))
    if k > 1:
        s = np.sort(idx, axis=1)
        for r in np.flatnonzero((s[:, 1:] == s[:, :-1]).any(axis=1)):
            idx[r] = rng.choice(n_other, size=k, replace=False)
    return idx


def _permute_block(units, z, indptr, indices, data, local_i, perms, seed):
    n = len(z)
    out = np.empty(len(units))
    for pos, i in enumerate(units):
        lo, hi = indptr[i], indptr[i + 1]
        k = hi - lo
        if k == 0 or np.isnan(local_i[i]):
            out[pos] = np.nan
            continue
        rng = np.random.default_rng([seed, int(i)])
        idx = _draw_without_replacement(rng, n - 1, k, perms)
        idx[idx >= i] += 1  # skip the unit itself
        sims = z[i] * (z[idx] * data[lo:hi]).sum(axis=1)
        larger = int((sims >= local_i[i]).sum())
        if perms - larger < larger:
            larger = perms - larger
        out[pos] = (larger + 1.0) / (perms + 1.0)
    return out


def local_morans_i(
    W: ContiguityMatrix,
    x: Sequence[float],
    permutations: int = 999,
    seed: int = 42,
    alpha: float = 0.05,
    threads: int = 1,
) -> MoranResult:
    """Local Moran's I with conditional-permutation pseudo p-values.

    ``I_i = z_i * sum_j w_ij z_j`` with ``z`` standardized by the population
    (denominator n) standard deviation. For each unit the other n - 1
    values are drawn without replacement onto its neighbors. Each unit has
    its own random stream seeded from ``(seed, i)``, so results do not
    depend on ``threads``.

    Classes are ``HH``, ``LL``, ``HL``, ``LH`` for units with
    ``pseudo_p <= alpha`` and ``NotSig`` otherwise; isolates and constant
    fields are ``NotSig`` with undefined (NaN) statistics.
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if n < 3:
        raise ContractViolation(f"local Moran's I needs n >= 3, got {n}")
    if permutations < 99:
        raise ContractViolation(f"need at least 99 permutations, got {permutations}")
    if W.n != n:
        raise ContractViolation(f"vector of length {n} for {W.n} units")
    if not W.normalized:
        raise ContractViolation("local Moran's I expects row-normalized weights")

    sd = x.std()
    cluster = np.full(n, "NotSig", dtype=object)
    if not np.isfinite(sd) or sd == 0:
        nan = np.full(n, np.nan)
        return MoranResult(nan, nan.copy(), cluster, nan.copy(), nan.copy(), permutations, seed)

    z = (x - x.mean()) / sd
    lag = W.sparse @ z
    local_i = z * lag
    empty = W.degree == 0
    local_i[empty] = np.nan
    lag[empty] = np.nan

    m = W.sparse
    units = np.arange(n)
    threads = max(1, int(threads))
    blocks = np.array_split(units, threads) if threads > 1 else [units]
    args = (z, m.indptr, m.indices, m.data, local_i, permutations, seed)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(lambda b: _permute_block(b, *args), blocks))
    else:
        parts = [_permute_block(units, *args)]
    pseudo_p = np.concatenate(parts)

    sig = pseudo_p <= alpha
    hi_z, lo_z = z > 0, z < 0
    hi_l, lo_l = lag > 0, lag < 0
    cluster[sig & hi_z & hi_l] = "HH"
    cluster[sig & lo_z & lo_l] = "LL"
    cluster[sig & hi_z & lo_l] = "HL"
    cluster[sig & lo_z & hi_l] = "LH"
    return MoranResult(local_i, pseudo_p, cluster, z, lag, permutations, seed)
