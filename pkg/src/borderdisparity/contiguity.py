"""
Queen contiguity weights, row normalization, cross-border masking and
shared-border lengths for planar polygon geometries.

Geometry is handled as plain rings of ``(x, y)`` vertices in a projected
CRS (meters). Two units are Queen neighbors when their boundaries share at
least one point once coordinates are snapped to a grid of ``snap_tolerance``
meters. Contact is found in two passes:

* identical snapped vertices, found by sorting vertex keys, and
* vertices lying on another unit's edge (T-junctions and collinear
  overlapping edges without common vertices), found through a uniform grid
  index over edge bounding boxes.

Both passes are vectorized with numpy, so construction is roughly linear in
the total vertex count.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ContractViolation, ParseError

__all__ = [
    "DEFAULT_SNAP_TOLERANCE",
    "ContiguityMatrix",
    "build_queen_contiguity",
    "queen_pairs",
    "row_normalize",
    "mask_cross_border",
    "border_flags",
    "shared_border_length",
    "perimeter",
    "write_weights",
    "read_weights",
]

DEFAULT_SNAP_TOLERANCE = 0.001

# (vertex, edge) candidate pairs are materialized in chunks of this many
# exploded entries to bound peak memory.
_JOIN_CHUNK = 2_000_000


@dataclass(frozen=True, eq=False)
class ContiguityMatrix:
    """Sparse neighbor weights over ``n`` geounits.

    ``sparse`` is a CSR matrix with sorted column indices and no explicit
    diagonal. ``emptied`` lists rows that lost every neighbor when the
    matrix was produced by :func:`mask_cross_border`.
    """

    sparse: sp.csr_matrix
    normalized: bool = False
    emptied: tuple[int, ...] = field(default=())

    def __post_init__(self):
        m = self.sparse
        if m.shape[0] != m.shape[1]:
            raise ContractViolation(f"weights must be square, got {m.shape}", ())
        m.sort_indices()
        m.data.flags.writeable = False
        m.indices.flags.writeable = False
        m.indptr.flags.writeable = False

    @property
    def n(self) -> int:
        return self.sparse.shape[0]

    @property
    def degree(self) -> np.ndarray:
        return np.diff(self.sparse.indptr)

    def row(self, i: int) -> list[tuple[int, float]]:
        lo, hi = self.sparse.indptr[i], self.sparse.indptr[i + 1]
        return [
            (int(j), float(w))
            for j, w in zip(self.sparse.indices[lo:hi], self.sparse.data[lo:hi])
        ]

    @property
    def rows(self) -> list[list[tuple[int, float]]]:
        return [self.row(i) for i in range(self.n)]

    def neighbors(self, i: int) -> np.ndarray:
        lo, hi = self.sparse.indptr[i], self.sparse.indptr[i + 1]
        return np.asarray(self.sparse.indices[lo:hi])

    def toarray(self) -> np.ndarray:
        return self.sparse.toarray()

    def subset(self, index: Sequence[int]) -> "ContiguityMatrix":
        """Binary structure restricted to ``index`` (in that order)."""
        index = np.asarray(index, dtype=np.int64)
        sub = self.sparse[index][:, index].tocsr()
        sub.data = np.ones_like(sub.data, dtype=np.float64)
        return ContiguityMatrix(sub, normalized=False)


def _csr_from_pairs(i: np.ndarray, j: np.ndarray, n: int) -> sp.csr_matrix:
    """Symmetric binary CSR matrix from (possibly duplicated) index pairs."""
    keep = i != j
    i, j = i[keep], j[keep]
    rows = np.concatenate([i, j])
    cols = np.concatenate([j, i])
    if rows.size:
        code = np.unique(rows.astype(np.int64) * n + cols)
        rows, cols = code // n, code % n
    m = sp.csr_matrix(
        (np.ones(rows.size, dtype=np.float64), (rows, cols)), shape=(n, n)
    )
    m.sort_indices()
    return m


def _rings_of(unit) -> list[np.ndarray]:
    rings = unit.rings if hasattr(unit, "rings") else unit
    return [np.asarray(r, dtype=np.float64).reshape(-1, 2) for r in rings]


def _snap(xy: np.ndarray, tol: float) -> np.ndarray:
    if tol > 0:
        return np.round(xy / tol) * tol
    return xy


def _flatten(geoms: Sequence) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Stack all rings of all geometries.

    Returns vertices (V, 2), vertex owner (V,), and the edges as (start,
    end) indices into the vertex array. Closing vertices are kept so each
    ring of m points yields m - 1 edges.
    """
    coords, owners, starts = [], [], []
    offset = 0
    for k, g in enumerate(geoms):
        for ring in _rings_of(g):
            m = len(ring)
            if m < 2:
                continue
            coords.append(ring)
            owners.append(np.full(m, k, dtype=np.int64))
            starts.append(np.arange(offset, offset + m - 1, dtype=np.int64))
            offset += m
    if not coords:
        empty = np.empty(0, dtype=np.int64)
        return np.empty((0, 2)), empty, empty, empty
    xy = np.concatenate(coords)
    owner = np.concatenate(owners)
    s = np.concatenate(starts)
    return xy, owner, s, s + 1


def _cell_ranges(lo: np.ndarray, hi: np.ndarray, cell: float):
    ilo = np.floor(lo / cell).astype(np.int64)
    ihi = np.floor(hi / cell).astype(np.int64)
    return ilo, ihi


def _explode(boxes: np.ndarray, cell: float, origin: np.ndarray):
    """Map each bounding box (xmin, ymin, xmax, ymax) onto grid cell keys."""
    x0, x1 = _cell_ranges(boxes[:, 0] - origin[0], boxes[:, 2] - origin[0], cell)
    y0, y1 = _cell_ranges(boxes[:, 1] - origin[1], boxes[:, 3] - origin[1], cell)
    nx = x1 - x0 + 1
    ny = y1 - y0 + 1
    counts = nx * ny
    item = np.repeat(np.arange(len(boxes), dtype=np.int64), counts)
    # position of each exploded entry within its box
    start = np.repeat(np.cumsum(counts) - counts, counts)
    pos = np.arange(item.size, dtype=np.int64) - start
    nyr = ny[item]
    cx = x0[item] + pos // nyr
    cy = y0[item] + pos % nyr
    return item, cx, cy


def _bbox_join(
    boxes_a: np.ndarray, boxes_b: np.ndarray, cell: float
) -> tuple[np.ndarray, np.ndarray]:
    """All (a, b) index pairs whose bounding boxes share a grid cell."""
    if len(boxes_a) == 0 or len(boxes_b) == 0:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty
    origin = np.minimum(boxes_a[:, :2].min(axis=0), boxes_b[:, :2].min(axis=0))
    ia, ax, ay = _explode(boxes_a, cell, origin)
    ib, bx, by = _explode(boxes_b, cell, origin)
    span = int(max(ax.max(), bx.max(), ay.max(), by.max())) + 2
    ka = ax * span + ay
    kb = bx * span + by
    order = np.argsort(kb, kind="stable")
    kb, ib = kb[order], ib[order]
    left = np.searchsorted(kb, ka, side="left")
    right = np.searchsorted(kb, ka, side="right")
    hits = right - left

    out_a, out_b = [], []
    csum = np.cumsum(hits)
    lo = 0
    while lo < len(ka):
        base = csum[lo - 1] if lo else 0
        hi = int(np.searchsorted(csum, base + _JOIN_CHUNK, side="right"))
        hi = max(hi, lo + 1)
        h = hits[lo:hi]
        rep = np.repeat(np.arange(lo, hi), h)
        start = np.repeat(np.cumsum(h) - h, h)
        pos = np.arange(rep.size) - start
        out_a.append(ia[rep])
        out_b.append(ib[left[rep] + pos])
        lo = hi
    a = np.concatenate(out_a)
    b = np.concatenate(out_b)
    code = np.unique(a * len(boxes_b) + b)
    return code // len(boxes_b), code % len(boxes_b)


def _edge_boxes(xy: np.ndarray, s: np.ndarray, e: np.ndarray, pad: float) -> np.ndarray:
    p, q = xy[s], xy[e]
    return np.column_stack(
        [
            np.minimum(p[:, 0], q[:, 0]) - pad,
            np.minimum(p[:, 1], q[:, 1]) - pad,
            np.maximum(p[:, 0], q[:, 0]) + pad,
            np.maximum(p[:, 1], q[:, 1]) + pad,
        ]
    )


def _cell_size(xy: np.ndarray, s: np.ndarray, e: np.ndarray, tol: float) -> float:
    lengths = np.hypot(*(xy[e] - xy[s]).T)
    lengths = lengths[lengths > 0]
    cell = float(np.median(lengths)) if lengths.size else 1.0
    return max(cell, 4 * tol, 1e-9)


def _vertex_pairs(xy: np.ndarray, owner: np.ndarray, tol: float):
    """Owner pairs that share an identical snapped vertex."""
    if tol > 0:
        keys = np.round(xy / tol).astype(np.int64)
    else:
        # exact comparison on the bit pattern; adding 0.0 folds -0.0 into 0.0
        keys = np.ascontiguousarray(xy + 0.0).view(np.int64).reshape(-1, 2)
    order = np.lexsort((owner, keys[:, 1], keys[:, 0]))
    kx, ky, ow = keys[order, 0], keys[order, 1], owner[order]
    # collapse repeated (key, owner) entries
    keep = np.ones(len(ow), dtype=bool)
    keep[1:] = (kx[1:] != kx[:-1]) | (ky[1:] != ky[:-1]) | (ow[1:] != ow[:-1])
    kx, ky, ow = kx[keep], ky[keep], ow[keep]
    pi, pj = [], []
    d = 1
    while d < len(ow):
        same = (kx[d:] == kx[:-d]) & (ky[d:] == ky[:-d])
        if not same.any():
            break
        pi.append(ow[:-d][same])
        pj.append(ow[d:][same])
        d += 1
    if not pi:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty
    return np.concatenate(pi), np.concatenate(pj)


def _vertex_on_edge_pairs(xy, owner, s, e, tol):
    """Owner pairs where a vertex of one unit lies on an edge of another."""
    if len(s) == 0:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty
    eps = tol
    cell = _cell_size(xy, s, e, tol)
    pts = np.column_stack([xy, xy])
    vi, ei = _bbox_join(pts, _edge_boxes(xy, s, e, eps), cell)
    eo = owner[s[ei]]
    vo = owner[vi]
    diff = vo != eo
    vi, ei, vo, eo = vi[diff], ei[diff], vo[diff], eo[diff]
    p = xy[vi]
    a = xy[s[ei]]
    b = xy[e[ei]]
    ab = b - a
    ap = p - a
    length2 = np.einsum("ij,ij->i", ab, ab)
    cross = ab[:, 0] * ap[:, 1] - ab[:, 1] * ap[:, 0]
    dot = np.einsum("ij,ij->i", ab, ap)
    with np.errstate(invalid="ignore", divide="ignore"):
        if eps > 0:
            length = np.sqrt(length2)
            dist = np.abs(cross) / length
            t = dot / length
            hit = (length > 0) & (dist <= eps) & (t >= -eps) & (t <= length + eps)
        else:
            hit = (length2 > 0) & (cross == 0) & (dot >= 0) & (dot <= length2)
    return vo[hit], eo[hit]


def queen_pairs(
    geoms: Sequence, snap_tolerance: float = DEFAULT_SNAP_TOLERANCE
) -> tuple[np.ndarray, np.ndarray]:
    """Index pairs (i < j) of geometries sharing at least one boundary point."""
    if snap_tolerance < 0:
        raise ContractViolation("snap_tolerance must be >= 0")
    xy, owner, s, e = _flatten(geoms)
    xy = _snap(xy, snap_tolerance)
    i1, j1 = _vertex_pairs(xy, owner, snap_tolerance)
    i2, j2 = _vertex_on_edge_pairs(xy, owner, s, e, snap_tolerance)
    i = np.concatenate([i1, i2])
    j = np.concatenate([j1, j2])
    lo, hi = np.minimum(i, j), np.maximum(i, j)
    keep = lo != hi
    n = max(len(geoms), 1)
    code = np.unique(lo[keep] * n + hi[keep])
    return code // n, code % n


def build_queen_contiguity(
    units: Sequence, snap_tolerance: float = DEFAULT_SNAP_TOLERANCE
) -> ContiguityMatrix:
    """First-order Queen contiguity with unit weights.

    Parameters
    ----------
    units : sequence
        GeoUnits (anything with a ``rings`` attribute) or raw ring lists.
    snap_tolerance : float
        Grid size in meters used to snap coordinates before comparing them.

    Returns
    -------
    ContiguityMatrix
        Unnormalized, symmetric structure. Isolated units get empty rows.
    """
    i, j = queen_pairs(units, snap_tolerance)
    return ContiguityMatrix(_csr_from_pairs(i, j, len(units)), normalized=False)


def _normalized_by_degree(m: sp.csr_matrix) -> sp.csr_matrix:
    deg = np.diff(m.indptr)
    out = sp.csr_matrix(
        (np.ones(m.nnz, dtype=np.float64), m.indices.copy(), m.indptr.copy()),
        shape=m.shape,
    )
    with np.errstate(divide="ignore"):
        inv = 1.0 / deg
    out.data = np.repeat(inv, deg)
    return out


def row_normalize(W: ContiguityMatrix) -> ContiguityMatrix:
    """Rescale each nonempty row to weights of ``1 / degree``.

    Contiguity weights are binary, so this equals dividing by the row sum,
    and is exactly idempotent.
    """
    return ContiguityMatrix(_normalized_by_degree(W.sparse), normalized=True)


def _row_index(m: sp.csr_matrix) -> np.ndarray:
    return np.repeat(np.arange(m.shape[0]), np.diff(m.indptr))


def mask_cross_border(W: ContiguityMatrix, labels: Sequence) -> ContiguityMatrix:
    """Drop neighbor pairs whose region labels differ and re-normalize.

    Rows left without neighbors become empty; their indices are reported in
    the ``emptied`` attribute of the result.
    """
    labels = np.asarray([str(getattr(v, "value", v)) for v in labels])
    m = W.sparse
    if len(labels) != m.shape[0]:
        raise ContractViolation(
            f"{len(labels)} labels for a {m.shape[0]}-unit weights matrix"
        )
    rows = _row_index(m)
    keep = labels[rows] == labels[m.indices]
    deg_before = np.diff(m.indptr)
    new_deg = np.bincount(rows[keep], minlength=m.shape[0])
    indptr = np.concatenate([[0], np.cumsum(new_deg)])
    masked = sp.csr_matrix(
        (np.ones(int(keep.sum())), m.indices[keep], indptr), shape=m.shape
    )
    emptied = np.flatnonzero((deg_before > 0) & (new_deg == 0))
    return ContiguityMatrix(
        _normalized_by_degree(masked),
        normalized=True,
        emptied=tuple(int(k) for k in emptied),
    )


def border_flags(W: ContiguityMatrix, labels: Sequence) -> np.ndarray:
    """True where a unit has at least one neighbor with a different label."""
    labels = np.asarray([str(getattr(v, "value", v)) for v in labels])
    m = W.sparse
    rows = _row_index(m)
    cross = labels[rows] != labels[m.indices]
    return np.bincount(rows[cross], minlength=m.shape[0]) > 0


def perimeter(polygon) -> float:
    """Total length of all rings (exterior and holes)."""
    total = 0.0
    for ring in _rings_of(polygon):
        total += float(np.hypot(*np.diff(ring, axis=0).T).sum())
    return total


def shared_border_length(
    place_a, place_b, snap_tolerance: float = DEFAULT_SNAP_TOLERANCE
) -> float:
    """Length of boundary common to two polygons, in coordinate units.

    Edges of ``place_a`` and ``place_b`` are paired when collinear (both end
    points of one within ``snap_tolerance`` of the other's supporting line)
    and their projected overlaps are summed. Point-only contact gives 0.
    """
    xa, _, sa, ea = _flatten([place_a])
    xb, _, sb, eb = _flatten([place_b])
    xa, xb = _snap(xa, snap_tolerance), _snap(xb, snap_tolerance)
    if len(sa) == 0 or len(sb) == 0:
        return 0.0
    eps = snap_tolerance
    cell = max(_cell_size(xa, sa, ea, eps), _cell_size(xb, sb, eb, eps))
    ia, ib = _bbox_join(
        _edge_boxes(xa, sa, ea, eps), _edge_boxes(xb, sb, eb, eps), cell
    )
    p0, p1 = xa[sa[ia]], xa[ea[ia]]
    q0, q1 = xb[sb[ib]], xb[eb[ib]]
    d = p1 - p0
    length = np.hypot(d[:, 0], d[:, 1])
    ok = length > 0
    p0, q0, q1, d, length = p0[ok], q0[ok], q1[ok], d[ok], length[ok]
    u = d / length[:, None]

    def along(q):
        r = q - p0
        return r[:, 0] * u[:, 0] + r[:, 1] * u[:, 1], np.abs(
            u[:, 0] * r[:, 1] - u[:, 1] * r[:, 0]
        )

    t0, off0 = along(q0)
    t1, off1 = along(q1)
    collinear = (off0 <= eps) & (off1 <= eps)
    lo = np.maximum(np.minimum(t0, t1), 0.0)
    hi = np.minimum(np.maximum(t0, t1), length)
    overlap = np.clip(hi - lo, 0.0, None)
    return float(overlap[collinear].sum())


def _fmt(x: float) -> str:
    return repr(float(x))


def write_weights(path: str | Path, W: ContiguityMatrix, ids: Sequence[str]) -> None:
    """One line per unit: ``id n_neighbors id:weight ...``."""
    if len(ids) != W.n:
        raise ContractViolation("ids do not match the weights matrix")
    lines = []
    for i in range(W.n):
        row = W.row(i)
        parts = [ids[i], str(len(row))]
        parts.extend(f"{ids[j]}:{_fmt(w)}" for j, w in row)
        lines.append(" ".join(parts))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_weights(path: str | Path) -> tuple[list[str], ContiguityMatrix]:
    """Inverse of :func:`write_weights`."""
    ids: list[str] = []
    entries: list[list[tuple[str, float]]] = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
        if not line.strip():
            continue
        parts = line.split()
        try:
            count = int(parts[1])
            pairs = [p.rsplit(":", 1) for p in parts[2:]]
            row = [(k, float(w)) for k, w in pairs]
        except (IndexError, ValueError) as exc:
            raise ParseError(f"bad weights line {lineno + 1}: {exc}") from exc
        if count != len(row):
            raise ParseError(f"weights line {lineno + 1}: expected {count} entries")
        ids.append(parts[0])
        entries.append(row)
    pos = {k: i for i, k in enumerate(ids)}
    r, c, v = [], [], []
    for i, row in enumerate(entries):
        for k, w in row:
            if k not in pos:
                raise ParseError(f"weights refer to unknown id {k!r}", ids=[k])
            r.append(i)
            c.append(pos[k])
            v.append(w)
    n = len(ids)
    m = sp.csr_matrix((np.array(v, dtype=float), (r, c)), shape=(n, n))
    normalized = bool(n) and np.allclose(
        np.asarray(m.sum(axis=1)).ravel()[np.diff(m.indptr) > 0], 1.0, atol=1e-12
    )
    return ids, ContiguityMatrix(m, normalized=normalized)
