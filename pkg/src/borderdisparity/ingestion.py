"""Loading geounits and attribute tables, joining them, and labeling regions."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import tempfile
import urllib.error
import urllib.parse
import urllib.request
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .contiguity import DEFAULT_SNAP_TOLERANCE, queen_pairs
from .errors import (
    ColumnMappingError,
    ConfigError,
    DuplicateKeyError,
    GeometryKindError,
    ParseError,
    TransportError,
)

logger = logging.getLogger(__name__)

GROUPS = ("white", "black", "asian", "latino", "other")
ATTRIBUTE_COLUMNS = ("id", *GROUPS, "median_income", "land_area_m2")

# ACS 5-year table B03002 (Hispanic or Latino origin by race) and B19013
# (median household income). "other" is the remainder of the total.
ACS_VARIABLES = {
    "total": "B03002_001E",
    "white": "B03002_003E",
    "black": "B03002_004E",
    "asian": "B03002_006E",
    "latino": "B03002_012E",
    "median_income": "B19013_001E",
}
ACS_GEO_COLUMNS = ("state", "county", "tract", "block group")


class Region(str, Enum):
    CORE = "Core"
    SUBURB = "Suburb"
    OUTSIDE = "Outside"


@dataclass(frozen=True)
class AttributeRow:
    counts: tuple[int, int, int, int, int]
    median_income: float | None = None
    land_area_m2: float | None = None

    @property
    def total(self) -> int:
        return sum(self.counts)


@dataclass(frozen=True, eq=False)
class GeoUnit:
    """A block group or place polygon with its labels and demographics.

    ``polygons`` holds one tuple of rings per polygon part (exterior first,
    then holes); each ring is a read-only ``(m, 2)`` array. ``geometry``
    keeps the GeoJSON geometry object as it was read so it can be written
    back unchanged.
    """

    id: str
    msa_id: str = ""
    place_id: str = ""
    polygons: tuple[tuple[np.ndarray, ...], ...] = ()
    region_label: Region = Region.OUTSIDE
    counts: tuple[int, int, int, int, int] | None = None
    median_income: float | None = None
    land_area_m2: float | None = None
    excluded: str | None = None
    geometry: Mapping | None = field(default=None, repr=False)

    @property
    def rings(self) -> list[np.ndarray]:
        return [ring for poly in self.polygons for ring in poly]

    @property
    def total_population(self) -> int:
        return sum(self.counts) if self.counts is not None else 0

    @property
    def populated(self) -> bool:
        return self.counts is not None and self.excluded is None


def _as_ring(raw, index: int, fid) -> np.ndarray:
    try:
        ring = np.asarray(raw, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"non-numeric coordinates ({exc})", index, [fid]) from exc
    if ring.ndim != 2 or ring.shape[1] < 2:
        raise ParseError("ring is not a list of coordinate pairs", index, [fid])
    ring = ring[:, :2]
    if not np.isfinite(ring).all():
        raise ParseError("non-finite coordinates", index, [fid])
    if len(ring) and not np.array_equal(ring[0], ring[-1]):
        ring = np.vstack([ring, ring[:1]])
    if len(ring) < 4:
        raise ParseError(f"ring has {len(ring)} vertices, need >= 4", index, [fid])
    ring.flags.writeable = False
    return ring


def _parse_geometry(geom, index: int, fid) -> tuple[tuple[np.ndarray, ...], ...]:
    if not isinstance(geom, Mapping):
        raise GeometryKindError("missing geometry", index, [fid])
    kind = geom.get("type")
    coords = geom.get("coordinates")
    if kind == "Polygon":
        parts = [coords]
    elif kind == "MultiPolygon":
        parts = coords
    else:
        raise GeometryKindError(
            f"geometry type {kind!r} is not Polygon or MultiPolygon", index, [fid]
        )
    if not isinstance(parts, list) or not parts:
        raise ParseError("empty polygon coordinates", index, [fid])
    polygons = []
    for part in parts:
        if not isinstance(part, list) or not part:
            raise ParseError("polygon without rings", index, [fid])
        polygons.append(tuple(_as_ring(r, index, fid) for r in part))
    return tuple(polygons)


def load_geounits(path: str | Path, format: str = "geojson") -> list[GeoUnit]:
    """Read a GeoJSON FeatureCollection of Polygon/MultiPolygon features.

    Each feature needs an ``id`` property; ``msa`` and ``place`` properties
    are read when present. Open rings are closed. Other properties are
    ignored.
    """
    if format != "geojson":
        raise ConfigError(f"unsupported geometry format {format!r}")
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})") from exc
    features = doc.get("features") if isinstance(doc, Mapping) else None
    if not isinstance(features, list):
        raise ParseError(f"{path}: not a GeoJSON FeatureCollection")

    units: list[GeoUnit] = []
    seen: set[str] = set()
    for index, feat in enumerate(features):
        if not isinstance(feat, Mapping):
            raise ParseError("feature is not an object", index)
        props = feat.get("properties") or {}
        if "id" not in props or props["id"] in (None, ""):
            raise ParseError("feature has no 'id' property", index)
        fid = str(props["id"])
        if fid in seen:
            raise DuplicateKeyError(f"duplicate id {fid!r} (feature {index})", [fid])
        seen.add(fid)
        polygons = _parse_geometry(feat.get("geometry"), index, fid)
        units.append(
            GeoUnit(
                id=fid,
                msa_id=str(props.get("msa") or ""),
                place_id=str(props.get("place") or ""),
                polygons=polygons,
                geometry=feat.get("geometry"),
            )
        )
    return units


def _optional_float(text: str, column: str, rid: str) -> float | None:
    text = text.strip()
    if not text:
        return None
    try:
        value = float(text)
    except ValueError as exc:
        raise ParseError(f"row {rid!r}: bad {column} {text!r}", ids=[rid]) from exc
    if not math.isfinite(value) or value < 0:
        raise ParseError(f"row {rid!r}: {column} must be >= 0", ids=[rid])
    return value


def load_attributes(path: str | Path) -> dict[str, AttributeRow]:
    """Read an attribute CSV with the fixed header of ``ATTRIBUTE_COLUMNS``."""
    table: dict[str, AttributeRow] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in ATTRIBUTE_COLUMNS if c not in (reader.fieldnames or ())]
        if missing:
            raise ColumnMappingError(f"{path}: missing columns {missing}")
        for row in reader:
            rid = row["id"].strip()
            if rid in table:
                raise DuplicateKeyError(f"{path}: duplicate id {rid!r}", [rid])
            counts = []
            for g in GROUPS:
                try:
                    v = float(row[g])
                except ValueError as exc:
                    raise ParseError(f"row {rid!r}: bad {g} {row[g]!r}", ids=[rid]) from exc
                if v < 0 or v != int(v):
                    raise ParseError(f"row {rid!r}: {g} must be a non-negative integer", ids=[rid])
                counts.append(int(v))
            table[rid] = AttributeRow(
                counts=tuple(counts),
                median_income=_optional_float(row["median_income"], "median_income", rid),
                land_area_m2=_optional_float(row["land_area_m2"], "land_area_m2", rid),
            )
    return table


def join_attributes(
    units: Sequence[GeoUnit], table: Mapping[str, AttributeRow]
) -> tuple[list[GeoUnit], list[str]]:
    """Attach counts and income to each unit by id.

    Units missing from the table are excluded with reason
    ``missing_attributes``; units whose counts sum to zero are excluded with
    reason ``zero_population``. Table rows that match no unit produce a
    warning string instead of an error.
    """
    known = {u.id for u in units}
    warnings = [
        f"attribute row {rid!r} has no matching geometry"
        for rid in sorted(set(table) - known)
    ]
    for w in warnings:
        logger.warning(w)
    out = []
    for u in units:
        row = table.get(u.id)
        if row is None:
            out.append(replace(u, counts=None, excluded="missing_attributes"))
            continue
        out.append(
            replace(
                u,
                counts=row.counts,
                median_income=row.median_income,
                land_area_m2=row.land_area_m2,
                excluded="zero_population" if row.total == 0 else None,
            )
        )
    return out, warnings


def identify_suburbs(
    places: Sequence[GeoUnit],
    core_place_ids: Iterable[str],
    snap_tolerance: float = DEFAULT_SNAP_TOLERANCE,
    exclude: Iterable[str] = (),
) -> set[str]:
    """Places that touch any core place, by the Queen point-sharing predicate.

    ``exclude`` removes places that touch only formally, such as suburbs
    across a river whose polygons extend to mid-channel.
    """
    core = set(core_place_ids)
    if not core:
        raise ConfigError("no core place ids given")
    present = {p.id for p in places}
    missing = sorted(core - present)
    if missing:
        raise ConfigError(f"core places not found among place polygons: {missing}", missing)
    i, j = queen_pairs(places, snap_tolerance)
    suburbs = set()
    for a, b in zip(i.tolist(), j.tolist()):
        ida, idb = places[a].id, places[b].id
        if ida in core and idb not in core:
            suburbs.add(idb)
        elif idb in core and ida not in core:
            suburbs.add(ida)
    return suburbs - set(exclude)


def classify_regions(
    units: Sequence[GeoUnit],
    core_place_ids: Iterable[str],
    suburb_place_ids: Iterable[str] = (),
) -> list[GeoUnit]:
    """Label each unit Core, Suburb or Outside from its containing place."""
    core = set(core_place_ids)
    if not core:
        raise ConfigError("no core place ids given")
    suburbs = set(suburb_place_ids) - core
    out = []
    for u in units:
        if u.place_id in core:
            label = Region.CORE
        elif u.place_id and u.place_id in suburbs:
            label = Region.SUBURB
        else:
            label = Region.OUTSIDE
        out.append(replace(u, region_label=label))
    return out


def _acs_int(value, column: str, geoid: str) -> int:
    try:
        v = int(float(value))
    except (TypeError, ValueError) as exc:
        raise ColumnMappingError(f"{geoid}: non-numeric {column} {value!r}", [geoid]) from exc
    if v < 0:
        raise ColumnMappingError(f"{geoid}: negative {column} {v}", [geoid])
    return v


def _acs_rows(payload, geo_prefix: str) -> list[tuple]:
    if not isinstance(payload, list) or not payload:
        raise ColumnMappingError(f"{geo_prefix}: response is not a table")
    header = payload[0]
    need = list(ACS_VARIABLES.values()) + list(ACS_GEO_COLUMNS)
    missing = [c for c in need if c not in header]
    if missing:
        raise ColumnMappingError(f"{geo_prefix}: response lacks columns {missing}")
    col = {name: header.index(name) for name in need}
    rows = []
    for rec in payload[1:]:
        geoid = "".join(str(rec[col[c]]) for c in ACS_GEO_COLUMNS)
        vals = {k: rec[col[v]] for k, v in ACS_VARIABLES.items()}
        groups = {g: _acs_int(vals[g], g, geoid) for g in GROUPS if g != "other"}
        total = _acs_int(vals["total"], "total", geoid)
        other = total - sum(groups.values())
        if other < 0:
            raise ColumnMappingError(f"{geoid}: group counts exceed total", [geoid])
        try:
            income = float(vals["median_income"])
        except (TypeError, ValueError):
            income = None
        # ACS encodes suppressed estimates as large negative sentinels
        if income is not None and income < 0:
            income = None
        rows.append((geoid, groups["white"], groups["black"], groups["asian"],
                     groups["latino"], other, income))
    return rows


def fetch_acs_extract(
    api_endpoint: str,
    state_county_filters: Sequence[tuple[str, str]],
    out_path: str | Path,
    key_env: str = "CENSUS_API_KEY",
    timeout: float = 60.0,
) -> Path:
    """Download block-group race and income counts into an attribute CSV.

    Every (state, county) pair is requested before anything is written, and
    the file is replaced atomically, so a failed run leaves no partial
    output. Rows are sorted by id; ``land_area_m2`` is left empty because
    the ACS tables do not carry it.
    """
    key = os.environ.get(key_env)
    if not key:
        raise ConfigError(f"environment variable {key_env} is not set")
    if not state_county_filters:
        raise ConfigError("no state/county filters given")
    rows: list[tuple] = []
    for state, county in state_county_filters:
        query = urllib.parse.urlencode(
            {
                "get": ",".join(ACS_VARIABLES.values()),
                "for": "block group:*",
                "in": f"state:{state} county:{county} tract:*",
                "key": key,
            }
        )
        url = f"{api_endpoint}?{query}"
        try:
            with urllib.request.urlopen(url, timeout=timeout) as resp:
                body = resp.read()
        except urllib.error.HTTPError as exc:
            raise TransportError(
                f"ACS request for state {state} county {county} failed with HTTP {exc.code}",
                status=exc.code,
            ) from exc
        except urllib.error.URLError as exc:
            raise TransportError(f"ACS request failed: {exc.reason}") from exc
        try:
            payload = json.loads(body)
        except json.JSONDecodeError as exc:
            raise ColumnMappingError(f"state {state} county {county}: response is not JSON") from exc
        rows.extend(_acs_rows(payload, f"{state}{county}"))

    rows.sort(key=lambda r: r[0])
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=out_path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(ATTRIBUTE_COLUMNS)
            for geoid, *counts, income in rows:
                w.writerow([geoid, *counts, "" if income is None else repr(income), ""])
        os.replace(tmp, out_path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return out_path
