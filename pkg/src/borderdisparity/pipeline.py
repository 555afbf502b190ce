"""Config-driven pipeline: ingest, contiguity, indices, summaries, regression."""

from __future__ import annotations

import csv
import json
import logging
import math
import platform
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
import scipy

from . import __version__
from .aggregation import (
    COVARIATES,
    PLACE_METRICS,
    MetroSummary,
    PlaceProfile,
    PlaceSummary,
    metric_correlations,
    metro_summaries,
    place_covariates,
    place_summaries,
    rank_places,
)
from .contiguity import (
    DEFAULT_SNAP_TOLERANCE,
    ContiguityMatrix,
    build_queen_contiguity,
    mask_cross_border,
    perimeter,
    read_weights,
    row_normalize,
    shared_border_length,
    write_weights,
)
from .errors import BDIError, ConfigError, ContractViolation, ParseError, RankError
from .indices import (
    DisparityRecord,
    disparity,
    herfindahl_from_counts,
    local_morans_i,
    share_from_counts,
)
from .ingestion import (
    GROUPS,
    AttributeRow,
    GeoUnit,
    Region,
    classify_regions,
    identify_suburbs,
    join_attributes,
    load_attributes,
    load_geounits,
)
from .regression import DEPENDENTS, RegressionResult, RegressionSpec, fit

logger = logging.getLogger(__name__)

ATTRIBUTES = ("herfindahl", *(f"percent_{g}" for g in GROUPS))
BDI_COLUMNS = ("id", "msa", "place", "region", "attribute", "ndi_u", "ndi_a", "bdi", "on_border")
MORAN_COLUMNS = ("id", "local_i", "pseudo_p", "class")
PLACE_COLUMNS = (
    "place_id", "msa_id", "is_core", "attribute", "n_border", *PLACE_METRICS, *COVARIATES
)
RANK_COLUMNS = ("rank", "place_id", "msa_id", "n_border", *PLACE_METRICS)


@dataclass(frozen=True)
class MetroConfig:
    core: tuple[str, ...]
    exclude: tuple[str, ...] = ()


@dataclass(frozen=True)
class PipelineConfig:
    geometry: Path
    attributes: Path | None = None
    places: Path | None = None
    place_attributes: Path | None = None
    weights: Path | None = None
    metros: Mapping[str, MetroConfig] = field(default_factory=dict)
    attribute: str = "herfindahl"
    snap_tolerance: float = DEFAULT_SNAP_TOLERANCE
    permutations: int = 999
    seed: int = 42
    moran: bool = False
    cutoff_fraction: float = 0.05
    extreme_k: float = 2.0
    output_dir: Path = Path("out")
    regressions: tuple[RegressionSpec, ...] = ()
    echo: Mapping[str, Any] = field(default_factory=dict)


_PATH_KEYS = ("geometry", "attributes", "places", "place_attributes", "weights")
_REQUIRED = {
    "contiguity": ("geometry",),
    "bdi": ("geometry", "attributes", "places"),
    "analyze": ("geometry", "attributes", "places"),
    "regress": (),
}


def _default_regressions(attribute: str) -> tuple[RegressionSpec, ...]:
    for dep, attr in DEPENDENTS.items():
        if attr == attribute:
            return (RegressionSpec(dep, COVARIATES, name="full"),)
    return ()


def load_config(
    path: str | Path,
    overrides: Mapping[str, Any] | None = None,
    command: str = "analyze",
) -> PipelineConfig:
    """Parse and validate a JSON config; relative paths resolve against it.

    ``overrides`` (from CLI flags) replace top-level keys. All referenced
    input files must exist, so failures surface before any computation.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    base = path.parent

    def resolve(key):
        v = raw.get(key)
        return None if v in (None, "") else (base / v)

    paths = {k: resolve(k) for k in _PATH_KEYS}
    for key in _REQUIRED.get(command, ()):
        if paths[key] is None:
            raise ConfigError(f"config is missing '{key}'")
    missing = [str(p) for p in paths.values() if p is not None and not p.exists()]
    if missing:
        raise ConfigError(f"input files not found: {missing}", missing)

    metros = {}
    for msa, m in sorted((raw.get("metros") or {}).items()):
        if isinstance(m, (list, tuple)):
            m = {"core": m}
        core = tuple(str(c) for c in m.get("core", ()))
        if not core:
            raise ConfigError(f"metro {msa!r} has no core place ids", [msa])
        metros[str(msa)] = MetroConfig(core, tuple(str(c) for c in m.get("exclude", ())))
    if command in ("bdi", "analyze") and not metros:
        raise ConfigError("config defines no metros")

    attribute = raw.get("attribute", "herfindahl")
    if attribute not in ATTRIBUTES:
        raise ConfigError(f"attribute must be one of {ATTRIBUTES}, not {attribute!r}")
    tol = float(raw.get("snap_tolerance", DEFAULT_SNAP_TOLERANCE))
    if tol < 0:
        raise ConfigError("snap_tolerance must be >= 0")
    perms = int(raw.get("permutations", 999))
    if raw.get("moran") and perms < 99:
        raise ConfigError("permutations must be >= 99")

    try:
        if "regressions" in raw:
            regs = tuple(RegressionSpec.from_dict(r) for r in raw["regressions"])
        else:
            regs = _default_regressions(attribute)
    except BDIError as exc:
        raise ConfigError(f"bad regression specification: {exc}", exc.ids) from exc
    names = [r.name for r in regs]
    if len(set(names)) != len(names):
        raise ConfigError(f"regression names must be unique: {names}")

    echo = {k: v for k, v in raw.items() if k != "output_dir"}
    return PipelineConfig(
        geometry=paths["geometry"],
        attributes=paths["attributes"],
        places=paths["places"],
        place_attributes=paths["place_attributes"],
        weights=paths["weights"],
        metros=metros,
        attribute=attribute,
        snap_tolerance=tol,
        permutations=perms,
        seed=int(raw.get("seed", 42)),
        moran=bool(raw.get("moran", False)),
        cutoff_fraction=float(raw.get("cutoff_fraction", 0.05)),
        extreme_k=float(raw.get("extreme_k", 2.0)),
        output_dir=base / raw.get("output_dir", "out"),
        regressions=regs,
        echo=echo,
    )


# ----------------------------------------------------------------- writing


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "" if math.isnan(v) else repr(float(v))
    return str(v)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n",
                    encoding="utf-8")
    return path


def _clean(v):
    """JSON-safe copy: NaN becomes null, numpy scalars become Python ones."""
    if isinstance(v, dict):
        return {str(k): _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, (np.bool_,)):
        return bool(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return None if math.isnan(v) else float(v)
    return v


# ------------------------------------------------------------------ stages


@dataclass
class Study:
    """Everything computed up to and including the border disparity step."""

    config: PipelineConfig
    units: list[GeoUnit]
    places: list[GeoUnit]
    suburbs: dict[str, str]  # suburb place id -> msa
    cores: dict[str, str]  # core place id -> msa
    records: list[DisparityRecord]
    excluded: list[tuple[str, str]]
    isolates: list[tuple[str, str]]
    moran: list[tuple]
    warnings: list[str]
    unit_values: dict[str, DisparityRecord]


def _unit_weights(units: Sequence[GeoUnit], config: PipelineConfig) -> ContiguityMatrix:
    if config.weights is None:
        return build_queen_contiguity(units, config.snap_tolerance)
    ids, W = read_weights(config.weights)
    pos = {k: i for i, k in enumerate(ids)}
    missing = [u.id for u in units if u.id not in pos]
    if missing:
        raise ParseError(f"weights file lacks {len(missing)} units", ids=missing[:20])
    order = [pos[u.id] for u in units]
    return W.subset(order)


def _attribute_values(counts: np.ndarray, attribute: str) -> np.ndarray:
    if attribute == "herfindahl":
        return herfindahl_from_counts(counts)
    return share_from_counts(counts, attribute.removeprefix("percent_"))


def prepare(config: PipelineConfig, threads: int = 1) -> Study:
    """Load inputs, label regions and compute NDI/BDI (and Moran) per metro."""
    units = load_geounits(config.geometry)
    units, warnings = join_attributes(units, load_attributes(config.attributes))
    places = load_geounits(config.places)

    suburbs: dict[str, str] = {}
    cores: dict[str, str] = {}
    for msa, mc in config.metros.items():
        metro_places = [p for p in places if p.msa_id in (msa, "")]
        found = identify_suburbs(metro_places, mc.core, config.snap_tolerance, mc.exclude)
        for pid in sorted(found):
            if pid in suburbs:
                raise ConfigError(f"place {pid} touches the cores of two metros", [pid])
            suburbs[pid] = msa
        for pid in mc.core:
            cores[pid] = msa

    by_metro: dict[str, list[int]] = {}
    for i, u in enumerate(units):
        by_metro.setdefault(u.msa_id, []).append(i)
    units = list(units)
    for msa, mc in config.metros.items():
        idx = by_metro.get(msa, [])
        metro_subs = [p for p, m in suburbs.items() if m == msa]
        for i, u in zip(idx, classify_regions([units[i] for i in idx], mc.core, metro_subs)):
            units[i] = u

    W_all = _unit_weights(units, config)
    records: list[DisparityRecord] = []
    excluded, isolates, moran_rows = [], [], []
    for msa in config.metros:
        members = [
            i for i, u in enumerate(units)
            if u.msa_id == msa and u.region_label is not Region.OUTSIDE
        ]
        for i in members:
            if units[i].excluded:
                excluded.append((units[i].id, units[i].excluded))
        idx = [i for i in members if units[i].populated]
        if not idx:
            continue
        sub_units = [units[i] for i in idx]
        labels = [u.region_label.value for u in sub_units]
        counts = np.array([u.counts for u in sub_units], dtype=np.float64)
        H = herfindahl_from_counts(counts)
        x = _attribute_values(counts, config.attribute)

        W_u = row_normalize(W_all.subset(idx))
        W_a = mask_cross_border(W_u, labels)
        ndi_u, ndi_a, d, on_border = disparity(W_u, W_a, x)
        emptied = set(W_a.emptied)
        for k, u in enumerate(sub_units):
            if W_u.degree[k] == 0:
                isolates.append((u.id, "isolate"))
            elif k in emptied:
                isolates.append((u.id, "masked_empty"))
            records.append(
                DisparityRecord(
                    id=u.id, H=float(H[k]), attribute_value=float(x[k]),
                    ndi_u=float(ndi_u[k]), ndi_a=float(ndi_a[k]), bdi=float(d[k]),
                    on_border=bool(on_border[k]), region_label=labels[k],
                    msa_id=msa, place_id=u.place_id,
                )
            )
        if config.moran and len(idx) >= 3:
            res = local_morans_i(W_u, x, config.permutations, config.seed, threads=threads)
            for k, u in enumerate(sub_units):
                moran_rows.append((u.id, res.local_i[k], res.pseudo_p[k], res.cluster[k]))

    return Study(
        config=config,
        units=units,
        places=places,
        suburbs=suburbs,
        cores=cores,
        records=records,
        excluded=excluded,
        isolates=isolates,
        moran=moran_rows,
        warnings=warnings,
        unit_values={r.id: r for r in records},
    )


def _place_profiles(study: Study) -> dict[str, PlaceProfile]:
    cfg = study.config
    if cfg.place_attributes is not None:
        table: Mapping[str, AttributeRow] = load_attributes(cfg.place_attributes)
        return {
            pid: PlaceProfile(row.counts, row.median_income, row.land_area_m2)
            for pid, row in table.items()
        }
    # fall back to summing member block groups; income cannot be aggregated
    acc: dict[str, list[GeoUnit]] = {}
    for u in study.units:
        if u.place_id and u.populated:
            acc.setdefault(u.place_id, []).append(u)
    out = {}
    for pid, members in acc.items():
        counts = tuple(int(sum(u.counts[g] for u in members)) for g in range(len(GROUPS)))
        areas = [u.land_area_m2 for u in members]
        area = None if any(a is None for a in areas) else float(sum(areas))
        out[pid] = PlaceProfile(counts, None, area)
    return out


def summarize_places(study: Study) -> tuple[list[PlaceSummary], list[str]]:
    """Covariates and BDI aggregates for every suburb and core place."""
    cfg = study.config
    profiles = _place_profiles(study)
    place_geom = {p.id: p for p in study.places}
    covs: dict[str, dict] = {}
    diagnostics: list[str] = []
    for msa, mc in cfg.metros.items():
        core_profiles = [profiles[c] for c in mc.core if c in profiles]
        core = PlaceProfile.combine(core_profiles) if len(core_profiles) == len(mc.core) else None
        for pid in sorted(p for p, m in study.suburbs.items() if m == msa):
            geom = place_geom[pid]
            border = sum(
                shared_border_length(geom, place_geom[c], cfg.snap_tolerance) for c in mc.core
            )
            if core is None or pid not in profiles:
                covs[pid] = {"BORDER": border}
                diagnostics.append(f"{pid}: missing place attributes")
                continue
            covs[pid] = place_covariates(profiles[pid], core, border, perimeter(geom))
    summaries, diag = place_summaries(
        study.records, study.suburbs, covs, study.cores, attribute=cfg.attribute
    )
    return summaries, diagnostics + diag


def read_place_summaries(path: str | Path) -> list[PlaceSummary]:
    """Load a ``place_summary.csv`` written by :func:`write_place_summaries`."""

    def num(s):
        return None if s == "" else float(s)

    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in PLACE_COLUMNS if c not in (reader.fieldnames or ())]
        if missing:
            raise ParseError(f"{path}: missing columns {missing}")
        for row in reader:
            out.append(
                PlaceSummary(
                    place_id=row["place_id"],
                    msa_id=row["msa_id"],
                    n_border=int(row["n_border"]),
                    mean=float(row["mean"]),
                    sum=float(row["sum"]),
                    max=float(row["max"]),
                    min=float(row["min"]),
                    range=float(row["range"]),
                    is_core=row["is_core"] == "true",
                    attribute=row["attribute"],
                    covariates={c: num(row[c]) for c in COVARIATES},
                )
            )
    return out


def write_place_summaries(path: Path, summaries: Sequence[PlaceSummary]) -> Path:
    return write_csv(
        path,
        PLACE_COLUMNS,
        (
            (s.place_id, s.msa_id, s.is_core, s.attribute, s.n_border,
             *(s.metric(m) for m in PLACE_METRICS),
             *(s.covariates.get(c) for c in COVARIATES))
            for s in summaries
        ),
    )


def write_regressions(out: Path, results: Sequence[RegressionResult]) -> list[Path]:
    """``regression.csv`` for a single model, ``regression_<name>.csv`` otherwise."""
    written = []
    for res in results:
        name = "regression.csv" if len(results) == 1 else f"regression_{res.spec.name}.csv"
        rows = zip(res.columns, res.coefficients, res.se, res.t, res.p)
        written.append(write_csv(out / name, ("variable", "coefficient", "se", "t", "p"), rows))
    written.append(
        _write_json(out / "regression.json", _clean([r.metadata() for r in results]))
    )
    return written


def _metro_rows(summaries: Sequence[MetroSummary]):
    for m in summaries:
        yield (
            m.msa_id, m.n_suburbs,
            *(getattr(m.h, f) for f in _FIELD_NAMES),
            *(getattr(m.bdi, f) for f in _FIELD_NAMES),
            m.city_pos, m.city_neg, m.sub_pos, m.sub_neg, m.max_in_core, m.min_in_core,
        )


_FIELD_NAMES = ("min", "q05", "q25", "median", "q75", "q95", "max", "mean", "sd", "n")
METRO_COLUMNS = (
    "msa_id", "n_suburbs",
    *(f"h_{f}" for f in _FIELD_NAMES),
    *(f"bdi_{f}" for f in _FIELD_NAMES),
    "city_pos", "city_neg", "sub_pos", "sub_neg", "max_in_core", "min_in_core",
)


def write_indices(study: Study, out: Path) -> list[Path]:
    """``bdi.csv``, diagnostics, optional ``moran.csv`` and ``bdi.geojson``."""
    cfg = study.config
    bad = {uid for uid, _ in study.isolates}
    rows = (
        (r.id, r.msa_id, r.place_id, r.region_label, r.attribute_value,
         r.ndi_u, r.ndi_a, r.bdi, r.on_border)
        for r in study.records if r.id not in bad
    )
    written = [write_csv(out / "bdi.csv", BDI_COLUMNS, rows)]
    written.append(write_csv(out / "masked_isolates.csv", ("id", "reason"), study.isolates))
    written.append(write_csv(out / "excluded_units.csv", ("id", "reason"), study.excluded))
    if cfg.moran:
        written.append(write_csv(out / "moran.csv", MORAN_COLUMNS, study.moran))

    doc = json.loads(Path(cfg.geometry).read_text(encoding="utf-8"))
    labels = {u.id: u.region_label.value for u in study.units}
    for feat in doc["features"]:
        props = feat.setdefault("properties", {})
        fid = str(props["id"])
        r = study.unit_values.get(fid)
        props["region"] = labels.get(fid, Region.OUTSIDE.value)
        props["attribute"] = cfg.attribute
        if r is None:
            props.update(H=None, value=None, ndi_u=None, ndi_a=None, bdi=None, on_border=None)
        else:
            defined = fid not in bad
            props.update(
                H=_clean(r.H),
                value=_clean(r.attribute_value),
                ndi_u=_clean(r.ndi_u),
                ndi_a=_clean(r.ndi_a),
                bdi=_clean(r.bdi) if defined else None,
                on_border=r.on_border,
            )
    path = out / "bdi.geojson"
    path.write_text(json.dumps(doc, separators=(",", ":")) + "\n", encoding="utf-8")
    written.append(path)
    return written


def _manifest(config: PipelineConfig, command: str, counts: dict, extra: dict | None = None):
    return _clean(
        {
            "command": command,
            "package": {"name": "borderdisparity", "version": __version__},
            "versions": {
                "python": platform.python_version(),
                "numpy": np.__version__,
                "scipy": scipy.__version__,
            },
            "config": config.echo,
            "attribute": config.attribute,
            "seed": config.seed,
            "permutations": config.permutations,
            "snap_tolerance": config.snap_tolerance,
            "counts": counts,
            **(extra or {}),
        }
    )


def _study_counts(study: Study) -> dict:
    defined = [r for r in study.records if r.defined]
    return {
        "units": len(study.units),
        "analysis_units": len(study.records),
        "excluded_units": len(study.excluded),
        "masked_or_isolated_units": len(study.isolates),
        "border_units": sum(r.on_border for r in defined),
        "suburbs_identified": len(study.suburbs),
        "core_places": len(study.cores),
        "join_warnings": len(study.warnings),
    }


def run_contiguity(config: PipelineConfig, out: Path | None = None) -> list[Path]:
    out = Path(out or config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    units = load_geounits(config.geometry)
    W = row_normalize(build_queen_contiguity(units, config.snap_tolerance))
    path = out / "weights.txt"
    write_weights(path, W, [u.id for u in units])
    return [path]


def run_bdi(config: PipelineConfig, out: Path | None = None, threads: int = 1) -> list[Path]:
    out = Path(out or config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    study = prepare(config, threads)
    written = write_indices(study, out)
    written.append(
        _write_json(out / "run_manifest.json",
                    _manifest(config, "bdi", _study_counts(study), {"warnings": study.warnings}))
    )
    return written


def run_regress(
    config: PipelineConfig, summary_path: Path, out: Path | None = None
) -> list[Path]:
    out = Path(out or config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    summaries = read_place_summaries(summary_path)
    results = [fit(summaries, spec) for spec in config.regressions]
    return write_regressions(out, results) if results else []


def run_pipeline(config: PipelineConfig, out: Path | None = None, threads: int = 1) -> list[Path]:
    """The full ``analyze`` run; returns the files written."""
    out = Path(out or config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    study = prepare(config, threads)
    written = write_indices(study, out)

    summaries, place_diag = summarize_places(study)
    suburb_rows = [s for s in summaries if not s.is_core]
    written.append(write_place_summaries(out / "place_summary.csv", summaries))
    written.append(write_csv(
        out / "place_diagnostics.csv", ("place_id", "reason"),
        (d.split(": ", 1) for d in place_diag),
    ))

    n_subs = {msa: sum(1 for m in study.suburbs.values() if m == msa) for msa in config.metros}
    metros = metro_summaries(study.records, n_subs, k=config.extreme_k)
    written.append(write_csv(out / "metro_summary.csv", METRO_COLUMNS, _metro_rows(metros)))

    ranked = {}
    if suburb_rows:
        for metric in ("max", "min"):
            top = rank_places(summaries, metric, config.cutoff_fraction)
            ranked[metric] = len(top)
            written.append(write_csv(
                out / f"rankings_{metric}.csv", RANK_COLUMNS,
                ((k + 1, s.place_id, s.msa_id, s.n_border, *(s.metric(m) for m in PLACE_METRICS))
                 for k, s in enumerate(top)),
            ))
        corr = metric_correlations(summaries)
        written.append(write_csv(
            out / "metric_correlations.csv", ("metric", *PLACE_METRICS),
            ((a, *(corr[a, b] for b in PLACE_METRICS)) for a in PLACE_METRICS),
        ))

    specs = [s for s in config.regressions if DEPENDENTS[s.dependent] == config.attribute]
    skipped = [s.name for s in config.regressions if s not in specs]
    # an unfittable model (one metro, too few suburbs) should not sink the run
    results, failed = [], []
    for spec in specs:
        try:
            results.append(fit(summaries, spec))
        except (ContractViolation, RankError) as exc:
            logger.warning("regression %s not fitted: %s", spec.name, exc)
            failed.append({"name": spec.name, "reason": str(exc)})
    if results:
        written.extend(write_regressions(out, results))

    counts = _study_counts(study)
    counts.update(
        suburbs_summarized=len(suburb_rows),
        suburbs_without_border_units=len(place_diag),
        ranked_rows=ranked,
        correlation_n=len(suburb_rows),
    )
    extra = {
        "warnings": study.warnings,
        "place_diagnostics": place_diag,
        "regressions": [r.metadata() for r in results],
        "regressions_skipped_for_attribute": skipped,
        "regressions_failed": failed,
        "notes": [
            "rankings and metric correlations cover summarized suburbs only; "
            "core cities appear in place_summary.csv with is_core=true",
        ],
    }
    names = sorted(p.name for p in written) + ["run_manifest.json"]
    extra["outputs"] = names
    written.append(
        _write_json(out / "run_manifest.json", _manifest(config, "analyze", counts, extra))
    )
    return written
