"""Synthetic grid metros for tests, demos and scale checks.

Each metro is a ``grid x grid`` lattice of square block groups. The middle
40% of the lattice is the core city; a five-piece strip on each side of it
forms 20 suburbs that touch the core; four corner exurbs sit one
unincorporated row away from the suburbs. Place polygons are plain
rectangles, so most core/suburb contacts are collinear edges without
shared vertices.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .ingestion import ATTRIBUTE_COLUMNS, GROUPS


def rectangle(x0: float, y0: float, x1: float, y1: float) -> list[list[float]]:
    """Closed counter-clockwise ring."""
    return [[x0, y0], [x1, y0], [x1, y1], [x0, y1], [x0, y0]]


def square_grid(nrows: int, ncols: int, size: float = 1.0) -> list[list[list[float]]]:
    """Rings of an ``nrows x ncols`` lattice of squares, row-major from the bottom."""
    return [
        rectangle(c * size, r * size, (c + 1) * size, (r + 1) * size)
        for r in range(nrows)
        for c in range(ncols)
    ]


def feature_collection(features: list[dict]) -> dict:
    return {"type": "FeatureCollection", "features": features}


def polygon_feature(fid: str, ring, msa: str = "", place: str = "") -> dict:
    return {
        "type": "Feature",
        "properties": {"id": fid, "msa": msa, "place": place},
        "geometry": {"type": "Polygon", "coordinates": [ring]},
    }


def _layout(grid: int):
    c0, c1 = round(0.3 * grid), round(0.7 * grid)
    r0, r1 = round(0.2 * grid), round(0.8 * grid)
    if r0 < 2 or c0 - r0 < 1:
        raise ValueError(f"grid {grid} is too small for the metro layout")
    places: list[tuple[str, tuple[int, int, int, int]]] = [("CORE", (c0, c0, c1, c1))]
    # (col0, row0, col1, row1) half-open cell ranges
    xs = np.linspace(r0, r1, 6).round().astype(int)
    ys = np.linspace(c0, c1, 6).round().astype(int)
    k = 0
    for a, b in zip(xs[:-1], xs[1:]):
        places.append((f"S{k:02d}", (a, c1, b, r1)))  # north strip
        places.append((f"S{k + 1:02d}", (a, r0, b, c0)))  # south strip
        k += 2
    for a, b in zip(ys[:-1], ys[1:]):
        places.append((f"S{k:02d}", (r0, a, c0, b)))  # west strip
        places.append((f"S{k + 1:02d}", (c1, a, r1, b)))  # east strip
        k += 2
    e = r0 - 1
    places += [
        ("X0", (0, 0, e, e)),
        ("X1", (grid - e, 0, grid, e)),
        ("X2", (0, grid - e, e, grid)),
        ("X3", (grid - e, grid - e, grid, grid)),
    ]
    return places


def make_synthetic_dataset(
    out_dir: str | Path,
    n_metros: int = 2,
    grid: int = 50,
    cell: float = 500.0,
    seed: int = 0,
    drop: int = 0,
    messy: bool = True,
    moran: bool = True,
    permutations: int = 999,
) -> Path:
    """Write geometry, attributes, places and a config; return the config path.

    ``drop`` removes that many cells from the last row of the last metro
    (to hit an exact unit count). With ``messy`` a few cells get zero
    population, one core cell has no attribute row and the table carries
    one row with no geometry.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    layout = _layout(grid)

    units, places, rows, place_rows, metros = [], [], [], [], {}
    for m in range(n_metros):
        msa = f"M{m}"
        ox = m * (grid + 10) * cell
        owner = np.full((grid, grid), "", dtype=object)
        for name, (a, b, c, d) in layout:
            owner[b:d, a:c] = f"{msa}-{name}"
        profiles = {
            name: rng.dirichlet(np.ones(len(GROUPS)) * (0.6 if name == "CORE" else 0.4))
            for name, _ in layout
        }
        for name, (a, b, c, d) in layout:
            pid = f"{msa}-{name}"
            places.append(polygon_feature(
                pid, rectangle(ox + a * cell, b * cell, ox + c * cell, d * cell), msa
            ))
        metros[msa] = {"core": [f"{msa}-CORE"]}

        place_counts: dict[str, np.ndarray] = {}
        place_cells: dict[str, int] = {}
        n_cells = grid * grid
        if m == n_metros - 1 and drop:
            n_cells -= drop
        for k in range(n_cells):
            r, c = divmod(k, grid)
            uid = f"{msa}-{r:03d}{c:03d}"
            pid = owner[r, c]
            units.append(polygon_feature(
                uid, rectangle(ox + c * cell, r * cell, ox + (c + 1) * cell, (r + 1) * cell),
                msa, pid,
            ))
            base = profiles[pid.split("-", 1)[1]] if pid else np.full(len(GROUPS), 0.2)
            p = rng.dirichlet(base * 25 + 0.05)
            pop = int(rng.integers(300, 2500))
            if messy and rng.random() < 0.003:
                pop = 0
            counts = rng.multinomial(pop, p)
            if messy and m == 0 and pid.endswith("CORE") and k == grid * (grid // 2) + grid // 2:
                continue  # no attribute row
            income = float(np.round(rng.lognormal(np.log(55_000), 0.35), 0))
            rows.append([uid, *counts.tolist(), income, cell * cell])
            if pid:
                place_counts[pid] = place_counts.get(pid, 0) + counts
                place_cells[pid] = place_cells.get(pid, 0) + 1
        for pid in sorted(place_counts):
            income = float(np.round(rng.lognormal(np.log(60_000), 0.3), 0))
            place_rows.append(
                [pid, *place_counts[pid].tolist(), income, place_cells[pid] * cell * cell]
            )
    if messy:
        rows.append(["ZZZ", 1, 0, 0, 0, 0, "", ""])

    (out / "blockgroups.geojson").write_text(json.dumps(feature_collection(units)))
    (out / "places.geojson").write_text(json.dumps(feature_collection(places)))
    for name, data in (("attributes.csv", rows), ("place_attributes.csv", place_rows)):
        with open(out / name, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(ATTRIBUTE_COLUMNS)
            w.writerows(data)

    config = {
        "geometry": "blockgroups.geojson",
        "attributes": "attributes.csv",
        "places": "places.geojson",
        "place_attributes": "place_attributes.csv",
        "metros": metros,
        "attribute": "herfindahl",
        "moran": moran,
        "permutations": permutations,
        "seed": 42,
        "output_dir": "out",
        "regressions": [
            {
                "name": "main",
                "dependent": "max_bdi_h",
                "regressors": ["H", "BORDER", "PERCBORDER", "PERCBLK", "MEDINCRAT", "POPDENS"],
            }
        ],
    }
    path = out / "config.json"
    path.write_text(json.dumps(config, indent=2))
    return path
