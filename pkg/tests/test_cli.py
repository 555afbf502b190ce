import csv
import json
import subprocess
import sys

import pytest

from borderdisparity.cli import main
from borderdisparity.synthetic import make_synthetic_dataset

from _fixtures import twelve_unit_dataset, square_units, write_json


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_contiguity_subcommand_on_3x3(tmp_path, capsys):
    from borderdisparity.synthetic import feature_collection, polygon_feature

    units = square_units(3, 3)
    feats = [polygon_feature(u.id, u.rings[0].tolist()) for u in units]
    write_json(tmp_path / "g.geojson", feature_collection(feats))
    write_json(tmp_path / "c.json", {"geometry": "g.geojson", "output_dir": "o"})
    assert main(["contiguity", "--config", str(tmp_path / "c.json")]) == 0
    lines = (tmp_path / "o" / "weights.txt").read_text().splitlines()
    center = lines[4].split()
    assert center[:2] == ["u1_1", "8"]
    assert all(p.endswith(":0.125") for p in center[2:])
    assert lines[0].split()[1] == "3"


def test_twelve_unit_bdi_csv(tmp_path):
    config = twelve_unit_dataset(tmp_path)
    assert main(["bdi", "--config", str(config), "--threads", "1"]) == 0
    rows = {r["id"]: r for r in read_csv(tmp_path / "out" / "bdi.csv")}
    assert float(rows["bg05"]["bdi"]) == pytest.approx(-0.3, abs=1e-12)
    assert float(rows["bg06"]["bdi"]) == pytest.approx(0.3, abs=1e-12)
    assert float(rows["bg05"]["ndi_u"]) == pytest.approx(0.5, abs=1e-12)
    assert rows["bg00"]["bdi"] == "0.0" and rows["bg00"]["on_border"] == "false"
    assert rows["bg05"]["region"] == "Core" and rows["bg06"]["region"] == "Suburb"
    geo = json.loads((tmp_path / "out" / "bdi.geojson").read_text())
    props = {f["properties"]["id"]: f["properties"] for f in geo["features"]}
    assert props["bg06"]["bdi"] == pytest.approx(0.3, abs=1e-12)


def test_analyze_is_deterministic(tmp_path):
    config = twelve_unit_dataset(tmp_path)
    assert main(["analyze", "--config", str(config), "--out", str(tmp_path / "a"), "--threads", "1"]) == 0
    assert main(["analyze", "--config", str(config), "--out", str(tmp_path / "b"), "--threads", "3"]) == 0
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_missing_input_file(tmp_path, capsys):
    config = twelve_unit_dataset(tmp_path)
    (tmp_path / "attrs.csv").unlink()
    assert main(["analyze", "--config", str(config)]) == 1
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "ConfigError"
    assert not (tmp_path / "out").exists()


def test_bad_attribute_file_reports_module(tmp_path, capsys):
    config = twelve_unit_dataset(tmp_path)
    (tmp_path / "attrs.csv").write_text("id,white\nbg00,1\n")
    assert main(["bdi", "--config", str(config)]) == 1
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "ColumnMappingError"
    assert err["module"] == "ingestion"


def test_unknown_subcommand_exits_2():
    proc = subprocess.run(
        [sys.executable, "-m", "borderdisparity.cli", "frobnicate"], capture_output=True, text=True
    )
    assert proc.returncode == 2


def test_regress_reads_saved_summary(tmp_path):
    config = make_synthetic_dataset(tmp_path / "syn", n_metros=3, grid=30, moran=False)
    out = tmp_path / "syn" / "out"
    assert main(["analyze", "--config", str(config), "--threads", "1"]) == 0
    first = (out / "regression.csv").read_bytes()
    (out / "regression.csv").unlink()
    assert main(["regress", "--config", str(config)]) == 0
    assert (out / "regression.csv").read_bytes() == first
    meta = json.loads((out / "regression.json").read_text())
    assert meta[0]["clusters"] == 3
    assert meta[0]["specification"]["name"] == "main"


def test_regress_without_summary(tmp_path, capsys):
    config = twelve_unit_dataset(tmp_path)
    assert main(["regress", "--config", str(config)]) == 1
    assert json.loads(capsys.readouterr().err)["error"] == "ConfigError"


def test_attribute_override(tmp_path):
    config = twelve_unit_dataset(tmp_path)
    assert main(["bdi", "--config", str(config), "--attribute", "percent_black"]) == 0
    rows = read_csv(tmp_path / "out" / "bdi.csv")
    assert {r["attribute"] for r in rows} == {"0.2", "0.0"}
    bg05 = next(r for r in rows if r["id"] == "bg05")
    # five uniform neighbors at 0.2 and three monoethnic (white) ones at 0
    assert float(bg05["ndi_u"]) == pytest.approx(0.125, abs=1e-12)
    assert float(bg05["bdi"]) == pytest.approx(-0.075, abs=1e-12)


def test_weights_file_chains_into_analyze(tmp_path):
    config = twelve_unit_dataset(tmp_path)
    assert main(["contiguity", "--config", str(config), "--out", str(tmp_path / "w")]) == 0
    cfg = json.loads(config.read_text())
    cfg["weights"] = "w/weights.txt"
    chained = write_json(tmp_path / "chained.json", cfg)
    assert main(["bdi", "--config", str(chained), "--out", str(tmp_path / "x")]) == 0
    assert main(["bdi", "--config", str(config), "--out", str(tmp_path / "y")]) == 0
    assert (tmp_path / "x" / "bdi.csv").read_bytes() == (tmp_path / "y" / "bdi.csv").read_bytes()


def test_unfittable_regression_is_recorded_not_fatal(tmp_path):
    config = make_synthetic_dataset(tmp_path, n_metros=1, grid=20, moran=False)
    assert main(["analyze", "--config", str(config), "--threads", "1"]) == 0
    manifest = json.loads((tmp_path / "out" / "run_manifest.json").read_text())
    assert manifest["regressions"] == []
    assert manifest["regressions_failed"][0]["name"] == "main"
    assert "2 clusters" in manifest["regressions_failed"][0]["reason"]
    assert not (tmp_path / "out" / "regression.csv").exists()
    assert (tmp_path / "out" / "rankings_max.csv").exists()


@pytest.mark.parametrize(
    "patch, fragment",
    [
        ({"metros": {}}, "no metros"),
        ({"metros": {"M": {"core": []}}}, "no core"),
        ({"attribute": "percent_purple"}, "attribute"),
        ({"snap_tolerance": -1}, "snap_tolerance"),
        ({"moran": True, "permutations": 10}, "permutations"),
        ({"regressions": [{"regressors": ["NOPE"]}]}, "regression"),
        ({"regressions": [{"name": "a"}, {"name": "a"}]}, "unique"),
    ],
)
def test_config_validation(tmp_path, capsys, patch, fragment):
    config = twelve_unit_dataset(tmp_path)
    cfg = {**json.loads(config.read_text()), **patch}
    write_json(config, cfg)
    assert main(["analyze", "--config", str(config)]) == 1
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "ConfigError" and fragment in err["message"]


def test_default_regression_uses_all_covariates(tmp_path):
    from borderdisparity.aggregation import COVARIATES
    from borderdisparity.pipeline import load_config

    config = twelve_unit_dataset(tmp_path)
    cfg = json.loads(config.read_text())
    del cfg["regressions"]
    write_json(config, cfg)
    (spec,) = load_config(config).regressions
    assert spec.dependent == "max_bdi_h" and spec.regressors == COVARIATES
    (spec,) = load_config(config, {"attribute": "percent_black"}).regressions
    assert spec.dependent == "max_bdi_pblack"
    assert load_config(config, {"attribute": "percent_asian"}).regressions == ()


def test_every_excluded_unit_listed_once(tmp_path):
    config = make_synthetic_dataset(tmp_path, n_metros=2, grid=20, moran=False)
    cfg = json.loads(config.read_text())
    cfg["regressions"] = []
    write_json(config, cfg)
    # a unit cut off from all neighbors: it becomes an isolate
    geo = json.loads((tmp_path / "blockgroups.geojson").read_text())
    lonely = geo["features"][0]
    lonely["properties"]["place"] = "M0-CORE"
    lonely["geometry"]["coordinates"] = [[[-9e5, 0], [-8e5, 0], [-8e5, 1e5], [-9e5, 1e5], [-9e5, 0]]]
    write_json(tmp_path / "blockgroups.geojson", geo)
    assert main(["analyze", "--config", str(config)]) == 0
    out = tmp_path / "out"
    iso = [r["id"] for r in read_csv(out / "masked_isolates.csv")]
    exc = [r["id"] for r in read_csv(out / "excluded_units.csv")]
    bdi_ids = {r["id"] for r in read_csv(out / "bdi.csv")}
    assert lonely["properties"]["id"] in iso
    assert len(exc) > 0
    assert not set(iso) & set(exc)
    assert len(iso) == len(set(iso)) and len(exc) == len(set(exc))
    assert not (set(iso) | set(exc)) & bdi_ids
