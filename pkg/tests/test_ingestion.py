import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer
from urllib.parse import parse_qs, urlparse

import pytest

from borderdisparity.errors import (
    ColumnMappingError,
    ConfigError,
    DuplicateKeyError,
    GeometryKindError,
    ParseError,
    TransportError,
)
from borderdisparity.ingestion import (
    ACS_VARIABLES,
    AttributeRow,
    Region,
    classify_regions,
    fetch_acs_extract,
    identify_suburbs,
    join_attributes,
    load_attributes,
    load_geounits,
)
from borderdisparity.synthetic import feature_collection, polygon_feature, rectangle

from _fixtures import unit, write_attributes, write_json


def test_load_geounits_reads_properties_and_closes_rings(tmp_path):
    open_ring = [[0, 0], [1, 0], [1, 1], [0, 1]]
    feats = [
        polygon_feature("a", open_ring, "M1", "P1"),
        {
            "type": "Feature",
            "properties": {"id": 7},
            "geometry": {
                "type": "MultiPolygon",
                "coordinates": [[rectangle(2, 0, 3, 1)], [rectangle(5, 0, 6, 1)]],
            },
        },
    ]
    units = load_geounits(write_json(tmp_path / "g.geojson", feature_collection(feats)))
    a, b = units
    assert (a.id, a.msa_id, a.place_id) == ("a", "M1", "P1")
    assert a.rings[0].shape == (5, 2)
    assert (a.rings[0][0] == a.rings[0][-1]).all()
    assert b.id == "7" and len(b.polygons) == 2
    assert a.region_label is Region.OUTSIDE


def test_duplicate_feature_id(tmp_path):
    feats = [polygon_feature("a", rectangle(0, 0, 1, 1)), polygon_feature("a", rectangle(1, 0, 2, 1))]
    with pytest.raises(DuplicateKeyError) as info:
        load_geounits(write_json(tmp_path / "g.geojson", feature_collection(feats)))
    assert info.value.ids == ["a"]


def test_linestring_feature_rejected_with_index(tmp_path):
    feats = [
        polygon_feature("a", rectangle(0, 0, 1, 1)),
        {"type": "Feature", "properties": {"id": "b"},
         "geometry": {"type": "LineString", "coordinates": [[0, 0], [1, 1]]}},
    ]
    with pytest.raises(GeometryKindError) as info:
        load_geounits(write_json(tmp_path / "g.geojson", feature_collection(feats)))
    assert info.value.feature_index == 1
    assert isinstance(info.value, ParseError)


@pytest.mark.parametrize(
    "doc",
    [
        "not json",
        json.dumps({"type": "Feature"}),
        json.dumps(feature_collection([{"type": "Feature", "properties": {}, "geometry": None}])),
        json.dumps(feature_collection([polygon_feature("a", [[0, 0], [1, 0], [0, 0]])])),
    ],
)
def test_malformed_geometry_files(tmp_path, doc):
    path = tmp_path / "g.geojson"
    path.write_text(doc)
    with pytest.raises(ParseError):
        load_geounits(path)


def test_load_attributes(tmp_path):
    path = write_attributes(tmp_path / "a.csv", [["x", 1, 2, 3, 4, 5, 50000, 1e6], ["y", 0, 0, 0, 0, 0, "", ""]])
    table = load_attributes(path)
    assert table["x"] == AttributeRow((1, 2, 3, 4, 5), 50000.0, 1e6)
    assert table["y"].median_income is None and table["y"].total == 0


def test_attributes_missing_column(tmp_path):
    path = tmp_path / "a.csv"
    path.write_text("id,white,black\nx,1,2\n")
    with pytest.raises(ColumnMappingError):
        load_attributes(path)


@pytest.mark.parametrize("bad", [["x", -1, 0, 0, 0, 0, "", ""], ["x", 1.5, 0, 0, 0, 0, "", ""], ["x", 1, 0, 0, 0, 0, "abc", ""]])
def test_attributes_bad_values(tmp_path, bad):
    with pytest.raises(ParseError):
        load_attributes(write_attributes(tmp_path / "a.csv", [bad]))


def test_attributes_duplicate_row(tmp_path):
    rows = [["x", 1, 0, 0, 0, 0, "", ""]] * 2
    with pytest.raises(DuplicateKeyError):
        load_attributes(write_attributes(tmp_path / "a.csv", rows))


def test_join_attributes_cases():
    units = [unit("a", rectangle(0, 0, 1, 1)), unit("b", rectangle(1, 0, 2, 1)), unit("c", rectangle(2, 0, 3, 1))]
    table = {
        "a": AttributeRow((1, 1, 1, 1, 1), 40000.0, 1e6),
        "c": AttributeRow((0, 0, 0, 0, 0)),
        "zzz": AttributeRow((1, 0, 0, 0, 0)),
    }
    joined, warnings = join_attributes(units, table)
    assert [u.excluded for u in joined] == [None, "missing_attributes", "zero_population"]
    assert joined[0].counts == (1, 1, 1, 1, 1) and joined[0].populated
    assert not joined[1].populated and not joined[2].populated
    assert len(warnings) == 1 and "zzz" in warnings[0]


def test_classify_regions():
    units = [unit(i, rectangle(0, 0, 1, 1), place=p) for i, p in [("1", "C"), ("2", "S"), ("3", "X"), ("4", "")]]
    out = classify_regions(units, {"C"}, {"S"})
    assert [u.region_label for u in out] == [Region.CORE, Region.SUBURB, Region.OUTSIDE, Region.OUTSIDE]
    with pytest.raises(ConfigError):
        classify_regions(units, set())


def _place(pid, ring):
    return unit(pid, ring)


def test_identify_suburbs_strip_and_corner():
    # 3x3 block of places around a central core: all eight touch (corners count)
    places = [_place(f"p{r}{c}", rectangle(c, r, c + 1, r + 1)) for r in range(3) for c in range(3)]
    assert identify_suburbs(places, {"p11"}) == {p.id for p in places} - {"p11"}
    strip = [_place(f"s{c}", rectangle(c, 0, c + 1, 1)) for c in range(3)]
    assert identify_suburbs(strip, {"s0"}) == {"s1"}


def test_identify_suburbs_gap_and_exclusion():
    core = _place("core", rectangle(0, 0, 10, 10))
    near = _place("near", rectangle(10, 0, 20, 10))
    far = _place("far", rectangle(10.5, 20, 20, 30))
    river = _place("river", rectangle(0, 10, 10, 20))
    got = identify_suburbs([core, near, far, river], {"core"}, exclude={"river"})
    assert got == {"near"}


def test_identify_suburbs_config_errors():
    places = [_place("a", rectangle(0, 0, 1, 1))]
    with pytest.raises(ConfigError):
        identify_suburbs(places, set())
    with pytest.raises(ConfigError):
        identify_suburbs(places, {"missing"})


HEADER = [*ACS_VARIABLES.values(), "state", "county", "tract", "block group"]


def _acs_payload(county):
    # column order follows ACS_VARIABLES: total, white, black, asian, latino, income
    rows = [
        [100, 50, 20, 10, 15, 52000, "17", county, "000200", "1"],
        [40, 40, 0, 0, 0, -666666666, "17", county, "000100", "2"],
    ]
    return [HEADER] + [[str(v) for v in r] for r in rows]


class _Handler(BaseHTTPRequestHandler):
    mode = "ok"
    requests: list = []

    def do_GET(self):
        q = parse_qs(urlparse(self.path).query)
        type(self).requests.append(q)
        if type(self).mode == "forbidden":
            self.send_response(403)
            self.end_headers()
            return
        county = q["in"][0].split()[1].split(":")[1]
        payload = _acs_payload(county)
        if type(self).mode == "drift":
            payload[0] = [h.replace("B03002_004E", "B03002_004M") for h in payload[0]]
        body = json.dumps(payload).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, *args):
        pass


@pytest.fixture
def acs_server(monkeypatch):
    monkeypatch.setenv("TEST_ACS_KEY", "secret")
    _Handler.mode = "ok"
    _Handler.requests = []
    server = HTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_port}/acs", _Handler
    server.shutdown()
    server.server_close()


def test_fetch_writes_sorted_extract(tmp_path, acs_server):
    url, handler = acs_server
    out = fetch_acs_extract(url, [("17", "031"), ("17", "043")], tmp_path / "a.csv", key_env="TEST_ACS_KEY")
    lines = out.read_text().splitlines()
    assert lines[0] == "id,white,black,asian,latino,other,median_income,land_area_m2"
    assert lines[1] == "170310001002,40,0,0,0,0,,"
    assert lines[2] == "170310002001,50,20,10,15,5,52000.0,"
    assert len(lines) == 5
    q = handler.requests[0]
    assert q["for"] == ["block group:*"]
    assert q["in"] == ["state:17 county:031 tract:*"]
    assert q["key"] == ["secret"]
    table = load_attributes(out)
    assert table["170310002001"].counts == (50, 20, 10, 15, 5)


def test_fetch_is_byte_identical_on_rerun(tmp_path, acs_server):
    url, _ = acs_server
    a = fetch_acs_extract(url, [("17", "031")], tmp_path / "a.csv", key_env="TEST_ACS_KEY").read_bytes()
    b = fetch_acs_extract(url, [("17", "031")], tmp_path / "b.csv", key_env="TEST_ACS_KEY").read_bytes()
    assert a == b


def test_fetch_forbidden_leaves_no_file(tmp_path, acs_server):
    url, handler = acs_server
    handler.mode = "forbidden"
    with pytest.raises(TransportError) as info:
        fetch_acs_extract(url, [("17", "031")], tmp_path / "a.csv", key_env="TEST_ACS_KEY")
    assert info.value.status == 403
    assert list(tmp_path.iterdir()) == []


def test_fetch_schema_drift(tmp_path, acs_server):
    url, handler = acs_server
    handler.mode = "drift"
    with pytest.raises(ColumnMappingError):
        fetch_acs_extract(url, [("17", "031")], tmp_path / "a.csv", key_env="TEST_ACS_KEY")
    assert not (tmp_path / "a.csv").exists()


def test_fetch_requires_key(tmp_path, monkeypatch):
    monkeypatch.delenv("NO_SUCH_KEY", raising=False)
    with pytest.raises(ConfigError):
        fetch_acs_extract("http://127.0.0.1:1/", [("17", "031")], tmp_path / "a.csv", key_env="NO_SUCH_KEY")
