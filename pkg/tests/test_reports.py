from __future__ import annotations

import csv
import json

import numpy as np
import pytest

from qslab import reports
from qslab.carleson import compute_omega_field, kahane_weight_field
from qslab.corona import decompose
from qslab.cubes import root_cube, unit_root
from qslab.extension import (
    ExtensionEvaluator,
    whitney_decompose,
    whitney_window,
)
from qslab.maps import affine_test_map, snowflake_map
from qslab.affine import AffineMap


@pytest.fixture(scope="module")
def snow_field():
    root = root_cube(unit_root(2))
    return root, compute_omega_field(snowflake_map(2, 0.25, 3), root,
                                     J=3, M=3.0, m=3)


@pytest.fixture(scope="module")
def affine_parts():
    root = root_cube(unit_root(1))
    map_obj = affine_test_map(AffineMap(np.array([[2.0]]), np.array([0.3])))
    field = compute_omega_field(map_obj, root, J=3, M=3.0, m=4)
    dec = decompose(field, eps=0.05, tau=0.3)
    return map_obj, field, dec


def test_fmt_scalars():
    assert reports.fmt("0:0@0") == "0:0@0"
    assert reports.fmt(None) == ""
    assert reports.fmt(True) == "1"
    assert reports.fmt(False) == "0"
    assert reports.fmt(3) == "3"
    assert float(reports.fmt(0.1 + 0.2)) == 0.1 + 0.2
    assert float(reports.fmt(np.float64(1.5))) == 1.5


def test_csv_quotes_comma_tokens(tmp_path, snow_field):
    root, field = snow_field
    header, rows = reports.omega_field_rows(field)
    path = tmp_path / "omega.csv"
    reports.write_csv(path, header, rows)
    with open(path, newline="") as fh:
        parsed = list(csv.reader(fh))
    assert parsed[0] == ["cube", "omega", "big_omega"]
    assert len(parsed) == 1 + len(field)
    # d=2 tokens hold a comma yet survive the round trip as one field
    assert parsed[1][0] == "0:0,0@0"
    for row in parsed[1:]:
        assert len(row) == 3
        assert 0.0 <= float(row[1]) <= 0.5


def test_fit_rows_op_norm_blank_only_when_unattained(snow_field):
    _, field = snow_field
    header, rows = reports.fit_rows(field)
    assert header == ["cube", "omega", "big_omega", "op_norm", "attained"]
    for row in rows:
        if row[4]:
            assert row[3] is not None and row[3] > 0
        else:
            assert row[3] is None


def test_level_profile_rows(snow_field):
    _, field = snow_field
    header, rows = reports.level_profile_rows(field)
    assert header == ["level", "count", "min", "mean", "max", "sum"]
    assert [r[0] for r in rows] == [0, 1, 2, 3]
    assert [r[1] for r in rows] == [1, 4, 16, 64]


def test_weight_rows_log_ratio():
    weight = kahane_weight_field(0.1, 3)
    header, rows = reports.weight_rows(weight)
    assert header == ["cube", "w_mean", "log_ratio"]
    # one row per tree cube: 1 + 2 + 4 + 8
    assert len(rows) == 15
    assert rows[0][0] == "0:0@0"
    assert rows[0][2] == pytest.approx(0.0)
    mean = float(weight.values.mean())
    for row in rows:
        assert row[2] == pytest.approx(np.log(row[1] / mean))


def test_region_rows_single_affine_region(affine_parts):
    _, _, dec = affine_parts
    header, rows = reports.region_rows(dec)
    assert len(rows) == 1
    row = dict(zip(header, rows[0]))
    assert row["top"] == "0:0@0"
    assert row["floor_volume"] == pytest.approx(1.0)

    header, rows = reports.region_member_rows(dec)
    roles = {r[-1] for r in rows}
    assert "top" in roles and "floor" in roles


def test_whitney_and_extension_rows(affine_parts):
    map_obj, field, dec = affine_parts
    S = dec.regions[0]
    w = whitney_decompose(S, whitney_window(S), 6)
    header, rows = reports.whitney_rows(w)
    assert header == ["index", "piece", "anchor", "d_box", "underflow"]
    assert len(rows) == len(w)
    assert [r[0] for r in rows] == list(range(len(w)))

    ext = ExtensionEvaluator(S, field, w, map_obj, 0.05, 0.3)
    header, rows = reports.extension_field_rows(ext, 8)
    assert header == ["x1", "F1", "branch"]
    assert len(rows) == 8
    assert {r[-1] for r in rows} <= {"z", "whitney", "far"}


def test_write_json_canonical(tmp_path):
    root = root_cube(unit_root(2))
    payload = {
        "b": np.float64(2.5),
        "a": np.int64(3),
        "cube": root,
        "arr": np.arange(3),
        "flag": np.bool_(True),
    }
    path = tmp_path / "x.json"
    reports.write_json(path, payload)
    text = path.read_text()
    assert text.endswith("\n")
    data = json.loads(text)
    assert data == {"a": 3, "b": 2.5, "cube": "0:0,0@0",
                    "arr": [0, 1, 2], "flag": True}
    assert text.index('"a"') < text.index('"b"')
    reports.write_json(path, payload)
    assert path.read_text() == text


def test_csv_rewrite_is_byte_identical(tmp_path, snow_field):
    _, field = snow_field
    header, rows = reports.omega_field_rows(field)
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    reports.write_csv(p1, header, rows)
    reports.write_csv(p2, header, rows)
    assert p1.read_bytes() == p2.read_bytes()
