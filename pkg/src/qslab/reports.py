"""Deterministic CSV and JSON emission for every pipeline stage.

All writers format floats with the shortest round-trip representation
and sort JSON keys, so identical inputs yield byte-identical files.
Cube tokens may contain commas (multi-axis coordinates); the CSV layer
quotes them per RFC 4180.
"""

from __future__ import annotations

import csv
import json
from typing import Iterable, Sequence

import numpy as np

from .carleson import OmegaField, WeightField
from .corona import CoronaDecomposition, classify_minimal
from .cubes import CubeSet, DyadicCube, enumerate_cubes
from .extension import (
    TAG_FAR,
    TAG_FLOOR,
    TAG_WHITNEY,
    ExtensionEvaluator,
    WhitneyDecomposition,
)
from .extract import ExtractionResult

# branch tags of the extension evaluator, by code
TAG_NAMES = {TAG_FLOOR: "z", TAG_WHITNEY: "whitney", TAG_FAR: "far"}


def fmt(value) -> str:
    """Canonical scalar text: shortest round-trip floats, bare ints."""
    if isinstance(value, str):
        return value
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def write_csv(path: str, header: Sequence[str],
              rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(header))
        for row in rows:
            writer.writerow([fmt(v) for v in row])


def _jsonify(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonify(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return [_jsonify(v) for v in obj.tolist()]
    if isinstance(obj, DyadicCube):
        return obj.token
    if isinstance(obj, CubeSet):
        return [Q.token for Q in obj]
    return obj


def write_json(path: str, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(_jsonify(payload), fh, sort_keys=True, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# per-stage row builders


def omega_field_rows(field: OmegaField):
    header = ["cube", "omega", "big_omega"]
    rows = []
    for level in field.levels():
        data = field.level_arrays(level)
        for i, Q in enumerate(data.cubes):
            rows.append([Q.token, float(data.omega[i]),
                         float(data.big_omega[i])])
    return header, rows


def fit_rows(field: OmegaField):
    """Fit results per cube; operator norm is blank when the ratio
    minimization did not attain its infimum."""
    from .affine import operator_norm

    header = ["cube", "omega", "big_omega", "op_norm", "attained"]
    rows = []
    for level in field.levels():
        data = field.level_arrays(level)
        for i, Q in enumerate(data.cubes):
            attained = bool(data.attained[i])
            norm = operator_norm(data.linear[i]) if attained else None
            rows.append([Q.token, float(data.omega[i]),
                         float(data.big_omega[i]), norm, attained])
    return header, rows


def level_profile_rows(field: OmegaField):
    header = ["level", "count", "min", "mean", "max", "sum"]
    rows = [[r["level"], r["count"], r["min"], r["mean"], r["max"], r["sum"]]
            for r in field.level_profile()]
    return header, rows


def weight_rows(weight: WeightField):
    """Cube means of the weight with their log-ratio to the root mean."""
    header = ["cube", "w_mean", "log_ratio"]
    root_mean = weight.mean_over(weight.root)
    rows = []
    for Q in enumerate_cubes(weight.root, weight.depth):
        w = weight.mean_over(Q)
        ratio = float(np.log(w / root_mean)) if w > 0 else None
        rows.append([Q.token, w, ratio])
    return header, rows


def region_rows(decomp: CoronaDecomposition):
    """One row per stopping region, in seeding order."""
    header = ["top", "members", "minimal_first", "minimal_second",
              "floor_cells", "floor_volume"]
    rows = []
    for S in decomp.regions:
        m1, m2 = classify_minimal(S, decomp.field, decomp.eps, decomp.tau)
        floor_vol = sum(Q.volume for Q in S.z_approx)
        rows.append([S.top.token, len(S.members), len(m1), len(m2),
                     len(S.z_approx), floor_vol])
    return header, rows


def region_member_rows(decomp: CoronaDecomposition):
    """Verbose member listing: every cube of every region with its role."""
    header = ["top", "member", "role"]
    rows = []
    for S in decomp.regions:
        minimal_keys = {Q.key() for Q in S.minimal}
        floor_keys = {Q.key() for Q in S.z_approx}
        for Q in S.members:
            if Q.key() == S.top.key():
                role = "top"
            elif Q.key() in minimal_keys:
                role = "minimal"
            elif Q.key() in floor_keys:
                role = "floor"
            else:
                role = "interior"
            rows.append([S.top.token, Q.token, role])
    return header, rows


def whitney_rows(w: WhitneyDecomposition):
    header = ["index", "piece", "anchor", "d_box", "underflow"]
    rows = []
    for j in range(len(w.cubes)):
        piece = w.piece(j)
        anchor = piece["anchor"]
        rows.append([j, piece["cube"].token,
                     anchor.token if anchor is not None else None,
                     float(piece["d_value"]), bool(piece["underflow"])])
    return header, rows


def extension_field_rows(ext: ExtensionEvaluator, grid_m: int):
    """The glued extension on a midpoint grid over the whole window."""
    assert grid_m >= 1
    window = ext.whitney.window
    d = window.dim
    axes = [window.corner[i] + window.side * (np.arange(grid_m) + 0.5) / grid_m
            for i in range(d)]
    mesh = np.meshgrid(*axes, indexing="ij")
    points = np.stack([m.ravel() for m in mesh], axis=1)
    values, tags = ext.evaluate(points)
    header = [f"x{i + 1}" for i in range(d)]
    header += [f"F{i + 1}" for i in range(values.shape[1])]
    header += ["branch"]
    rows = []
    for p, v, t in zip(points, values, tags):
        rows.append([*map(float, p), *map(float, v), TAG_NAMES[int(t)]])
    return header, rows


def extraction_rows(result: ExtractionResult, distortion: dict):
    header = ["theta", "N", "fraction", "L_lower", "L_upper", "L", "scale"]
    rows = [[result.theta, result.N, result.measure_fraction,
             distortion["L_lower"], distortion["L_upper"],
             distortion["L"], distortion["scale"]]]
    return header, rows


def chain_rows(chain: dict):
    header = ["top", "members", "ratio_min", "ratio_max",
              "margin_low", "margin_high", "pass"]
    rows = [[r["top"], r["members"], r["ratio_min"], r["ratio_max"],
             r["margin_low"], r["margin_high"], r["pass"]]
            for r in chain["regions"]]
    return header, rows
