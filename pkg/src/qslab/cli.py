"""Batch experiment driver with deterministic file outputs.

Subcommands cover the full pipeline: deviation fields, square-sum
accounting, gradient-energy comparison, the singular-CDF profile, the
stopping-time decomposition, Whitney covers, the glued extension, the
bi-Lipschitz extraction, and the weight toolkit.  Every run reads an
optional line-oriented config file (``key = value`` with a
``[subcommand]`` section per command; flags override file values) and
writes CSV/JSON/SVG reports whose bytes depend only on the config and
the seed.

All randomness flows from the single ``seed`` value through one Philox
counter-based generator; per-task streams are drawn from it as child
seeds, so runs are reproducible bit-for-bit.

Exit codes: 0 success, 1 configuration or usage error, 2 a property
check failed during the run.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, field as dataclass_field

import numpy as np

from . import reports
from .affine import AffineMap
from .carleson import (
    a_infty_good_set,
    bmo_dyadic_norm,
    carleson_norm,
    carleson_sum,
    compute_omega_field,
    dorronsoro_ratio,
    kahane_weight_field,
    maximal_weak_constant,
    weight_from_leaf_values,
)
from .corona import decompose, packing_report, partition_report
from .cubes import RootFrame, parse_token, root_cube, unit_root
from .extension import (
    ExtensionEvaluator,
    extension_diagnostics,
    whitney_audit,
    whitney_decompose,
    whitney_window,
)
from .extract import distortion_report, extract_E, scale_chain_check
from .maps import (
    affine_test_map,
    identity_map,
    kahane_map,
    oscillation_branch_map,
    read_sampled_csv,
    snowflake_map,
    vortex_branch_map,
    windowed_field,
)
from .oracles import KAHANE_C0

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_PROPERTY = 2

# depth ceilings per dimension; tree size grows as 2^(d J)
J_MAX = {1: 10, 2: 7, 3: 5}

SUBCOMMANDS = (
    "omega-field", "carleson", "dorronsoro", "kahane-profile", "corona",
    "whitney", "extension", "extract", "weights",
)

# reference affine fixtures used by ``--map affine``
DEFAULT_AFFINE = {
    1: (np.array([[2.0]]), np.array([0.3])),
    2: (np.array([[2.0, 0.5], [-0.3, 1.0]]), np.array([0.1, -0.2])),
    3: (np.diag([2.0, 1.5, 1.0]), np.array([0.1, -0.2, 0.05])),
}


class ConfigError(Exception):
    """Invalid configuration; the message names the offending field."""


# ---------------------------------------------------------------------------
# config file handling


def parse_config(text: str) -> dict:
    """Parse line-oriented ``key = value`` text with [section] headers.

    Keys before the first header form the global section "".  Raises
    ConfigError with the line number on malformed input.
    """
    sections: dict = {"": {}}
    current = ""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            sections.setdefault(current, {})
            continue
        if "=" not in line:
            raise ConfigError(
                f"line {lineno}: expected 'key = value', got {raw.strip()!r}"
            )
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        sections[current][key] = value.strip()
    return sections


def serialize_config(sections: dict) -> str:
    """Canonical text form: global keys first, sections sorted."""
    lines = []
    for key in sorted(sections.get("", {})):
        lines.append(f"{key} = {sections[''][key]}")
    for name in sorted(k for k in sections if k):
        if not sections[name]:
            continue
        if lines:
            lines.append("")
        lines.append(f"[{name}]")
        for key in sorted(sections[name]):
            lines.append(f"{key} = {sections[name][key]}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# experiment configuration


@dataclass
class ExperimentConfig:
    subcommand: str
    map_kind: str = "identity"
    d: int = 1
    D: int | None = None
    J: int = 4
    m: int = 3
    M: float = 3.0
    eps: float = 0.05
    tau: float = 0.3
    theta: float = 0.1
    seed: int = 0
    out: str = "qslab_reports"
    root_corner: tuple = ()
    root_side: float = 1.0
    # map parameters
    rho: float = 0.1
    amplitude: float = 0.25
    frequency: int = 3
    branch: str = ""
    beta: float = 0.12
    field_name: str = "bump"
    samples: str = ""
    # subcommand extras
    level: int | None = None
    fits_csv: bool = False
    verbose_regions: bool = False
    region_top: str = ""
    finest_level: int | None = None
    audit_points: int = 10000
    grid_m: int = 24
    pairs: int = 400
    chain_csv: bool = False
    weights: str = ""
    depth: int | None = None
    j_values: tuple = (5, 6, 7)

    def validate(self) -> None:
        if self.d not in (1, 2, 3):
            raise ConfigError(f"d must be 1, 2, or 3, got {self.d}")
        if self.J < 0 or self.J > J_MAX[self.d]:
            raise ConfigError(
                f"J = {self.J} outside [0, {J_MAX[self.d]}] for d = {self.d}"
            )
        if self.D is not None and not 1 <= self.D <= 4:
            raise ConfigError(f"D must be within [1, 4], got {self.D}")
        if self.m < 1:
            raise ConfigError(f"quadrature m must be >= 1, got {self.m}")
        if self.M < 1.0:
            raise ConfigError(f"dilation M must be >= 1, got {self.M}")
        for name in ("eps", "tau", "theta"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1), got {value}")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        if self.level is not None and not 0 <= self.level <= self.J:
            raise ConfigError(
                f"level = {self.level} outside [0, {self.J}]"
            )
        if self.root_side <= 0:
            raise ConfigError(f"root_side must be positive, got {self.root_side}")
        if self.root_corner and len(self.root_corner) != self.d:
            raise ConfigError(
                f"root_corner needs {self.d} coordinates, got "
                f"{len(self.root_corner)}"
            )
        if self.audit_points < 1:
            raise ConfigError("audit_points must be >= 1")
        if self.grid_m < 1:
            raise ConfigError("grid_m must be >= 1")
        if self.pairs < 100:
            raise ConfigError(f"pairs must be >= 100, got {self.pairs}")
        if self.subcommand == "dorronsoro":
            for J in self.j_values:
                if J < 0 or J > J_MAX[self.d]:
                    raise ConfigError(
                        f"j_values entry {J} outside [0, {J_MAX[self.d]}] "
                        f"for d = {self.d}"
                    )

    def frame(self) -> RootFrame:
        corner = self.root_corner or (0.0,) * self.d
        return RootFrame(tuple(float(c) for c in corner), self.root_side)


_BOOL_KEYS = {"fits_csv", "verbose_regions", "chain_csv"}
_INT_KEYS = {"d", "D", "J", "m", "seed", "frequency", "level",
             "finest_level", "audit_points", "grid_m", "pairs", "depth"}
_FLOAT_KEYS = {"M", "eps", "tau", "theta", "rho", "amplitude", "beta",
               "root_side"}
_ALIASES = {"map": "map_kind", "field": "field_name"}


def _coerce(key: str, raw: str):
    if key in _BOOL_KEYS:
        low = raw.strip().lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if key in _INT_KEYS:
            return int(raw)
        if key in _FLOAT_KEYS:
            return float(raw)
    except ValueError:
        kind = "an integer" if key in _INT_KEYS else "a number"
        raise ConfigError(f"{key}: expected {kind}, got {raw!r}")
    if key == "root_corner":
        return tuple(float(v) for v in raw.split(","))
    if key == "j_values":
        return tuple(int(v) for v in raw.split(","))
    return raw


def build_config(subcommand: str, cli_values: dict,
                 file_sections: dict | None) -> ExperimentConfig:
    cfg = ExperimentConfig(subcommand=subcommand)
    merged: dict = {}
    if file_sections:
        for section in ("", subcommand):
            for key, raw in file_sections.get(section, {}).items():
                attr = _ALIASES.get(key, key)
                if not hasattr(cfg, attr):
                    raise ConfigError(f"unknown config key {key!r}")
                merged[attr] = _coerce(attr, raw)
    for key, value in cli_values.items():
        if value is None:
            continue
        attr = _ALIASES.get(key, key)
        if attr == "root_corner" and isinstance(value, str):
            value = _coerce("root_corner", value)
        if attr == "j_values" and isinstance(value, str):
            value = _coerce("j_values", value)
        merged[attr] = value
    for attr, value in merged.items():
        setattr(cfg, attr, value)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# map construction


def make_map(cfg: ExperimentConfig):
    kind = cfg.map_kind
    d = cfg.d
    if kind == "identity":
        return identity_map(d)
    if kind == "affine":
        A, b = DEFAULT_AFFINE[d]
        return affine_test_map(AffineMap(A, b))
    if kind == "snowflake":
        return snowflake_map(d, cfg.amplitude, cfg.frequency)
    if kind == "kahane":
        if d != 1:
            raise ConfigError("the singular CDF map needs d = 1")
        if not 0.0 < cfg.rho < 1.0 / 3.0:
            raise ConfigError(f"rho must lie in (0, 1/3), got {cfg.rho}")
        return kahane_map(cfg.rho)
    if kind == "oscillation":
        if d != 1:
            raise ConfigError("the oscillation fixture needs d = 1")
        token = cfg.branch or "2:1@0"
        branch = parse_token(token, cfg.frame())
        return oscillation_branch_map(branch, cfg.amplitude, cfg.frequency)
    if kind == "vortex":
        if d != 2:
            raise ConfigError("the vortex fixture needs d = 2")
        token = cfg.branch or "1:1,1@0"
        branch = parse_token(token, cfg.frame())
        return vortex_branch_map(branch, cfg.beta)
    if kind == "field":
        try:
            return windowed_field(cfg.field_name, d)
        except ValueError as err:
            raise ConfigError(str(err))
    if kind == "sampled":
        if not cfg.samples:
            raise ConfigError("map = sampled needs a samples CSV path")
        corner = np.array(cfg.root_corner or (0.0,) * d, dtype=float)
        return read_sampled_csv(cfg.samples, window_corner=corner,
                                window_side=cfg.root_side)
    raise ConfigError(
        f"unknown map kind {kind!r}; choose identity, affine, snowflake, "
        "kahane, oscillation, vortex, field, or sampled"
    )


def _check_output_dim(map_obj) -> None:
    if map_obj.dim_out > 4:
        raise ConfigError(
            f"image dimension {map_obj.dim_out} exceeds the maximum 4"
        )


# ---------------------------------------------------------------------------
# SVG heat maps


def _ramp(t: float) -> str:
    """White-to-indigo color ramp on [0, 1]."""
    lo = (250, 250, 252)
    hi = (30, 44, 110)
    rgb = tuple(round(a + (b - a) * t) for a, b in zip(lo, hi))
    return "#%02x%02x%02x" % rgb


def emit_heatmap(values, level: int, path: str, dim: int,
                 title: str = "") -> None:
    """Shaded-cell SVG for a per-cell field at one tree level.

    d = 2 draws a 2^level x 2^level grid, d = 1 a bar strip; values
    arrive in lexicographic coordinate order.  Output bytes are a pure
    function of the inputs.
    """
    if dim not in (1, 2):
        raise ValueError(f"d = {dim} unsupported for heat maps")
    values = np.asarray(values, dtype=float)
    n = 1 << level
    assert values.size == n**dim, (
        f"level {level} in d = {dim} needs {n**dim} values, got {values.size}"
    )
    vmin, vmax = float(values.min()), float(values.max())
    spread = vmax - vmin

    cell = max(4, 512 // n)
    width = n * cell
    legend_h = 34
    parts = []
    if dim == 2:
        height = n * cell + legend_h
        grid = values.reshape(n, n)
        for c1 in range(n):
            for c2 in range(n):
                t = 0.5 if spread == 0 else (grid[c1, c2] - vmin) / spread
                parts.append(
                    f'<rect x="{c1 * cell}" y="{(n - 1 - c2) * cell}" '
                    f'width="{cell}" height="{cell}" fill="{_ramp(t)}"/>'
                )
        base = n * cell
    else:
        strip_h = 160
        height = strip_h + legend_h
        bar_w = max(2, 512 // n)
        width = n * bar_w
        for c in range(n):
            t = 0.5 if spread == 0 else (values[c] - vmin) / spread
            h = max(1, round(t * (strip_h - 8)) + 4)
            parts.append(
                f'<rect x="{c * bar_w}" y="{strip_h - h}" width="{bar_w}" '
                f'height="{h}" fill="{_ramp(t)}"/>'
            )
        base = strip_h

    if spread == 0:
        legend = (
            f'<text x="4" y="{base + 22}" font-family="monospace" '
            f'font-size="12">constant value {reports.fmt(vmin)}</text>'
        )
    else:
        swatches = "".join(
            f'<rect x="{4 + i * 18}" y="{base + 8}" width="18" height="10" '
            f'fill="{_ramp(i / 9)}"/>' for i in range(10)
        )
        legend = (
            swatches
            + f'<text x="190" y="{base + 18}" font-family="monospace" '
              f'font-size="12">{reports.fmt(vmin)} .. {reports.fmt(vmax)}'
              f'</text>'
        )

    head = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">'
    )
    title_el = f"<title>{title}</title>" if title else ""
    with open(path, "w") as fh:
        fh.write(head + title_el + "".join(parts) + legend + "</svg>\n")


# ---------------------------------------------------------------------------
# subcommand implementations


def _field_for(cfg: ExperimentConfig, map_obj):
    root = root_cube(cfg.frame())
    return root, compute_omega_field(map_obj, root, J=cfg.J, M=cfg.M, m=cfg.m)


def _path(cfg: ExperimentConfig, name: str) -> str:
    os.makedirs(cfg.out, exist_ok=True)
    return os.path.join(cfg.out, name)


def _emit(path: str) -> None:
    print(f"wrote {path}")


def cmd_omega_field(cfg: ExperimentConfig) -> int:
    map_obj = make_map(cfg)
    _check_output_dim(map_obj)
    root, field = _field_for(cfg, map_obj)
    header, rows = reports.omega_field_rows(field)
    path = _path(cfg, "omega_field.csv")
    reports.write_csv(path, header, rows)
    _emit(path)
    if cfg.fits_csv:
        header, rows = reports.fit_rows(field)
        path = _path(cfg, "fits.csv")
        reports.write_csv(path, header, rows)
        _emit(path)
    level = cfg.J if cfg.level is None else cfg.level
    if cfg.d <= 2:
        data = field.level_arrays(root.level + level)
        svg = _path(cfg, f"omega_level{level}.svg")
        emit_heatmap(data.omega, level, svg, cfg.d,
                     title=f"deviation at level {level}")
        _emit(svg)
    else:
        print("heat map unsupported for d = 3; CSV only")
    print(f"cubes {len(field)}  max omega {max(r['max'] for r in field.level_profile())!r}")
    return EXIT_OK


def cmd_carleson(cfg: ExperimentConfig) -> int:
    map_obj = make_map(cfg)
    _check_output_dim(map_obj)
    root, field = _field_for(cfg, map_obj)
    sums = carleson_sum(field, root)
    norm = carleson_norm(field)
    header, rows = reports.level_profile_rows(field)
    path = _path(cfg, "level_profile.csv")
    reports.write_csv(path, header, rows)
    _emit(path)
    path = _path(cfg, "carleson.json")
    reports.write_json(path, {"sum": sums, "norm": norm,
                              "params": {"J": cfg.J, "M": cfg.M, "m": cfg.m}})
    _emit(path)
    print(f"normalized sum {sums['normalized']!r}  norm {norm['norm']!r}")
    return EXIT_OK


def cmd_dorronsoro(cfg: ExperimentConfig) -> int:
    try:
        map_obj = windowed_field(cfg.field_name, cfg.d)
    except ValueError as err:
        raise ConfigError(str(err))
    root = root_cube(unit_root(cfg.d))
    rows = []
    for J in cfg.j_values:
        rep = dorronsoro_ratio(map_obj, root, J=J, m=cfg.m, h=1e-4)
        rows.append([cfg.field_name, cfg.d, J, rep["sum"],
                     rep["grad_energy"], rep["ratio"], rep["status"]])
        print(f"J {J}: ratio {rep['ratio']!r} ({rep['status']})")
    path = _path(cfg, "dorronsoro.csv")
    reports.write_csv(path, ["field", "d", "J", "sum", "grad_energy",
                             "ratio", "status"], rows)
    _emit(path)
    return EXIT_OK


def cmd_kahane_profile(cfg: ExperimentConfig) -> int:
    if not 0.0 < cfg.rho < 1.0 / 3.0:
        raise ConfigError(f"rho must lie in (0, 1/3), got {cfg.rho}")
    if cfg.d != 1:
        raise ConfigError("the singular CDF profile needs d = 1")
    map_obj = kahane_map(cfg.rho)
    root, field = _field_for(cfg, map_obj)
    header, rows = reports.level_profile_rows(field)
    path = _path(cfg, "kahane_profile.csv")
    reports.write_csv(path, header, rows)
    _emit(path)
    mins = np.array([r["min"] for r in field.level_profile()])
    cv = float(mins.std() / mins.mean()) if mins.mean() > 0 else float("inf")
    floor = float(mins.min())
    data = field.level_arrays(root.level + cfg.J)
    svg = _path(cfg, f"kahane_level{cfg.J}.svg")
    emit_heatmap(data.omega, cfg.J, svg, 1,
                 title=f"deviation at level {cfg.J}")
    _emit(svg)
    path = _path(cfg, "kahane.json")
    reports.write_json(path, {
        "rho": cfg.rho, "J": cfg.J, "per_level_min": mins.tolist(),
        "floor": floor, "recorded_floor": KAHANE_C0, "variation": cv,
    })
    _emit(path)
    print(f"floor {floor!r} vs recorded {KAHANE_C0!r}  variation {cv:.3f}")
    if cfg.rho == 0.1 and floor < KAHANE_C0:
        print("property failure: per-level minimum fell below the "
              "recorded floor")
        return EXIT_PROPERTY
    return EXIT_OK


def cmd_corona(cfg: ExperimentConfig) -> int:
    map_obj = make_map(cfg)
    _check_output_dim(map_obj)
    root, field = _field_for(cfg, map_obj)
    dec = decompose(field, eps=cfg.eps, tau=cfg.tau)
    partition = partition_report(dec)
    packing = packing_report(dec)
    header, rows = reports.region_rows(dec)
    path = _path(cfg, "regions.csv")
    reports.write_csv(path, header, rows)
    _emit(path)
    if cfg.verbose_regions:
        header, rows = reports.region_member_rows(dec)
        path = _path(cfg, "region_members.csv")
        reports.write_csv(path, header, rows)
        _emit(path)
    path = _path(cfg, "corona.json")
    reports.write_json(path, {
        "params": dec.params, "regions": len(dec.regions),
        "bad_cubes": len(dec.bad), "partition": partition,
        "packing": packing,
    })
    _emit(path)
    print(f"regions {len(dec.regions)}  bad {len(dec.bad)}  "
          f"exact partition {partition['exact']}")
    ok = (partition["exact"] and packing["bad_pass"]
          and packing["region_pass"] and packing["z_disjoint"])
    if not ok:
        print("property failure: partition or packing check failed")
        return EXIT_PROPERTY
    return EXIT_OK


def _built_region(cfg: ExperimentConfig, dec):
    if not dec.regions:
        raise ConfigError(
            "the decomposition produced no regions; nothing to cover"
        )
    if cfg.region_top:
        wanted = parse_token(cfg.region_top, cfg.frame()).key()
        for S in dec.regions:
            if S.top.key() == wanted:
                return S
        raise ConfigError(f"no region with top {cfg.region_top!r}")
    return dec.regions[0]


def _whitney_parts(cfg: ExperimentConfig):
    map_obj = make_map(cfg)
    _check_output_dim(map_obj)
    root, field = _field_for(cfg, map_obj)
    dec = decompose(field, eps=cfg.eps, tau=cfg.tau)
    region = _built_region(cfg, dec)
    finest = cfg.finest_level
    if finest is None:
        finest = root.level + cfg.J + 3
    if finest < root.level + cfg.J:
        raise ConfigError(
            f"finest_level {finest} is above the tree floor "
            f"{root.level + cfg.J}"
        )
    w = whitney_decompose(region, whitney_window(region), finest)
    return map_obj, field, dec, region, w


def cmd_whitney(cfg: ExperimentConfig) -> int:
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    audit_seed = int(rng.integers(2**63))
    map_obj, field, dec, region, w = _whitney_parts(cfg)
    audit = whitney_audit(w, n_points=cfg.audit_points, seed=audit_seed)
    header, rows = reports.whitney_rows(w)
    path = _path(cfg, "whitney.csv")
    reports.write_csv(path, header, rows)
    _emit(path)
    path = _path(cfg, "whitney.json")
    reports.write_json(path, {"region_top": region.top.token, **audit})
    _emit(path)
    print(f"pieces {audit['piece_count']}  bracket "
          f"[{audit['bracket_min']:.2f}, {audit['bracket_max']:.2f}]  "
          f"kappa {audit['kappa']} <= {audit['kappa_bound']}")
    ok = (audit["bracket_pass"] and audit["kappa_pass"]
          and audit["tiling_pass"] and audit["neighbor_pass"])
    if not ok:
        print("property failure: a Whitney audit check failed")
        return EXIT_PROPERTY
    return EXIT_OK


def cmd_extension(cfg: ExperimentConfig) -> int:
    map_obj, field, dec, region, w = _whitney_parts(cfg)
    ext = ExtensionEvaluator(region, field, w, map_obj, cfg.eps, cfg.tau)
    diag = extension_diagnostics(ext, grid_m=cfg.grid_m)
    header, rows = reports.extension_field_rows(ext, cfg.grid_m)
    path = _path(cfg, "extension_field.csv")
    reports.write_csv(path, header, rows)
    _emit(path)
    path = _path(cfg, "extension.json")
    reports.write_json(path, {"region_top": region.top.token, **diag})
    _emit(path)
    print(f"far field pass {diag['far_field_pass']}  seam pass "
          f"{diag['seam_pass']}  coarse vanishing "
          f"{diag['coarse_vanishing_pass']}")
    ok = (diag["far_field_pass"] and diag["seam_pass"]
          and diag["coarse_vanishing_pass"])
    if not ok:
        print("property failure: an extension identity failed")
        return EXIT_PROPERTY
    return EXIT_OK


def cmd_extract(cfg: ExperimentConfig) -> int:
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    pair_seed = int(rng.integers(2**63))
    map_obj = make_map(cfg)
    _check_output_dim(map_obj)
    root, field = _field_for(cfg, map_obj)
    dec = decompose(field, eps=cfg.eps, tau=cfg.tau)
    try:
        result = extract_E(dec, cfg.theta)
    except ValueError as err:
        print(f"property failure: {err}")
        return EXIT_PROPERTY
    distortion = distortion_report(map_obj, result, n_pairs=cfg.pairs,
                                   seed=pair_seed)
    chain = scale_chain_check(dec, result, map_obj)
    header, rows = reports.extraction_rows(result, distortion)
    path = _path(cfg, "extraction.csv")
    reports.write_csv(path, header, rows)
    _emit(path)
    if cfg.chain_csv:
        header, rows = reports.chain_rows(chain)
        path = _path(cfg, "chain.csv")
        reports.write_csv(path, header, rows)
        _emit(path)
    path = _path(cfg, "extract.json")
    reports.write_json(path, {
        "theta": cfg.theta, "N": result.N,
        "fraction": result.measure_fraction, "distortion": distortion,
        "chain": {k: v for k, v in chain.items() if k != "regions"},
        "details": result.details,
    })
    _emit(path)
    print(f"N {result.N}  fraction {result.measure_fraction!r}  "
          f"L {distortion['L']!r}")
    if not chain["pass"]:
        print("property failure: the per-region diameter-ratio bound failed")
        return EXIT_PROPERTY
    return EXIT_OK


def _load_weight(cfg: ExperimentConfig):
    root = root_cube(cfg.frame())
    if cfg.weights:
        try:
            values = np.loadtxt(cfg.weights, delimiter=",", skiprows=1,
                                ndmin=1)
        except OSError as err:
            raise ConfigError(f"cannot read weights CSV: {err}")
        depth = cfg.depth
        if depth is None:
            per_axis = round(values.size ** (1.0 / cfg.d))
            if per_axis ** cfg.d != values.size or per_axis & (per_axis - 1):
                raise ConfigError(
                    f"{values.size} leaf values do not fill a dyadic grid "
                    f"in d = {cfg.d}; pass depth explicitly"
                )
            depth = per_axis.bit_length() - 1
        return weight_from_leaf_values(root, depth, values)
    if cfg.d != 1:
        raise ConfigError("the built-in singular weight needs d = 1")
    if not 0.0 < cfg.rho < 1.0 / 3.0:
        raise ConfigError(f"rho must lie in (0, 1/3), got {cfg.rho}")
    depth = cfg.depth if cfg.depth is not None else 8
    return kahane_weight_field(cfg.rho, depth, root=root)


def cmd_weights(cfg: ExperimentConfig) -> int:
    weight = _load_weight(cfg)
    root = weight.root
    bmo = bmo_dyadic_norm(weight, root)
    weak = maximal_weak_constant(weight, root)
    weak["constant"] = float(weak["constant"])
    good = a_infty_good_set(weight, root, cfg.tau)
    header, rows = reports.weight_rows(weight)
    path = _path(cfg, "weights.csv")
    reports.write_csv(path, header, rows)
    _emit(path)
    path = _path(cfg, "weights.json")
    reports.write_json(path, {
        "depth": weight.depth, "tau": cfg.tau, "bmo": bmo,
        "weak_constant": weak["constant"],
        "good_fraction": good["measure_fraction"],
        "M_ratio": good["M_ratio"],
        "bad_leaves": good["bad_leaves"],
    })
    _emit(path)
    print(f"bmo {bmo!r}  weak constant {weak['constant']!r}  "
          f"good fraction {good['measure_fraction']!r}")
    if weak["constant"] > 1.0 + 1e-9:
        print("property failure: the weak-type maximal bound failed")
        return EXIT_PROPERTY
    if good["measure_fraction"] < 1.0 - cfg.tau - 1e-12:
        print("property failure: the good-set fraction fell short")
        return EXIT_PROPERTY
    return EXIT_OK


_HANDLERS = {
    "omega-field": cmd_omega_field,
    "carleson": cmd_carleson,
    "dorronsoro": cmd_dorronsoro,
    "kahane-profile": cmd_kahane_profile,
    "corona": cmd_corona,
    "whitney": cmd_whitney,
    "extension": cmd_extension,
    "extract": cmd_extract,
    "weights": cmd_weights,
}


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with the configuration status, not 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(EXIT_CONFIG)


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="config file (key = value lines)")
    sub.add_argument("--map", help="map kind (identity, affine, snowflake, "
                                   "kahane, oscillation, vortex, field, "
                                   "sampled)")
    sub.add_argument("--d", type=int, help="domain dimension (1, 2, or 3)")
    sub.add_argument("--D", type=int, help="image dimension cap check")
    sub.add_argument("--J", type=int, help="tree depth")
    sub.add_argument("--m", type=int, help="quadrature refinement per cube")
    sub.add_argument("--M", type=float, help="cube dilation for fits")
    sub.add_argument("--eps", type=float, help="deviation budget")
    sub.add_argument("--tau", type=float, help="drift budget / weight tau")
    sub.add_argument("--theta", type=float, help="discard budget for "
                                                 "extraction")
    sub.add_argument("--seed", type=int, help="master seed (Philox stream)")
    sub.add_argument("--out", help="output directory")
    sub.add_argument("--root-corner", dest="root_corner",
                     help="comma-separated root corner")
    sub.add_argument("--root-side", dest="root_side", type=float,
                     help="root side length")
    sub.add_argument("--rho", type=float, help="singular-measure parameter")
    sub.add_argument("--amplitude", type=float, help="perturbation size")
    sub.add_argument("--frequency", type=int, help="perturbation frequency")
    sub.add_argument("--branch", help="branch cube token for planted "
                                      "fixtures")
    sub.add_argument("--beta", type=float, help="rotation strength of the "
                                                "vortex fixture")
    sub.add_argument("--field", dest="field_name",
                     help="windowed field name (bump, ripple, well)")
    sub.add_argument("--samples", help="CSV path for sampled maps")


def build_parser() -> _Parser:
    parser = _Parser(prog="qslab",
                     description="dyadic affine-structure laboratory")
    subs = parser.add_subparsers(dest="subcommand", metavar="subcommand")
    extras = {
        "omega-field": [
            (("--level",), {"type": int, "help": "heat-map level"}),
            (("--fits-csv",), {"action": "store_true", "default": None,
                               "dest": "fits_csv",
                               "help": "also dump per-cube fit rows"}),
        ],
        "carleson": [],
        "dorronsoro": [
            (("--j-values",), {"dest": "j_values",
                               "help": "comma-separated depths"}),
        ],
        "kahane-profile": [],
        "corona": [
            (("--verbose-regions",), {"action": "store_true",
                                      "default": None,
                                      "dest": "verbose_regions",
                                      "help": "dump every member cube"}),
        ],
        "whitney": [
            (("--region-top",), {"dest": "region_top",
                                 "help": "top token of the region to cover"}),
            (("--finest-level",), {"dest": "finest_level", "type": int,
                                   "help": "finest cover level"}),
            (("--audit-points",), {"dest": "audit_points", "type": int,
                                   "help": "sample count for the audit"}),
        ],
        "extension": [
            (("--region-top",), {"dest": "region_top"}),
            (("--finest-level",), {"dest": "finest_level", "type": int}),
            (("--grid-m",), {"dest": "grid_m", "type": int,
                             "help": "evaluation grid per axis"}),
        ],
        "extract": [
            (("--pairs",), {"type": int, "help": "distortion pair budget"}),
            (("--chain-csv",), {"action": "store_true", "default": None,
                                "dest": "chain_csv",
                                "help": "dump the per-region chain table"}),
        ],
        "weights": [
            (("--weights",), {"help": "leaf-value CSV (one column)"}),
            (("--depth",), {"type": int, "help": "weight tree depth"}),
        ],
    }
    for name in SUBCOMMANDS:
        sub = subs.add_parser(name, help=f"run the {name} stage")
        _add_common(sub)
        for flags, kwargs in extras[name]:
            sub.add_argument(*flags, **kwargs)
    return parser


def run(subcommand: str, config: ExperimentConfig) -> int:
    """Dispatch one subcommand; returns the process exit status."""
    handler = _HANDLERS.get(subcommand)
    if handler is None:
        raise ConfigError(f"unknown subcommand {subcommand!r}")
    return handler(config)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        # argparse help exits 0; usage errors land on the config status
        return int(err.code or 0)
    if args.subcommand is None:
        parser.print_usage(sys.stderr)
        sys.stderr.write("error: a subcommand is required\n")
        return EXIT_CONFIG
    try:
        sections = None
        if args.config:
            try:
                with open(args.config) as fh:
                    sections = parse_config(fh.read())
            except OSError as err:
                raise ConfigError(f"cannot read config file: {err}")
        cli_values = {k: v for k, v in vars(args).items()
                      if k not in ("subcommand", "config")}
        cfg = build_config(args.subcommand, cli_values, sections)
        return run(args.subcommand, cfg)
    except ConfigError as err:
        sys.stderr.write(f"error: {err}\n")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
