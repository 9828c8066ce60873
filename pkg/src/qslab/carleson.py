"""Multiscale deviation fields and their Carleson-type sums.

An OmegaField records, for every cube of a depth-bounded dyadic tree,
the scale-free affine deviation of a map over the M-dilated cube (plus
the least-squares deviation and the fitted affine map when the infimum
is attained). Carleson sums weight the squared deviations by cube
volume; for maps with square-summable deviations those sums grow like
the volume of the window rather than the number of scales, and the
level profile and filtered variants below make that testable.

The module also carries the dyadic weight toolkit: piecewise-constant
weights on a leaf grid, their dyadic maximal function and BMO norm of
the logarithm, and the good-set construction that exhibits a large
subset on which a weight with bounded log-oscillation is comparable to
its mean.

All computations are batched per level: one map evaluation over the
stacked node lattices of every cube at that level, then vectorized
moment assembly. Results are deterministic for a fixed node order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .affine import (
    AffineMap,
    _solve_lsq_linear,
    batched_ratio_minimization,
    weighted_moments,
)
from .cubes import CubeSet, DyadicCube, enumerate_cubes, midpoint_lattice

# allowed slack above the 1/2 bound for stored deviations; quadrature
# can overshoot the continuum value only by rounding
OMEGA_BOUND_TOL = 1e-6

# default refinement of the gradient-energy quadrature, per dimension
GRAD_REFINE = {1: 9, 2: 7, 3: 5}


# ---------------------------------------------------------------------------
# per-level moment assembly


def _level_moments(map_obj, cubes: list[DyadicCube], dilation: float, m: int):
    """Centered moments of a map over the dilated boxes of one level.

    Nodes falling outside a windowed map's domain are clamped to the
    window and given zero quadrature weight, so the means run over the
    surviving nodes only (the dilated box may poke out of the window;
    the cube itself never does).
    """
    dim = cubes[0].dim
    side = cubes[0].side
    corners = np.array([c.corner for c in cubes])
    bside = dilation * side
    bcorners = corners - 0.5 * (dilation - 1.0) * side
    unit = midpoint_lattice(np.zeros(dim), 1.0, m, dim)
    nodes = bcorners[:, None, :] + bside * unit[None, :, :]
    n, k = nodes.shape[0], nodes.shape[1]
    weights = np.ones((n, k))

    window = getattr(map_obj, "window", None)
    clipped = np.zeros(n, dtype=bool)
    if window is not None:
        wcorner = np.asarray(window[0], dtype=float)
        wside = float(window[1])
        tol = 1e-9 * wside
        inside = np.all(
            (nodes >= wcorner - tol) & (nodes <= wcorner + wside + tol), axis=2
        )
        clipped = ~inside.all(axis=1)
        if clipped.any():
            weights = inside.astype(float)
            assert weights.sum(axis=1).min() > 0, (
                "a dilated box lies entirely outside the map's domain window"
            )
            nodes = np.clip(nodes, wcorner, wcorner + wside)
            # a surviving single node column on an axis makes the fit
            # degenerate; same guard as the single-box path
            hi = np.where(weights[:, :, None] > 0, nodes, -np.inf).max(axis=1)
            lo = np.where(weights[:, :, None] > 0, nodes, np.inf).min(axis=1)
            bad = np.any(hi - lo <= 0, axis=1) & clipped
            if bad.any():
                tok = cubes[int(np.argmax(bad))].token
                raise ValueError(
                    "clipped quadrature is degenerate (single node column "
                    f"on an axis) at cube {tok}; increase the refinement m"
                )

    images = map_obj.eval_many(nodes.reshape(-1, dim))
    images = np.atleast_2d(images).reshape(n, k, -1)
    xbar, ybar, sxx, c, q0 = weighted_moments(nodes, images, weights)
    diam = math.sqrt(dim) * bside
    return xbar, ybar, sxx, c, q0, diam, clipped, (nodes, images, weights)


def _lsq_residual_ratio(sxx, c, samples, diam: float) -> np.ndarray:
    """sqrt(mean residual^2)/diam at the least-squares linear part,
    residual-first so exactly affine boxes come out at machine zero."""
    l_star = _solve_lsq_linear(sxx, c)
    xc, yc, wsum = centered_samples(*samples)
    resid2 = direct_residual_sq(l_star, xc, yc, samples[2], wsum)
    return np.sqrt(resid2) / diam


# ---------------------------------------------------------------------------
# the omega field


@dataclass(frozen=True)
class FieldRecord:
    """One cube's deviation data; affine is None when not attained."""

    cube: DyadicCube
    omega: float
    big_omega: float
    affine: AffineMap | None
    clipped: bool


class _LevelData:
    __slots__ = ("cubes", "coords", "omega", "big_omega", "attained",
                 "linear", "offset", "clipped")

    def __init__(self, cubes, coords, omega, big_omega, attained,
                 linear, offset, clipped):
        self.cubes = cubes
        self.coords = coords
        self.omega = omega
        self.big_omega = big_omega
        self.attained = attained
        self.linear = linear
        self.offset = offset
        self.clipped = clipped


class OmegaField:
    """Per-cube deviation records over the depth-J tree below a root.

    Exactly one record per cube of enumerate_cubes(root, J); iteration
    follows that order (levels ascending, lexicographic within).
    """

    def __init__(self, root: DyadicCube, depth: int, dilation: float,
                 samples_m: int, levels: dict[int, _LevelData]):
        self.root = root
        self.depth = depth
        self.dilation = dilation
        self.samples_m = samples_m
        self._levels = levels
        self._index: dict = {}
        count = 0
        for l, data in levels.items():
            bound = float(data.omega.max()) if len(data.cubes) else 0.0
            assert bound <= 0.5 + OMEGA_BOUND_TOL, (
                f"stored deviation {bound} exceeds the universal 1/2 bound"
            )
            for i, cube in enumerate(data.cubes):
                self._index[cube.key()] = (l, i)
            count += len(data.cubes)
        assert count == len(self._index), "duplicate cube records"

    def __len__(self) -> int:
        return len(self._index)

    def __contains__(self, Q: DyadicCube) -> bool:
        return Q.key() in self._index

    def _locate(self, Q: DyadicCube):
        try:
            l, i = self._index[Q.key()]
        except KeyError:
            raise ValueError(f"cube {Q.token} is not in the field's tree")
        return self._levels[l], i

    def omega(self, Q: DyadicCube) -> float:
        data, i = self._locate(Q)
        return float(data.omega[i])

    def big_omega(self, Q: DyadicCube) -> float:
        data, i = self._locate(Q)
        return float(data.big_omega[i])

    def affine(self, Q: DyadicCube) -> AffineMap | None:
        data, i = self._locate(Q)
        if not data.attained[i]:
            return None
        return AffineMap(data.linear[i], data.offset[i])

    def clipped(self, Q: DyadicCube) -> bool:
        data, i = self._locate(Q)
        return bool(data.clipped[i])

    def record(self, Q: DyadicCube) -> FieldRecord:
        data, i = self._locate(Q)
        aff = AffineMap(data.linear[i], data.offset[i]) if data.attained[i] else None
        return FieldRecord(Q, float(data.omega[i]), float(data.big_omega[i]),
                           aff, bool(data.clipped[i]))

    def cubes(self):
        for l in sorted(self._levels):
            yield from self._levels[l].cubes

    def levels(self) -> list[int]:
        return sorted(self._levels)

    def level_arrays(self, level: int) -> _LevelData:
        return self._levels[level]

    def check_complete(self) -> bool:
        """Every cube of the enumeration has a record and nothing else."""
        expected = {Q.key() for Q in enumerate_cubes(self.root, self.depth)}
        return expected == set(self._index)

    def level_profile(self) -> list[dict]:
        """Per-level deviation statistics and Carleson contribution."""
        rows = []
        for l in sorted(self._levels):
            data = self._levels[l]
            vol = data.cubes[0].volume if data.cubes else 0.0
            om = data.omega
            rows.append({
                "level": l,
                "count": len(data.cubes),
                "min": float(om.min()),
                "mean": float(om.mean()),
                "max": float(om.max()),
                "sum": float((om * om).sum() * vol),
            })
        return rows


def compute_omega_field(map_obj, root: DyadicCube, J: int, M: float,
                        m: int) -> OmegaField:
    """Scale-free affine deviation over M-dilated cubes, whole tree.

    One batched minimization per level; the fitted affine map is stored
    whenever the infimum is attained at a finite map.
    """
    assert M >= 1.0, "dilation must not shrink the cube"
    assert J >= 0
    by_level: dict[int, list[DyadicCube]] = {}
    for Q in enumerate_cubes(root, J):
        by_level.setdefault(Q.level, []).append(Q)

    levels: dict[int, _LevelData] = {}
    for l, cubes in by_level.items():
        xbar, ybar, sxx, c, q0, diam, clipped = _level_moments(map_obj, cubes, M, m)
        n = len(cubes)
        out = batched_ratio_minimization(
            sxx, c, q0, np.full(n, diam), m, clipped
        )
        linear = out["best_linear"]
        offset = ybar - np.einsum("nai,ni->na", linear, xbar)
        levels[l] = _LevelData(
            cubes=cubes,
            coords=np.array([Q.coords for Q in cubes], dtype=np.int64),
            omega=out["omega"],
            big_omega=out["big_omega"],
            attained=out["attained"],
            linear=linear,
            offset=offset,
            clipped=clipped,
        )
    return OmegaField(root, J, M, m, levels)


# ---------------------------------------------------------------------------
# carleson sums


def _descendant_mask(coords: np.ndarray, level: int, Q0: DyadicCube) -> np.ndarray:
    """Rows of a level's coord array lying inside Q0 (level >= Q0.level)."""
    shift = level - Q0.level
    anc = coords >> shift
    return np.all(anc == np.asarray(Q0.coords, dtype=np.int64), axis=1)


def carleson_sum(field: OmegaField, Q0: DyadicCube, cube_filter=None) -> dict:
    """Sum of omega(Q)^2 |Q| over the subtree below Q0, with an optional
    restriction: a CubeSet keeps the cubes meeting it, a callable keeps
    the cubes it accepts."""
    if Q0 not in field:
        raise ValueError(f"cube {Q0.token} is not in the field's tree")
    if isinstance(cube_filter, CubeSet):
        accept = cube_filter.meets
    else:
        accept = cube_filter

    per_level = []
    total = 0.0
    for l in field.levels():
        if l < Q0.level:
            continue
        data = field.level_arrays(l)
        mask = _descendant_mask(data.coords, l, Q0)
        if accept is not None:
            idx = np.flatnonzero(mask)
            keep = np.array([accept(data.cubes[i]) for i in idx], dtype=bool)
            mask = np.zeros_like(mask)
            mask[idx[keep]] = True
        vol = data.cubes[0].volume
        contrib = float((data.omega[mask] ** 2).sum() * vol)
        per_level.append(contrib)
        total += contrib
    return {
        "total": total,
        "normalized": total / Q0.volume,
        "per_level": per_level,
        "base_level": Q0.level,
    }


def _relative_index(coords: np.ndarray, level: int, field: OmegaField) -> np.ndarray:
    """Lexicographic position of each cube within its level's enumeration."""
    per_axis = 1 << (level - field.root.level)
    rel = coords - np.asarray(field.root.coords, dtype=np.int64) * per_axis
    return np.ravel_multi_index(tuple(rel.T), (per_axis,) * field.root.dim)


def carleson_norm(field: OmegaField, floor_margin: int = 2) -> dict:
    """Largest normalized subtree sum over roots at least floor_margin
    levels above the tree floor (deeper roots see too few scales to
    say anything)."""
    subtotals: dict[int, np.ndarray] = {}
    levels = field.levels()
    for l in reversed(levels):
        data = field.level_arrays(l)
        vol = data.cubes[0].volume
        acc = data.omega**2 * vol
        if l + 1 in subtotals:
            child = field.level_arrays(l + 1)
            parent_idx = _relative_index(child.coords >> 1, l, field)
            np.add.at(acc, parent_idx, subtotals[l + 1])
        subtotals[l] = acc

    best = -1.0
    best_token = None
    by_level = {}
    for l in levels:
        if l > field.depth + field.root.level - floor_margin:
            break
        data = field.level_arrays(l)
        vol = data.cubes[0].volume
        normalized = subtotals[l] / vol
        i = int(np.argmax(normalized))
        by_level[l] = float(normalized[i])
        if normalized[i] > best:
            best = float(normalized[i])
            best_token = data.cubes[i].token
    return {"norm": best, "argmax": best_token, "by_level": by_level}


# ---------------------------------------------------------------------------
# deviation sum vs gradient energy


def _inside_window(points: np.ndarray, window) -> np.ndarray:
    corner = np.asarray(window[0], dtype=float)
    side = float(window[1])
    tol = 1e-12 * side
    return np.all((points >= corner - tol) & (points <= corner + side + tol), axis=1)


def _gradient_energy(map_obj, root: DyadicCube, refine: int, h: float) -> float:
    """Quadrature of |Df|^2 over the root by central differences,
    one-sided at nodes within h of a window face."""
    assert h > 0
    dim = root.dim
    nodes = midpoint_lattice(root.corner, root.side, refine, dim)
    window = getattr(map_obj, "window", None)
    f0 = np.atleast_2d(map_obj.eval_many(nodes))
    energy = np.zeros(nodes.shape[0])
    for i in range(dim):
        plus = nodes.copy()
        plus[:, i] += h
        minus = nodes.copy()
        minus[:, i] -= h
        if window is None:
            okp = np.ones(nodes.shape[0], dtype=bool)
            okm = okp
        else:
            okp = _inside_window(plus, window)
            okm = _inside_window(minus, window)
            if not np.all(okp | okm):
                raise ValueError("difference step h exceeds the domain window")
        fp = np.array(f0)
        fm = np.array(f0)
        if okp.any():
            fp[okp] = np.atleast_2d(map_obj.eval_many(plus[okp]))
        if okm.any():
            fm[okm] = np.atleast_2d(map_obj.eval_many(minus[okm]))
        both = okp & okm
        denom = np.where(both, 2.0 * h, h)
        col = (fp - fm) / denom[:, None]
        energy += (col * col).sum(axis=1)
    return float(energy.mean()) * root.volume


def dorronsoro_ratio(map_obj, root: DyadicCube, J: int, m: int, h: float,
                     dilation: float = 2.0, grad_refine: int | None = None) -> dict:
    """Compare the tree sum of least-squares deviations (over dilated
    cubes, squared, volume-weighted) with the gradient energy.

    For continuously differentiable maps supported inside the window
    the two are comparable; the ratio and both sides are reported.
    """
    by_level: dict[int, list[DyadicCube]] = {}
    for Q in enumerate_cubes(root, J):
        by_level.setdefault(Q.level, []).append(Q)

    total = 0.0
    per_level = []
    for l in sorted(by_level):
        cubes = by_level[l]
        _, _, sxx, c, q0, diam, _ = _level_moments(map_obj, cubes, dilation, m)
        ratios = _lsq_residual_ratio(sxx, c, q0, diam)
        contrib = float((ratios**2).sum() * cubes[0].volume)
        per_level.append(contrib)
        total += contrib

    if grad_refine is None:
        grad_refine = GRAD_REFINE.get(root.dim, 4)
    energy = _gradient_energy(map_obj, root, grad_refine, h)

    tiny = 1e-30
    if energy <= tiny and total > tiny:
        raise ValueError(
            "inconsistency: zero gradient energy with a positive deviation sum"
        )
    if energy <= tiny and total <= tiny:
        return {"sum": total, "grad_energy": energy, "ratio": None,
                "per_level": per_level, "status": "degenerate (affine) input"}
    return {"sum": total, "grad_energy": energy, "ratio": total / energy,
            "per_level": per_level, "status": "ok"}


# ---------------------------------------------------------------------------
# piecewise-constant weights on a dyadic leaf grid


class WeightField:
    """Nonnegative density, constant on the level-J_w leaves of a root
    cube. Values are held as a d-dimensional grid indexed by leaf
    coordinates relative to the root."""

    def __init__(self, root: DyadicCube, depth: int, values):
        assert depth >= 0
        n = 1 << depth
        values = np.asarray(values, dtype=float)
        expect = (n,) * root.dim
        assert values.size == n**root.dim, (
            f"need {n**root.dim} leaf values, got {values.size}"
        )
        if values.ndim == 1:
            values = values.reshape(expect)
        assert values.shape == expect, (
            f"need shape {expect} leaf values, got {values.shape}"
        )
        assert np.all(values >= 0), "weights must be nonnegative"
        assert values.sum() > 0, "weight must carry positive total mass"
        self.root = root
        self.depth = depth
        self.values = values

    @property
    def leaf_level(self) -> int:
        return self.root.level + self.depth

    @property
    def leaf_volume(self) -> float:
        return (self.root.side / (1 << self.depth)) ** self.root.dim

    def leaf_cube(self, local_coords) -> DyadicCube:
        base = tuple(
            c * (1 << self.depth) + int(i)
            for c, i in zip(self.root.coords, local_coords)
        )
        return DyadicCube(self.leaf_level, base, self.root.root)

    def _block(self, Q: DyadicCube) -> tuple[np.ndarray, int]:
        """Leaf-value block of a cube in the tree, and its side in leaves."""
        rel = Q.level - self.root.level
        if rel < 0 or rel > self.depth:
            raise ValueError(f"cube {Q.token} is outside the weight tree")
        width = 1 << (self.depth - rel)
        start = tuple(
            (c - r * (1 << rel)) * width
            for c, r in zip(Q.coords, self.root.coords)
        )
        if any(s < 0 or s + width > self.values.shape[i]
               for i, s in enumerate(start)):
            raise ValueError(f"cube {Q.token} is outside the weight tree")
        sl = tuple(slice(s, s + width) for s in start)
        return self.values[sl], width

    def mean_over(self, Q: DyadicCube) -> float:
        block, _ = self._block(Q)
        return float(block.mean())


def _log_block(weight: WeightField, Q0: DyadicCube) -> np.ndarray:
    block, _ = weight._block(Q0)
    if np.any(block <= 0):
        raise ValueError("weight must be strictly positive for log statistics")
    return np.log(block)


def _block_means(arr: np.ndarray, leaf_span: int) -> np.ndarray:
    """Means over aligned sub-blocks of side leaf_span (power of two)."""
    d = arr.ndim
    n = arr.shape[0]
    shape = []
    for _ in range(d):
        shape.extend([n // leaf_span, leaf_span])
    folded = arr.reshape(shape)
    return folded.mean(axis=tuple(range(1, 2 * d, 2)))


def _expand(arr: np.ndarray, leaf_span: int) -> np.ndarray:
    out = arr
    for ax in range(arr.ndim):
        out = np.repeat(out, leaf_span, axis=ax)
    return out


def dyadic_maximal(weight: WeightField, g_ref: float, Q0: DyadicCube) -> np.ndarray:
    """Per-leaf max over containing cubes Q (within Q0) of the mean of
    |log w - g_ref| over Q; one root-to-leaf pass, exact for the
    piecewise-constant field."""
    g = _log_block(weight, Q0)
    absdev = np.abs(g - g_ref)
    width = g.shape[0]
    out = np.zeros_like(g)
    span = width
    while span >= 1:
        means = _block_means(absdev, span)
        out = np.maximum(out, _expand(means, span))
        span //= 2
    return out


def bmo_dyadic_norm(weight: WeightField, Q0: DyadicCube) -> float:
    """Largest mean oscillation of log w over the dyadic cubes in Q0."""
    g = _log_block(weight, Q0)
    width = g.shape[0]
    best = 0.0
    span = width
    while span >= 1:
        centered = np.abs(g - _expand(_block_means(g, span), span))
        best = max(best, float(_block_means(centered, span).max()))
        span //= 2
    return best


def maximal_weak_constant(weight: WeightField, Q0: DyadicCube) -> dict:
    """Realized weak-type constant of the dyadic maximal function:
    the largest lambda |{M > lambda}| / integral of |log w - mean|."""
    g = _log_block(weight, Q0)
    g_ref = float(g.mean())
    field = dyadic_maximal(weight, g_ref, Q0)
    integral = float(np.abs(g - g_ref).mean()) * Q0.volume
    if integral <= 0:
        return {"constant": 0.0, "worst_lambda": None}
    leaf_vol = (Q0.side / g.shape[0]) ** Q0.dim
    best = 0.0
    worst = None
    for v in np.unique(field[field > 0]):
        lam = v * (1.0 - 1e-12)
        measure = float((field > lam).sum()) * leaf_vol
        val = lam * measure / integral
        if val > best:
            best = val
            worst = float(lam)
    return {"constant": best, "worst_lambda": worst}


def a_infty_good_set(weight: WeightField, Q0: DyadicCube, tau: float) -> dict:
    """Large subset where the weight is comparable to its Q0 mean.

    Keeps the leaves whose maximal log-oscillation stays below
    2^d ||log w||_BMO / tau; the weak-type bound of the dyadic maximal
    function makes the kept fraction at least 1 - tau. Reports the
    realized comparability constant over cubes that meet the kept set.
    The set is described by its complement (the discarded leaves);
    bad_leaves is empty when nothing was discarded.
    """
    assert 0.0 < tau < 1.0, "tau must sit strictly between 0 and 1"
    g = _log_block(weight, Q0)
    g_ref = float(g.mean())
    bmo = bmo_dyadic_norm(weight, Q0)
    threshold = (2**Q0.dim) * bmo / tau
    field = dyadic_maximal(weight, g_ref, Q0)
    good = field <= threshold + 1e-15

    total = good.size
    fraction = float(good.sum()) / total
    assert fraction >= 1.0 - tau - 1e-12, (
        f"good-set fraction {fraction} fell below 1 - tau = {1 - tau}"
    )

    bad_cubes = [weight.leaf_cube(idx) for idx in np.argwhere(~good)]
    bad_set = CubeSet(bad_cubes, frame=Q0.root)

    # comparability of cube means to the Q0 mean, over cubes meeting
    # the kept set; exp of the worst log ratio
    w_block, width = weight._block(Q0)
    w_ref = float(w_block.mean())
    worst_log = 0.0
    span = width
    while span >= 1:
        means = _block_means(w_block, span)
        keep = _block_means(good.astype(float), span) > 0
        if keep.any():
            ratios = np.abs(np.log(means[keep] / w_ref))
            worst_log = max(worst_log, float(ratios.max()))
        span //= 2
    return {
        "bad_leaves": bad_set,
        "measure_fraction": fraction,
        "M_ratio": math.exp(worst_log),
        "bmo": bmo,
        "threshold": threshold,
        "good_leaf_count": int(good.sum()),
    }


# ---------------------------------------------------------------------------
# weight constructors


def weight_from_leaf_values(root: DyadicCube, depth: int, values) -> WeightField:
    return WeightField(root, depth, values)


def kahane_weight_field(rho: float, depth: int,
                        root: DyadicCube | None = None) -> WeightField:
    """Leaf densities of the singular self-similar measure: normalized
    mass of each dyadic leaf interval under the distorted-ternary
    distribution function."""
    from .cubes import root_cube, unit_root
    from .maps import kahane_cdf

    if root is None:
        root = root_cube(unit_root(1))
    assert root.dim == 1, "the self-similar weight lives on an interval"
    n = 1 << depth
    lo, side = root.corner[0], root.side
    edges = lo + side * np.arange(n + 1) / n
    cdf = kahane_cdf(edges, rho)
    masses = np.diff(cdf)
    return WeightField(root, depth, masses * n / side)
