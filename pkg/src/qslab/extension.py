"""Whitney covers adapted to a region, and the piecewise-affine extension.

Given a coherent stopping region (or a plain compact cube set), this
module builds the adapted Whitney decomposition of a working window,
a smooth partition of unity subordinate to slightly enlarged Whitney
pieces, and the extension that blends the region's per-cube affine maps
into a globally smooth map agreeing with the raw map on the region's
floor cells and with the top affine map far away.  Diagnostic integrals
quantify how far the extension's gradient sits from the top linear part
and how its mean-square affine deviations sum over the window tree.

Geometry conventions: a piece R is emitted when diam R <= D(R)/20 with
D the region-adapted distance (min over members of gap + diameter; the
plain gap for compact sets), evaluated exactly as an infimum over the
piece's box.  Pieces that reach the finest sweep level still failing
the test are kept and flagged as underflow rather than subdivided
further.
"""

from __future__ import annotations

import math

import numpy as np

from .affine import AffineMap, operator_norm, weighted_moments, _solve_lsq_linear
from .carleson import OmegaField
from .corona import StoppingRegion, classify_minimal
from .cubes import CubeSet, DyadicCube, RootFrame, box_distance, midpoint_lattice, root_cube

WHITNEY_RATIO = 20.0      # emission test: diam R <= D(R) / 20
BUMP_SUPPORT = 9.0 / 8.0  # bumps live on the (9/8)-dilate of their piece
ANCHOR_CAP = 3.0          # anchor cube: largest ancestor with diam <= 3 * D(R)
FAR_FACTOR = 2.0          # beyond 2 * diam of the top cube the extension is affine
AFFINE_RESIDUAL_TOL = 1e-7  # centered-moment cancellation floor for exact affine data


def whitney_window(region: StoppingRegion) -> DyadicCube:
    """The working window: the concentric 3-dilate of the region's top,
    set up as the root of its own dyadic frame."""
    top = region.top
    corner = top.corner - top.side
    return root_cube(RootFrame(tuple(corner), 3.0 * top.side))


class WhitneyDecomposition:
    """Disjoint dyadic pieces covering a window, sized by the provider's
    adapted distance.

    Pieces are cubes of the window's own dyadic tree.  For region
    providers each piece also carries a witness member (near-minimizer
    of the adapted distance at the piece center) and an anchor member
    (the witness's largest ancestor whose diameter stays within three
    adapted distances); the anchors supply the affine maps blended by
    the extension.
    """

    def __init__(self, provider, window: DyadicCube, finest_level: int,
                 cubes: list[DyadicCube], d_values: np.ndarray,
                 underflow: np.ndarray, witnesses, anchors,
                 adapted_set: CubeSet):
        self.provider = provider
        self.window = window
        self.finest_level = finest_level
        self.cubes = cubes
        self.d_values = d_values
        self.underflow = underflow
        self.witnesses = witnesses
        self.anchors = anchors
        # the cube set whose reach/distance defines the piece sizes; for
        # regions this is the floor partition (minimal + floor members),
        # on which the adapted distance attains its min over all members
        self.adapted_set = adapted_set
        self.corners = np.array([c.corner for c in cubes]).reshape(len(cubes), window.dim)
        self.sides = np.array([c.side for c in cubes], dtype=float)
        self.levels = np.array([c.level for c in cubes], dtype=int)
        # one piece per occupied window cell, per level
        self._cells: dict[int, dict[tuple, int]] = {}
        for j, c in enumerate(cubes):
            self._cells.setdefault(c.level, {})[c.coords] = j

    def __len__(self) -> int:
        return len(self.cubes)

    @property
    def is_region_based(self) -> bool:
        return isinstance(self.provider, StoppingRegion)

    def piece(self, j: int) -> dict:
        return {
            "index": j,
            "cube": self.cubes[j],
            "token": self.cubes[j].token,
            "d_value": float(self.d_values[j]),
            "underflow": bool(self.underflow[j]),
            "witness": self.witnesses[j] if self.witnesses is not None else None,
            "anchor": self.anchors[j] if self.anchors is not None else None,
        }

    def containing_piece(self, points: np.ndarray) -> np.ndarray:
        """Index of the piece whose half-open box holds each point,
        -1 where no piece does."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.full(pts.shape[0], -1, dtype=int)
        wc = np.asarray(self.window.corner)
        ws = self.window.side
        for level, cells in self._cells.items():
            cell = ws / (1 << level)
            idx = np.floor((pts - wc) / cell).astype(int)
            for i in range(pts.shape[0]):
                if out[i] >= 0:
                    continue
                j = cells.get(tuple(idx[i]))
                if j is not None:
                    out[i] = j
        return out

    def support_pairs(self, points: np.ndarray, dilate: float = BUMP_SUPPORT):
        """(point index, piece index) pairs with the point inside the
        dilate-enlarged piece, located through per-level cell hashing.

        Valid for dilate <= 2: the enlarged piece reaches at most half a
        cell beyond its own, so scanning the 3^d neighborhood of the
        point's cell at each occupied level finds every candidate.
        """
        assert dilate <= 2.0, "cell hashing only reaches one neighbor ring"
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        m, dim = pts.shape
        wc = np.asarray(self.window.corner)
        ws = self.window.side
        offsets = list(np.ndindex(*(3,) * dim))
        pi: list[int] = []
        pj: list[int] = []
        for level, cells in self._cells.items():
            cell = ws / (1 << level)
            base = np.floor((pts - wc) / cell).astype(int) - 1
            for i in range(m):
                bi = base[i]
                for off in offsets:
                    j = cells.get((int(bi[0] + off[0]),) + tuple(
                        int(bi[k] + off[k]) for k in range(1, dim)))
                    if j is not None:
                        pi.append(i)
                        pj.append(j)
        if not pi:
            return np.empty(0, dtype=int), np.empty(0, dtype=int)
        pi_arr = np.array(pi)
        pj_arr = np.array(pj)
        # keep pairs with |x - center|_inf <= (dilate/2) * side
        centers = self.corners[pj_arr] + 0.5 * self.sides[pj_arr, None]
        half = 0.5 * dilate * self.sides[pj_arr]
        keep = np.all(np.abs(pts[pi_arr] - centers) <= half[:, None], axis=1)
        return pi_arr[keep], pj_arr[keep]


def _covered_mask(corners: np.ndarray, side: float, cover_corners: np.ndarray,
                  cover_sides: np.ndarray) -> np.ndarray:
    """True where a query box lies inside the union of cover boxes.

    The cover boxes must be pairwise disjoint (maximal members of a cube
    set); the test sums exact overlap volumes.
    """
    if cover_corners.shape[0] == 0:
        return np.zeros(corners.shape[0], dtype=bool)
    q_lo = corners[:, None, :]
    q_hi = q_lo + side
    c_lo = cover_corners[None, :, :]
    c_hi = c_lo + cover_sides[None, :, None]
    ext = np.clip(np.minimum(q_hi, c_hi) - np.maximum(q_lo, c_lo), 0.0, None)
    overlap = ext.prod(axis=2).sum(axis=1)
    vol = side ** corners.shape[1]
    return overlap >= vol * (1.0 - 1e-12)


class _FloorIndex:
    """Exact shortcut for region reach queries against the floor grid.

    Any box meeting a floor-level member has adapted distance exactly
    equal to the floor diameter: the gap vanishes and no member has a
    smaller diameter.  Boxes are tested through integer cell ranges on
    the region's native frame.
    """

    def __init__(self, region: StoppingRegion):
        field = region.field
        self.frame_corner = np.asarray(region.top.root.corner)
        self.level = field.root.level + field.depth
        self.cell = region.top.root.base_side / (1 << self.level)
        self.keys = {q.coords for q in region.z_approx}
        self.diam = self.cell * math.sqrt(region.top.dim)

    def meets_floor(self, corners: np.ndarray, side: float) -> np.ndarray:
        """True where a box overlaps some floor member (side <= cell)."""
        out = np.zeros(corners.shape[0], dtype=bool)
        if not self.keys or side > self.cell:
            return out
        dim = corners.shape[1]
        lo = np.floor((corners - self.frame_corner) / self.cell).astype(int)
        hi = np.floor((corners + side - self.frame_corner) / self.cell).astype(int)
        offs = list(np.ndindex(*(2,) * dim))
        for i in range(corners.shape[0]):
            for off in offs:
                c = tuple(hi[i, k] if off[k] else lo[i, k] for k in range(dim))
                if c in self.keys:
                    out[i] = True
                    break
        return out

    def contains_center(self, centers: np.ndarray) -> np.ndarray:
        """Index of the floor member holding each point, or None."""
        idx = np.floor((centers - self.frame_corner) / self.cell).astype(int)
        return [tuple(row) if tuple(row) in self.keys else None for row in idx]


def region_leaf_set(region: StoppingRegion) -> CubeSet:
    """The floor partition of a coherent region: minimal cubes plus
    floor members.  The adapted distance min over all members is
    attained here, since every non-leaf member's children tile it with
    half the diameter."""
    return CubeSet([*region.minimal, *region.z_approx])


def whitney_decompose(provider, window: DyadicCube, finest_level: int) -> WhitneyDecomposition:
    """Top-down sweep emitting maximal pieces that pass the size test.

    provider: a StoppingRegion (adapted distance = member gap + member
    diameter) or a CubeSet (plain gap; window cells inside the set are
    skipped, the classical decomposition of the complement).  Cubes at
    ``finest_level`` that still fail the test are emitted with the
    underflow flag: the sweep cannot certify the 20/60 bracket for them.
    """
    region_mode = isinstance(provider, StoppingRegion)
    if region_mode:
        adapted = region_leaf_set(provider)
        floor_index = _FloorIndex(provider)
    else:
        adapted = provider
        floor_index = None
    if len(adapted) == 0:
        raise ValueError("whitney decomposition needs a nonempty provider")
    assert finest_level >= window.level, "finest level sits above the window"

    cover_c = cover_s = None
    if not region_mode:
        maximal = adapted.maximal_members()
        cover_c = np.array([q.corner for q in maximal])
        cover_s = np.array([q.side for q in maximal], dtype=float)

    dim = window.dim
    emitted: list[DyadicCube] = []
    emitted_d: list[np.ndarray] = []
    emitted_uf: list[np.ndarray] = []

    coords = np.array([window.coords], dtype=np.int64)
    for level in range(window.level, finest_level + 1):
        if coords.shape[0] == 0:
            break
        side = window.root.base_side / (1 << level)
        corners = np.asarray(window.root.corner) + side * coords
        if region_mode:
            on_floor = floor_index.meets_floor(corners, side)
            d_vals = np.full(coords.shape[0], floor_index.diam)
            off = ~on_floor
            if np.any(off):
                d_vals[off] = adapted.reach_boxes(
                    corners[off], np.full(int(off.sum()), side)
                )
        else:
            d_vals = adapted.distance_boxes(corners, np.full(coords.shape[0], side))
        diam = math.sqrt(dim) * side
        emit = diam <= d_vals / WHITNEY_RATIO
        skip = np.zeros(coords.shape[0], dtype=bool)
        if not region_mode:
            skip = _covered_mask(corners, side, cover_c, cover_s)
            emit &= ~skip
        if level == finest_level:
            # truncation: keep the failing cubes, flagged
            emit_idx = np.nonzero(emit)[0]
            uf_idx = np.nonzero(~emit & ~skip)[0]
            for i in emit_idx:
                emitted.append(DyadicCube(level, tuple(coords[i]), window.root))
            emitted_d.append(d_vals[emit_idx])
            emitted_uf.append(np.zeros(emit_idx.size, dtype=bool))
            for i in uf_idx:
                emitted.append(DyadicCube(level, tuple(coords[i]), window.root))
            emitted_d.append(d_vals[uf_idx])
            emitted_uf.append(np.ones(uf_idx.size, dtype=bool))
            break
        emit_idx = np.nonzero(emit)[0]
        for i in emit_idx:
            emitted.append(DyadicCube(level, tuple(coords[i]), window.root))
        emitted_d.append(d_vals[emit_idx])
        emitted_uf.append(np.zeros(emit_idx.size, dtype=bool))
        descend = np.nonzero(~emit & ~skip)[0]
        if descend.size == 0:
            coords = np.empty((0, dim), dtype=np.int64)
            continue
        base = coords[descend] * 2
        offs = np.array(list(np.ndindex(*(2,) * dim)), dtype=np.int64)
        coords = (base[:, None, :] + offs[None, :, :]).reshape(-1, dim)

    d_values = np.concatenate(emitted_d) if emitted_d else np.empty(0)
    underflow = np.concatenate(emitted_uf) if emitted_uf else np.empty(0, dtype=bool)

    witnesses = anchors = None
    if region_mode:
        witnesses, anchors = _assign_anchors(provider, adapted, floor_index,
                                             emitted, d_values)
    return WhitneyDecomposition(provider, window, finest_level, emitted,
                                d_values, underflow, witnesses, anchors, adapted)


def _assign_anchors(region: StoppingRegion, leaves: CubeSet,
                    floor_index: _FloorIndex, pieces: list[DyadicCube],
                    d_values: np.ndarray):
    """Witness and anchor members for every piece.

    The witness minimizes gap + diameter at the piece center over the
    floor partition (the minimum IS the adapted distance there); a
    center inside a floor member takes that member directly.  The
    anchor walks the witness's ancestor chain upward while the diameter
    stays within ANCHOR_CAP times the piece's adapted distance; region
    coherence keeps the whole chain inside the member set.
    """
    leaf_list = list(leaves)
    m_corners = np.array([q.corner for q in leaf_list])
    m_sides = np.array([q.side for q in leaf_list], dtype=float)
    m_diams = m_sides * math.sqrt(region.top.dim)
    centers = np.array([p.center for p in pieces]).reshape(len(pieces), region.top.dim)

    witness_arr: list = [None] * len(pieces)
    floor_hits = floor_index.contains_center(centers)
    floor_by_key = {q.coords: q for q in region.z_approx}
    pending = []
    for i, hit in enumerate(floor_hits):
        if hit is not None:
            witness_arr[i] = floor_by_key[hit]
        else:
            pending.append(i)

    if pending:
        pend = np.array(pending)
        step = max(1, int(4.0e6 // max(len(leaf_list), 1)))
        for start in range(0, pend.size, step):
            rows = pend[start : start + step]
            block = centers[rows]
            lo = m_corners[None, :, :] - block[:, None, :]
            hi = block[:, None, :] - (m_corners + m_sides[:, None])[None, :, :]
            gap = np.maximum(np.maximum(lo, hi), 0.0)
            contrib = np.sqrt((gap * gap).sum(axis=2)) + m_diams[None, :]
            best = np.argmin(contrib, axis=1)
            for i, b in zip(rows, best):
                witness_arr[i] = leaf_list[b]

    member_keys = {q.key() for q in region.members}
    top_level = region.top.level
    witnesses: list[DyadicCube] = []
    anchors: list[DyadicCube] = []
    for i, w in enumerate(witness_arr):
        witnesses.append(w)
        cap = ANCHOR_CAP * d_values[i]
        anchor = w
        while anchor.level > top_level:
            p = anchor.parent()
            if p.key() not in member_keys or p.diam > cap:
                break
            anchor = p
        anchors.append(anchor)
    return witnesses, anchors


# ---------------------------------------------------------------------------
# bumps and the partition of unity


def _axis_bump(u: np.ndarray) -> np.ndarray:
    """C^2 profile per axis: 1 for u <= 1, quintic ramp to 0 at 9/8."""
    t = np.clip(9.0 - 8.0 * u, 0.0, 1.0)
    return t * t * t * (10.0 - 15.0 * t + 6.0 * t * t)


def _axis_bump_deriv(u: np.ndarray) -> np.ndarray:
    """d/du of the axis profile (zero outside the ramp by clipping)."""
    t = 9.0 - 8.0 * u
    inside = (t > 0.0) & (t < 1.0)
    tc = np.clip(t, 0.0, 1.0)
    s = 30.0 * tc * tc * (1.0 - tc) * (1.0 - tc)
    return np.where(inside, -8.0 * s, 0.0)


def _bump_and_grad(points: np.ndarray, corners: np.ndarray, sides: np.ndarray,
                   want_grad: bool):
    """Raw bump values (and gradients) for (point, piece) pairs.

    points (p, d) pairs with corners (p, d), sides (p,): the bump of
    each pair's piece evaluated at the pair's point.
    """
    half = 0.5 * sides[:, None]
    centers = corners + half
    rel = points - centers
    u = np.abs(rel) / half
    g = _axis_bump(u)
    b = g.prod(axis=1)
    if not want_grad:
        return b, None
    dg = _axis_bump_deriv(u) * np.sign(rel) / half
    grad = np.empty_like(points)
    dim = points.shape[1]
    for i in range(dim):
        others = g[:, [k for k in range(dim) if k != i]].prod(axis=1) if dim > 1 else 1.0
        grad[:, i] = dg[:, i] * others
    return b, grad


def partition_of_unity(w: WhitneyDecomposition, x) -> list[tuple[int, float]]:
    """Sparse normalized weights at one point: [(piece index, phi)].

    phi_j = b_j / sum_k b_k with b_j the piece's product bump.  The sum
    of returned weights is exactly 1; the list length is bounded by the
    overlap multiplicity of the enlarged pieces.
    """
    pt = np.asarray(x, dtype=float)[None, :]
    pi, pj = w.support_pairs(pt)
    assert pi.size > 0, f"point {x} escapes every bump support"
    b, _ = _bump_and_grad(np.repeat(pt, pj.size, axis=0),
                          w.corners[pj], w.sides[pj], want_grad=False)
    total = b.sum()
    assert total > 0.0, f"partition of unity vanished at {x}"
    return [(int(j), float(v / total)) for j, v in zip(pj, b) if v > 0.0]


# ---------------------------------------------------------------------------
# the extension evaluator

TAG_FLOOR = 0    # point sits in a floor cell of the region: raw map value
TAG_WHITNEY = 1  # point in the window: blended affine maps
TAG_FAR = 2      # far field: the top affine map


class ExtensionEvaluator:
    """Evaluate the blended affine extension of a map off a region.

    Case analysis per point: inside a floor member cell the raw map
    wins; in the far field (gap to the top cube at least 2 diameters)
    the top cube's affine map is exact; anywhere else in the window the
    Whitney blend sum_j phi_j A_j applies, with A_j the anchor's fitted
    map.  Points outside the window that are not yet far cannot be
    evaluated and raise.
    """

    def __init__(self, region: StoppingRegion, field: OmegaField,
                 whitney: WhitneyDecomposition, map_obj, eps: float, tau: float):
        assert whitney.is_region_based and whitney.provider is region, (
            "the evaluator needs the whitney cover built over its region"
        )
        self.region = region
        self.field = field
        self.whitney = whitney
        self.map = map_obj
        self.eps = eps
        self.tau = tau
        self.top_affine = region.top_affine()
        n = len(whitney)
        D = self.top_affine.linear.shape[0]
        d = region.top.dim
        self.anchor_linear = np.empty((n, D, d))
        self.anchor_offset = np.empty((n, D))
        cache: dict = {}
        for j, q in enumerate(whitney.anchors):
            k = q.key()
            aff = cache.get(k)
            if aff is None:
                aff = region.affine(q)
                cache[k] = aff
            self.anchor_linear[j] = aff.linear
            self.anchor_offset[j] = aff.offset
        self._floor_level = field.root.level + field.depth
        self._floor_keys = {q.key() for q in region.z_approx}
        frame = region.top.root
        self._frame_corner = np.asarray(frame.corner)
        self._leaf_side = frame.base_side / (1 << self._floor_level)
        self._top_corner = region.top.corner
        self._top_side = region.top.side
        self._far_gap = FAR_FACTOR * region.top.diam
        self._win_corner = np.asarray(whitney.window.corner)
        self._win_side = whitney.window.side

    def classify(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        tags = np.full(pts.shape[0], -1, dtype=np.int8)
        if self._floor_keys:
            leaf = np.floor((pts - self._frame_corner) / self._leaf_side).astype(int)
            n = 1 << self._floor_level
            in_tree = np.all((leaf >= 0) & (leaf < n), axis=1)
            for i in np.nonzero(in_tree)[0]:
                if (self._floor_level, tuple(leaf[i])) in self._floor_keys:
                    tags[i] = TAG_FLOOR
        gap = box_distance(pts, self._top_corner, self._top_side)
        far = (tags < 0) & (gap >= self._far_gap)
        tags[far] = TAG_FAR
        inside = np.all(
            (pts >= self._win_corner) & (pts <= self._win_corner + self._win_side),
            axis=1,
        )
        win = (tags < 0) & inside
        tags[win] = TAG_WHITNEY
        if np.any(tags < 0):
            i = int(np.nonzero(tags < 0)[0][0])
            raise ValueError(
                f"point {pts[i]} leaves the extension domain: outside the "
                "window and not yet in the far field"
            )
        return tags

    def evaluate(self, points: np.ndarray):
        """Values (m, D) and branch tags (m,) for a batch of points."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        tags = self.classify(pts)
        D = self.anchor_offset.shape[1]
        out = np.empty((pts.shape[0], D))
        floor_idx = np.nonzero(tags == TAG_FLOOR)[0]
        if floor_idx.size:
            out[floor_idx] = self.map.eval_many(pts[floor_idx])
        far_idx = np.nonzero(tags == TAG_FAR)[0]
        if far_idx.size:
            out[far_idx] = self.top_affine.evaluate(pts[far_idx])
        win_idx = np.nonzero(tags == TAG_WHITNEY)[0]
        if win_idx.size:
            out[win_idx] = self._blend(pts[win_idx])
        return out, tags

    def _blend(self, pts: np.ndarray) -> np.ndarray:
        pi, pj = self.whitney.support_pairs(pts)
        b, _ = _bump_and_grad(pts[pi], self.whitney.corners[pj],
                              self.whitney.sides[pj], want_grad=False)
        total = np.zeros(pts.shape[0])
        np.add.at(total, pi, b)
        assert np.all(total > 0.0), "partition of unity vanished inside the window"
        vals = np.einsum("pDd,pd->pD", self.anchor_linear[pj], pts[pi]) \
            + self.anchor_offset[pj]
        out = np.zeros((pts.shape[0], self.anchor_offset.shape[1]))
        np.add.at(out, pi, b[:, None] * vals)
        return out / total[:, None]

    def derivative(self, points: np.ndarray) -> np.ndarray:
        """Analytic spatial derivative (m, D, d) of the extension.

        Defined on the Whitney and far branches; inside floor cells the
        extension reproduces the raw map, so differentiate that map
        directly instead.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        tags = self.classify(pts)
        assert not np.any(tags == TAG_FLOOR), (
            "derivative requested inside a floor cell; the extension is "
            "the raw map there"
        )
        D, d = self.top_affine.linear.shape
        out = np.empty((pts.shape[0], D, d))
        far_idx = np.nonzero(tags == TAG_FAR)[0]
        if far_idx.size:
            out[far_idx] = self.top_affine.linear
        win_idx = np.nonzero(tags == TAG_WHITNEY)[0]
        if win_idx.size:
            out[win_idx] = self._blend_derivative(pts[win_idx])
        return out

    def _blend_derivative(self, pts: np.ndarray) -> np.ndarray:
        # DF = sum_j phi_j A'_j + sum_j A_j(x) grad(phi_j)^T with
        # grad(phi_j) = (grad b_j * B - b_j * grad B) / B^2
        pi, pj = self.whitney.support_pairs(pts)
        b, gb = _bump_and_grad(pts[pi], self.whitney.corners[pj],
                               self.whitney.sides[pj], want_grad=True)
        m, d = pts.shape
        D = self.anchor_offset.shape[1]
        B = np.zeros(m)
        np.add.at(B, pi, b)
        assert np.all(B > 0.0), "partition of unity vanished inside the window"
        gradB = np.zeros((m, d))
        np.add.at(gradB, pi, gb)

        vals = np.einsum("pDd,pd->pD", self.anchor_linear[pj], pts[pi]) \
            + self.anchor_offset[pj]
        lin_term = np.zeros((m, D, d))
        np.add.at(lin_term, pi, b[:, None, None] * self.anchor_linear[pj])
        cross = np.zeros((m, D, d))
        np.add.at(cross, pi, vals[:, :, None] * gb[:, None, :])
        val_sum = np.zeros((m, D))
        np.add.at(val_sum, pi, b[:, None] * vals)

        Binv = 1.0 / B
        # d/dx [sum b_j A_j / B] = (lin_term + cross)/B - (sum b_j A_j) gradB^T / B^2
        out = (lin_term + cross) * Binv[:, None, None]
        out -= val_sum[:, :, None] * (gradB * (Binv * Binv)[:, None])[:, None, :]
        return out

    def fd_derivative(self, points: np.ndarray, h: float) -> np.ndarray:
        """Central finite differences of evaluate, for cross-checking."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        m, d = pts.shape
        D = self.anchor_offset.shape[1]
        out = np.empty((m, D, d))
        for i in range(d):
            e = np.zeros(d)
            e[i] = h
            fp, _ = self.evaluate(pts + e)
            fm, _ = self.evaluate(pts - e)
            out[:, :, i] = (fp - fm) / (2.0 * h)
        return out


def eval_extension(ext: ExtensionEvaluator, x) -> np.ndarray:
    """Extension value at a single point."""
    vals, _ = ext.evaluate(np.asarray(x, dtype=float)[None, :])
    return vals[0]


# ---------------------------------------------------------------------------
# audits and diagnostics


def kappa_bound(dim: int) -> int:
    """Provable overlap bound for the 2-dilated pieces.

    Pieces whose 2-dilates share a point x are pairwise disjoint, lie
    inside the sup-ball of radius 3s around x (s the smallest side
    involved), and by neighbor comparability have side at least s; a
    volume count caps the multiplicity at 6^dim.
    """
    return 6 ** dim


def whitney_audit(w: WhitneyDecomposition, n_points: int = 10000,
                  seed: int = 0) -> dict:
    """Sampled verification of the cover's geometric guarantees.

    Checks, at uniformly sampled window points, the 20/60 bracket of
    the adapted distance against the containing piece's diameter
    (regular pieces only; underflow pieces carry no lower bound by
    construction), the overlap multiplicity of the enlarged pieces, and
    the factor-2 diameter comparability of pieces whose 2-dilates meet.
    Piece counts below 3000 get the exhaustive pairwise neighbor check
    as well.
    """
    rng = np.random.default_rng(seed)
    window = w.window
    dim = window.dim
    pts = np.asarray(window.corner) + window.side * rng.random((n_points, dim))

    region_mode = w.is_region_based
    d_pts = (w.adapted_set.reach(pts) if region_mode
             else w.adapted_set.distance(pts))

    owner = w.containing_piece(pts)
    ratios = []
    for i in range(n_points):
        j = owner[i]
        if j < 0 or w.underflow[j]:
            continue
        ratios.append(d_pts[i] / (math.sqrt(dim) * w.sides[j]))
    ratios = np.array(ratios)

    # overlap multiplicity of the 2-dilates at sampled points
    kappa = 0
    neighbor_ok = True
    checked_pairs = 0
    pi, pj = w.support_pairs(pts, dilate=2.0)
    if pi.size:
        counts = np.bincount(pi, minlength=n_points)
        kappa = int(counts.max())
        order = np.argsort(pi, kind="stable")
        pi_s, pj_s = pi[order], pj[order]
        starts = np.searchsorted(pi_s, np.arange(n_points))
        ends = np.searchsorted(pi_s, np.arange(n_points), side="right")
        for i in np.nonzero(counts > 1)[0]:
            hits = pj_s[starts[i] : ends[i]]
            for a in range(hits.size):
                for bb in range(a + 1, hits.size):
                    checked_pairs += 1
                    sa, sb = w.sides[hits[a]], w.sides[hits[bb]]
                    if max(sa, sb) > 2.0 * min(sa, sb) * (1.0 + 1e-12):
                        neighbor_ok = False

    exhaustive = len(w) <= 3000
    if exhaustive:
        lo = w.corners - 0.5 * w.sides[:, None]
        hi = w.corners + 1.5 * w.sides[:, None]
        for a in range(len(w)):
            meets = np.all(
                (lo[a] <= hi[a + 1 :]) & (lo[a + 1 :] <= hi[a]), axis=1
            )
            for bb in np.nonzero(meets)[0] + a + 1:
                checked_pairs += 1
                sa, sb = w.sides[a], w.sides[bb]
                if max(sa, sb) > 2.0 * min(sa, sb) * (1.0 + 1e-12):
                    neighbor_ok = False

    # structural tiling: pieces are pairwise non-nested tree cubes and,
    # together with any skipped covered cells, exhaust the window
    piece_keys = {(c.level, c.coords) for c in w.cubes}
    nested = False
    for c in w.cubes:
        lvl, coo = c.level, c.coords
        while lvl > window.level:
            lvl -= 1
            coo = tuple(x >> 1 for x in coo)
            if (lvl, coo) in piece_keys:
                nested = True
                break
    vol_sum = float((w.sides ** dim).sum())
    covered = 0.0
    if not region_mode:
        wlo = np.asarray(window.corner)
        for q in w.provider.maximal_members():
            ext = np.clip(
                np.minimum(q.corner + q.side, wlo + window.side)
                - np.maximum(q.corner, wlo),
                0.0, None,
            )
            covered += float(ext.prod())
    tiling_ok = (not nested) and abs(vol_sum + covered - window.volume) \
        <= 1e-9 * window.volume

    return {
        "sampled": n_points,
        "in_regular_piece": int(ratios.size),
        "bracket_min": float(ratios.min()) if ratios.size else math.inf,
        "bracket_max": float(ratios.max()) if ratios.size else 0.0,
        "bracket_pass": bool(
            ratios.size == 0
            or (ratios.min() >= WHITNEY_RATIO - 1e-9
                and ratios.max() <= 3 * WHITNEY_RATIO + 1e-9)
        ),
        "kappa": kappa,
        "kappa_bound": kappa_bound(dim),
        "kappa_pass": kappa <= kappa_bound(dim),
        "tiling_pass": tiling_ok,
        "neighbor_pass": neighbor_ok,
        "neighbor_pairs_checked": checked_pairs,
        "neighbor_exhaustive": exhaustive,
        "underflow_count": int(w.underflow.sum()),
        "piece_count": len(w),
    }


def _weighted_big_omega(nodes: np.ndarray, images: np.ndarray,
                        weights: np.ndarray, diams: np.ndarray) -> np.ndarray:
    """Mean-square affine deviation per box: LSQ residual over diameter."""
    xbar, ybar, sxx, c, q0 = weighted_moments(nodes, images, weights)
    linear = _solve_lsq_linear(sxx, c)
    explained = np.einsum("nai,nai->n", linear, c)
    resid = np.sqrt(np.maximum(q0 - explained, 0.0))
    return resid / diams


def extension_diagnostics(ext: ExtensionEvaluator, grid_m: int,
                          tree_depth: int | None = None,
                          samples_m: int = 2) -> dict:
    """Energy and deviation-sum diagnostics for a built extension.

    grad_deviation_energy integrates |DF - A'_top|_F^2 over the window
    by the midpoint rule on a grid_m^d grid, skipping floor cells (the
    extension is the raw map there, outside the blend's scope).

    omega_sums tallies Omega(2Q)^2 |Q| over the window's own dyadic
    tree to ``tree_depth``, split into three classes: pieces at the
    transition scale (adapted distance comparable to size), fine cubes
    (deep inside the Whitney regime), and coarse cubes larger than the
    region's top.  Quadrature nodes that leave the evaluable domain are
    dropped with zero weight.  Coarse cubes whose 2-dilate misses the
    ball of radius 3 diameters around the top's center must carry zero
    deviation (the far field is exactly affine); that check is
    reported as coarse_vanishing_pass.
    """
    region = ext.region
    window = ext.whitney.window
    dim = window.dim
    if tree_depth is None:
        tree_depth = ext.field.depth

    # gradient energy over the window grid
    wc = np.asarray(window.corner)
    ws = window.side
    ticks = (np.arange(grid_m) + 0.5) / grid_m
    axes = np.meshgrid(*([ticks] * dim), indexing="ij")
    grid = wc + ws * np.stack([a.reshape(-1) for a in axes], axis=1)
    tags = ext.classify(grid)
    live = tags != TAG_FLOOR
    cell_vol = (ws / grid_m) ** dim
    top_linear = ext.top_affine.linear
    if np.any(live):
        DF = ext.derivative(grid[live])
        dev = DF - top_linear[None, :, :]
        grad_energy = float((dev * dev).sum() * cell_vol)
    else:
        grad_energy = 0.0

    # deviation sums over the window tree
    top_diam = region.top.diam
    ball_center = region.top.center
    ball_radius = 3.0 * top_diam
    sums = {"transition": 0.0, "fine": 0.0, "coarse": 0.0}
    coarse_vanishing = True
    coarse_gap_max = 0.0
    unit = midpoint_lattice(np.zeros(dim), 1.0, samples_m, dim)
    coords = np.array([window.coords], dtype=np.int64)
    last_level = window.level + tree_depth
    for level in range(window.level, last_level + 1):
        side = window.root.base_side / (1 << level)
        corners = np.asarray(window.root.corner) + side * coords
        n = coords.shape[0]
        diam = math.sqrt(dim) * side
        d_vals = ext.whitney.adapted_set.reach_boxes(corners, np.full(n, side))
        bcorners = corners - 0.5 * side
        nodes = bcorners[:, None, :] + 2.0 * side * unit[None, :, :]
        flat = nodes.reshape(-1, dim)
        tags_nodes = _lenient_tags(ext, flat).reshape(n, -1)
        weights = (tags_nodes >= 0).astype(float)
        vals = np.zeros((flat.shape[0], ext.anchor_offset.shape[1]))
        ok = (tags_nodes >= 0).reshape(-1)
        if np.any(ok):
            vals[ok], _ = ext.evaluate(flat[ok])
        images = vals.reshape(n, -1, ext.anchor_offset.shape[1])
        omegas = _weighted_big_omega(nodes, images, weights,
                                     np.full(n, 2.0 * diam))
        contrib = omegas * omegas * side ** dim

        # classes are exclusive: larger than the top wins, then the
        # Whitney size test against the adapted distance
        coarse = np.full(n, diam > top_diam)
        fine = ~coarse & (diam <= d_vals / WHITNEY_RATIO)
        transition = ~fine & ~coarse
        sums["fine"] += float(contrib[fine].sum())
        sums["coarse"] += float(contrib[coarse].sum())
        sums["transition"] += float(contrib[transition].sum())

        if np.any(coarse):
            # distance from the ball center to the 2Q box
            gap_to_center = box_distance(ball_center, bcorners, 2.0 * side)
            away = coarse & (gap_to_center > ball_radius)
            if np.any(away):
                worst = float(omegas[away].max())
                coarse_gap_max = max(coarse_gap_max, worst)
                if worst > AFFINE_RESIDUAL_TOL * max(1.0, ext.top_affine.op_norm):
                    coarse_vanishing = False

        if level < last_level:
            offs = np.array(list(np.ndindex(*(2,) * dim)), dtype=np.int64)
            coords = (coords[:, None, :] * 2 + offs[None, :, :]).reshape(-1, dim)

    total = sums["transition"] + sums["fine"] + sums["coarse"]

    # far-field spot check on a shell beyond the cut (verifies routing:
    # the far branch evaluates the top map directly)
    shell = []
    for sgn in (-1.0, 1.0):
        for axis in range(dim):
            e = np.zeros(dim)
            e[axis] = sgn
            shell.append(region.top.center + e * (0.5 * region.top.side
                                                  + 1.1 * ext._far_gap))
    shell = np.array(shell)
    vals, tags_far = ext.evaluate(shell)
    expect = ext.top_affine.evaluate(shell)
    far_gap = float(np.abs(vals - expect).max())
    far_scale = max(1.0, float(np.abs(expect).max()))
    far_pass = bool(np.all(tags_far == TAG_FAR) and far_gap <= 1e-10 * far_scale)

    # seam check: near the window boundary every bump's anchor is the
    # top cube, so the blend must reproduce the top map exactly
    inset = 1e-3 * window.side
    seam_pts = []
    for axis in range(dim):
        for face in (window.corner[axis] + inset,
                     window.corner[axis] + window.side - inset):
            p = window.center.copy()
            p[axis] = face
            seam_pts.append(p)
    seam_pts.append(window.corner + inset)
    seam_pts.append(window.corner + window.side - inset)
    seam_pts = np.array(seam_pts)
    seam_vals, seam_tags = ext.evaluate(seam_pts)
    seam_expect = ext.top_affine.evaluate(seam_pts)
    seam_gap = float(np.abs(seam_vals - seam_expect).max())
    seam_scale = max(1.0, float(np.abs(seam_expect).max()))
    seam_pass = bool(np.all(seam_tags == TAG_WHITNEY)
                     and seam_gap <= 1e-9 * seam_scale)

    m2_mass = classify_minimal(region, ext.field, ext.eps, ext.tau)[1].mass()
    top_norm = ext.top_affine.op_norm
    grad_ratio = (
        grad_energy / (top_norm ** 2 * ext.tau ** 2 * m2_mass)
        if m2_mass > 0 else None
    )
    omega_ratio = total / (ext.eps ** 2 * top_norm ** 2 * region.top.volume)

    return {
        "grad_deviation_energy": grad_energy,
        "omega_sums": {**sums, "total": total},
        "far_field_pass": far_pass,
        "far_field_gap": far_gap,
        "seam_pass": seam_pass,
        "seam_gap": seam_gap,
        "coarse_vanishing_pass": coarse_vanishing,
        "coarse_residual_max": coarse_gap_max,
        "grad_ratio": grad_ratio,
        "omega_ratio": omega_ratio,
        "grid_cells": int(np.count_nonzero(live)),
    }


def _lenient_tags(ext: ExtensionEvaluator, points: np.ndarray) -> np.ndarray:
    """classify() that marks out-of-domain points -1 instead of raising."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    tags = np.full(pts.shape[0], -1, dtype=np.int8)
    if ext._floor_keys:
        leaf = np.floor((pts - ext._frame_corner) / ext._leaf_side).astype(int)
        n = 1 << ext._floor_level
        in_tree = np.all((leaf >= 0) & (leaf < n), axis=1)
        for i in np.nonzero(in_tree)[0]:
            if (ext._floor_level, tuple(leaf[i])) in ext._floor_keys:
                tags[i] = TAG_FLOOR
    gap = box_distance(pts, ext._top_corner, ext._top_side)
    far = (tags < 0) & (gap >= ext._far_gap)
    tags[far] = TAG_FAR
    inside = np.all(
        (pts >= ext._win_corner) & (pts <= ext._win_corner + ext._win_side),
        axis=1,
    )
    win = (tags < 0) & inside
    tags[win] = TAG_WHITNEY
    return tags


# ---------------------------------------------------------------------------
# packing sums for complements of compact cube sets


def lambda_sum(K: CubeSet, Q0: DyadicCube, alpha: float,
               finest_level: int | None = None) -> dict:
    """Size-weighted sums of complement Whitney pieces, per tree cube.

    For every cube Q below Q0 the field value is the sum over Whitney
    pieces P of Q0's complement-of-K with P inside Q of
    (side P / side Q)^(d+alpha).  Two exact inequalities are asserted:
    the per-cube value never exceeds |Q minus K| / |Q|, and the
    tree-weighted total never exceeds (1 - 2^-alpha)^-1 |Q0 minus K|.
    """
    assert alpha > 0.0, "the size exponent must be positive"
    if len(K) == 0:
        raise ValueError(
            "whitney decomposition of the full complement is unbounded; "
            "the compact set must be nonempty"
        )
    assert K.root == Q0.root, "the set and the base cube use different frames"
    maximal = K.maximal_members()
    assert all(Q0.is_ancestor_of(q) for q in maximal), (
        "the compact set must sit inside the base cube"
    )
    dim = Q0.dim
    cover_vol = K.cover_volume()
    complement = Q0.volume - cover_vol
    if complement <= 1e-15 * Q0.volume:
        return {
            "field": {},
            "total": 0.0,
            "total_bound": 0.0,
            "complement_volume": 0.0,
            "piece_count": 0,
            "underflow_count": 0,
        }

    deepest = max(q.level for q in maximal)
    if finest_level is None:
        finest_level = deepest + 8
    # below the set's resolution every sweep cube is inside-or-disjoint
    # from it, which both asserted bounds rely on
    assert finest_level >= deepest, (
        "finest level must reach the compact set's resolution"
    )
    w = whitney_decompose(K, Q0, finest_level)

    field: dict = {}
    power = dim + alpha
    for j, piece in enumerate(w.cubes):
        q = piece
        while True:
            ratio = (w.sides[j] / q.side) ** power
            key = q.key()
            field[key] = field.get(key, 0.0) + ratio
            if q.level == Q0.level:
                break
            q = q.parent()

    # per-cube bound: lambda(Q) <= |Q \ K| / |Q|, exact for dyadic covers
    cov_c = np.array([q.corner for q in maximal])
    cov_s = np.array([q.side for q in maximal], dtype=float)
    for key, lam in field.items():
        level, coords = key
        q = DyadicCube(level, coords, Q0.root)
        lo = np.maximum(cov_c, q.corner)
        hi = np.minimum(cov_c + cov_s[:, None], q.corner + q.side)
        ext = np.clip(hi - lo, 0.0, None)
        inter = float(ext.prod(axis=1).sum())
        frac = (q.volume - inter) / q.volume
        assert lam <= frac + 1e-12, (
            f"piece sum {lam} at {q.token} exceeds the complement "
            f"fraction {frac}"
        )

    total = sum(
        lam * (Q0.root.base_side / (1 << level)) ** dim
        for (level, _), lam in field.items()
    )
    total_bound = complement / (1.0 - 2.0 ** (-alpha))
    assert total <= total_bound + 1e-12, (
        f"weighted piece total {total} exceeds the geometric-series "
        f"bound {total_bound}"
    )
    return {
        "field": field,
        "total": total,
        "total_bound": total_bound,
        "complement_volume": complement,
        "piece_count": len(w),
        "underflow_count": int(w.underflow.sum()),
    }
