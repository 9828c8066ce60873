"""Dyadic cube geometry over configurable root frames.

Conventions used throughout the package:

- a root frame pins the corner and side of the level-0 cube; every cube
  in the tree is addressed by (level, integer coordinates), so the
  combinatorics are exact at every depth and float geometry (corners,
  centers, volumes) is derived from the integers;
- plain membership is half-open, so the level-j cubes partition the root;
- dilated membership ``lambda * Q`` is closed, matching how enlarged
  cubes are integrated against;
- cube tokens serialize as ``level:c1,...,cd@shift`` where shift is
  ``0`` for the standard grid and a comma-joined vector of ``0``/``1/3``
  entries for the shifted grids of the one-third trick.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np


@dataclass(frozen=True)
class RootFrame:
    """Location of the level-0 cube: ``[corner, corner + base_side)^d``."""

    corner: tuple[float, ...]
    base_side: float = 1.0

    def __post_init__(self) -> None:
        assert len(self.corner) >= 1, "root frame needs at least one axis"
        assert self.base_side > 0, "root frame side must be positive"
        object.__setattr__(self, "corner", tuple(float(c) for c in self.corner))
        object.__setattr__(self, "base_side", float(self.base_side))

    @property
    def dim(self) -> int:
        return len(self.corner)


def unit_root(dim: int) -> RootFrame:
    """Standard frame ``[0, 1)^dim``."""
    return RootFrame((0.0,) * dim, 1.0)


@dataclass(frozen=True)
class DyadicCube:
    """One cube of the dyadic lattice anchored at a root frame.

    ``level`` counts subdivisions from the root; ``coords`` are integer
    lattice coordinates, one per axis. Cubes of the tree under the root
    have coords in ``[0, 2**level)``; the lattice extends beyond the
    root window (any integers, negatives included), which covering
    constructions around the root rely on.
    """

    level: int
    coords: tuple[int, ...]
    root: RootFrame

    def __post_init__(self) -> None:
        assert self.level >= 0, "cube level must be nonnegative"
        assert len(self.coords) == self.root.dim, "coords/axis count mismatch"
        object.__setattr__(self, "coords", tuple(int(c) for c in self.coords))

    @property
    def in_root_tree(self) -> bool:
        n = 1 << self.level
        return all(0 <= c < n for c in self.coords)

    # -- geometry -------------------------------------------------------

    @property
    def dim(self) -> int:
        return self.root.dim

    @property
    def side(self) -> float:
        return self.root.base_side / (1 << self.level)

    @property
    def corner(self) -> np.ndarray:
        s = self.side
        return np.array(self.root.corner) + s * np.array(self.coords, dtype=float)

    @property
    def center(self) -> np.ndarray:
        return self.corner + 0.5 * self.side

    @property
    def diam(self) -> float:
        return math.sqrt(self.dim) * self.side

    @property
    def volume(self) -> float:
        return self.side ** self.dim

    def key(self) -> tuple[int, tuple[int, ...]]:
        return (self.level, self.coords)

    # -- tree navigation ------------------------------------------------

    def parent(self) -> "DyadicCube":
        assert self.level > 0, "the root cube has no parent"
        return DyadicCube(self.level - 1, tuple(c >> 1 for c in self.coords), self.root)

    def ancestor(self, generations: int) -> "DyadicCube":
        """Ancestor ``generations`` levels up; 0 returns the cube itself."""
        assert generations >= 0, "generation count must be nonnegative"
        if generations > self.level:
            raise ValueError(
                f"ancestor {generations} generations above a level-{self.level} "
                "cube would sit above the root"
            )
        return DyadicCube(
            self.level - generations,
            tuple(c >> generations for c in self.coords),
            self.root,
        )

    def children(self) -> list["DyadicCube"]:
        """The 2^d children in lexicographic coordinate order."""
        out = []
        for offs in np.ndindex(*(2,) * self.dim):
            out.append(
                DyadicCube(
                    self.level + 1,
                    tuple(2 * c + o for c, o in zip(self.coords, offs)),
                    self.root,
                )
            )
        return out

    def siblings(self) -> list["DyadicCube"]:
        """All cubes sharing this cube's parent, itself included."""
        assert self.level > 0, "the root cube has no sibling set"
        return self.parent().children()

    def is_ancestor_of(self, other: "DyadicCube") -> bool:
        """True when ``other`` is contained in this cube (self included)."""
        if other.level < self.level or other.root != self.root:
            return False
        shift = other.level - self.level
        return all(oc >> shift == c for oc, c in zip(other.coords, self.coords))

    def descendants(self, generations: int) -> list["DyadicCube"]:
        """All cubes ``generations`` levels down, lexicographic order."""
        assert generations >= 0
        n = 1 << generations
        out = []
        for offs in np.ndindex(*(n,) * self.dim):
            out.append(
                DyadicCube(
                    self.level + generations,
                    tuple(n * c + o for c, o in zip(self.coords, offs)),
                    self.root,
                )
            )
        return out

    # -- membership -----------------------------------------------------

    def contains_point(self, x: Sequence[float]) -> bool:
        """Half-open membership: corner edges in, far edges out."""
        c = self.corner
        s = self.side
        return all(c[i] <= x[i] < c[i] + s for i in range(self.dim))

    def dilated_contains(self, lam: float, x: Sequence[float]) -> bool:
        """Closed membership in the concentric dilate ``lam * Q``."""
        assert lam >= 1.0, "dilation factor must be at least 1"
        half = 0.5 * lam * self.side
        mid = self.center
        return all(abs(x[i] - mid[i]) <= half for i in range(self.dim))

    def dilated_bounds(self, lam: float) -> tuple[np.ndarray, float]:
        """Corner and side of the concentric dilate."""
        side = lam * self.side
        return self.center - 0.5 * side, side

    # -- serialization --------------------------------------------------

    @property
    def token(self) -> str:
        return f"{self.level}:{','.join(str(c) for c in self.coords)}@0"

    def __repr__(self) -> str:  # compact, deterministic
        return f"DyadicCube({self.token})"

    def __lt__(self, other: "DyadicCube") -> bool:
        # size-then-lexicographic: bigger cubes first, ties by coords
        return (self.level, self.coords) < (other.level, other.coords)


def root_cube(root: RootFrame) -> DyadicCube:
    return DyadicCube(0, (0,) * root.dim, root)


def enumerate_cubes(top: DyadicCube, depth: int) -> list[DyadicCube]:
    """All descendants of ``top`` down ``depth`` generations.

    Ordered by nonincreasing side length, lexicographic coordinates
    within a level, so the output is deterministic and sums over it
    reproduce level by level.
    """
    assert depth >= 0, "depth must be nonnegative"
    out: list[DyadicCube] = []
    for j in range(depth + 1):
        out.extend(top.descendants(j))
    return out


def parse_token(token: str, root: RootFrame) -> DyadicCube:
    """Inverse of ``DyadicCube.token`` for standard-grid cubes."""
    body, _, shift = token.partition("@")
    assert shift in ("", "0"), f"token {token!r} is not on the standard grid"
    level_str, _, coord_str = body.partition(":")
    coords = tuple(int(c) for c in coord_str.split(","))
    return DyadicCube(int(level_str), coords, root)


# ---------------------------------------------------------------------------
# quadrature lattices


def midpoint_lattice(corner: np.ndarray, side: float, refine: int, dim: int) -> np.ndarray:
    """Midpoints of the 2^(dim*refine) subcells of a box, C-order.

    The midpoint rule on this lattice integrates affine functions
    exactly, which every mean-square quantity in the package leans on.
    """
    assert refine >= 0
    n = 1 << refine
    ticks = (np.arange(n) + 0.5) / n
    axes = np.meshgrid(*([ticks] * dim), indexing="ij")
    unit = np.stack([a.reshape(-1) for a in axes], axis=1)
    return np.asarray(corner, dtype=float) + side * unit


def box_corners(corner: np.ndarray, side: float, dim: int) -> np.ndarray:
    """The 2^dim vertices of a box, lexicographic order."""
    offs = np.array(list(np.ndindex(*(2,) * dim)), dtype=float)
    return np.asarray(corner, dtype=float) + side * offs


# ---------------------------------------------------------------------------
# box distances


def box_distance(points: np.ndarray, corner: np.ndarray, side) -> np.ndarray:
    """Euclidean distance from each point to an axis-aligned box."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    lo = corner - pts
    hi = pts - (corner + side)
    gap = np.maximum(np.maximum(lo, hi), 0.0)
    return np.sqrt((gap * gap).sum(axis=1))


def box_box_distance(
    corner_a: np.ndarray, side_a, corner_b: np.ndarray, side_b
) -> np.ndarray:
    """Euclidean gap between axis-aligned boxes (0 when they meet).

    ``corner_a``/``side_a`` may describe a batch of boxes; the b box
    broadcasts against them.
    """
    a0 = np.atleast_2d(np.asarray(corner_a, dtype=float))
    b0 = np.atleast_2d(np.asarray(corner_b, dtype=float))
    a_hi = a0 + np.reshape(side_a, (-1, 1))
    b_hi = b0 + np.reshape(side_b, (-1, 1))
    gap = np.maximum(np.maximum(b0 - a_hi, a0 - b_hi), 0.0)
    return np.sqrt((gap * gap).sum(axis=1))


# ---------------------------------------------------------------------------
# cube sets


class CubeSet:
    """An immutable collection of cubes from one root frame.

    Supports exact membership, ancestor/descendant queries against the
    dyadic order, mass accounting, and vectorized distance evaluation.
    Members may be nested; ``mass`` sums member volumes with multiplicity
    while ``cover_volume`` measures the union.

    An empty set is allowed but must carry an explicit ``frame`` so that
    queries still know their geometry; distances to it are infinite.
    """

    def __init__(self, cubes: Iterable[DyadicCube], frame: RootFrame | None = None):
        members = sorted(set(cubes))
        if members:
            root = members[0].root
            assert frame is None or frame == root, "frame disagrees with the members"
        else:
            assert frame is not None, "an empty cube set needs an explicit frame"
            root = frame
        assert all(q.root == root for q in members), "members span root frames"
        self.root = root
        self._members = members
        self._keys = frozenset(q.key() for q in members)
        closure = set()
        for q in members:
            lvl, coords = q.level, q.coords
            while True:
                k = (lvl, coords)
                if k in closure:
                    break
                closure.add(k)
                if lvl == 0:
                    break
                lvl -= 1
                coords = tuple(c >> 1 for c in coords)
        self._ancestor_closure = frozenset(closure)
        self._corners = np.array([q.corner for q in members]).reshape(len(members), root.dim)
        self._sides = np.array([q.side for q in members], dtype=float)
        self._diams = self._sides * math.sqrt(root.dim)

    def __len__(self) -> int:
        return len(self._members)

    def __iter__(self) -> Iterator[DyadicCube]:
        return iter(self._members)

    def __contains__(self, cube: DyadicCube) -> bool:
        return cube.root == self.root and cube.key() in self._keys

    def __eq__(self, other: object) -> bool:
        return isinstance(other, CubeSet) and self.root == other.root and self._keys == other._keys

    def contains_ancestor_of(self, cube: DyadicCube) -> bool:
        """Some member contains ``cube`` (members at or above its level)."""
        lvl, coords = cube.level, cube.coords
        while True:
            if (lvl, coords) in self._keys:
                return True
            if lvl == 0:
                return False
            lvl -= 1
            coords = tuple(c >> 1 for c in coords)

    def contains_descendant_of(self, cube: DyadicCube) -> bool:
        """Some member is contained in ``cube`` (cube itself counts)."""
        return cube.key() in self._ancestor_closure

    def meets(self, cube: DyadicCube) -> bool:
        """The union of members intersects ``cube`` (dyadic nesting)."""
        return self.contains_descendant_of(cube) or self.contains_ancestor_of(cube)

    def covers_cube(self, cube: DyadicCube) -> bool:
        """``cube`` lies inside the union of members."""
        if self.contains_ancestor_of(cube):
            return True
        if not self.contains_descendant_of(cube):
            return False
        return all(self.covers_cube(c) for c in cube.children())

    def mass(self) -> float:
        """Sum of member volumes, nested members counted separately."""
        return float((self._sides ** self.root.dim).sum())

    def cover_volume(self) -> float:
        """Measure of the union of members."""
        total = 0.0
        for q in self._members:
            if q.level == 0 or not self._strict_ancestor_present(q):
                total += q.volume
        return total

    def _strict_ancestor_present(self, cube: DyadicCube) -> bool:
        lvl, coords = cube.level, cube.coords
        while lvl > 0:
            lvl -= 1
            coords = tuple(c >> 1 for c in coords)
            if (lvl, coords) in self._keys:
                return True
        return False

    def leaf_count(self, floor_level: int) -> int:
        """Exact number of level-``floor_level`` cells covered, counted
        with multiplicity (integer arithmetic, no rounding)."""
        d = self.root.dim
        total = 0
        for q in self._members:
            assert q.level <= floor_level, "floor level above a member"
            total += 1 << (d * (floor_level - q.level))
        return total

    def distance(self, points: np.ndarray) -> np.ndarray:
        """Euclidean distance to the union of members, vectorized."""
        return self._min_over_members(points, include_diam=False)

    def reach(self, points: np.ndarray) -> np.ndarray:
        """min over members Q of dist(x, Q) + diam Q, vectorized.

        This is the region-adapted distance used by Whitney covers: it is
        1-Lipschitz and strictly positive whenever members have positive
        side length.
        """
        return self._min_over_members(points, include_diam=True)

    def _min_over_members(self, points: np.ndarray, include_diam: bool) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        n = pts.shape[0]
        if not self._members:
            return np.full(n, np.inf)
        out = np.empty(n)
        # chunked so the (points x members) gap tensor stays small
        step = max(1, int(4.0e6 // max(len(self._members), 1)))
        for start in range(0, n, step):
            block = pts[start : start + step]  # (b, d)
            lo = self._corners[None, :, :] - block[:, None, :]
            hi = block[:, None, :] - (self._corners + self._sides[:, None])[None, :, :]
            gap = np.maximum(np.maximum(lo, hi), 0.0)
            dist = np.sqrt((gap * gap).sum(axis=2))
            if include_diam:
                dist = dist + self._diams[None, :]
            out[start : start + step] = dist.min(axis=1)
        return out

    def cube_reach(self, corner: np.ndarray, side: float) -> float:
        """min over members Q of dist(box, Q) + diam Q for a query box.

        Equals the infimum of ``reach`` over the box, exactly: the
        minimum of dist(x, Q) over an axis-aligned box is the box-to-box
        gap, and diam Q does not depend on x.
        """
        if not self._members:
            return math.inf
        gaps = box_box_distance(self._corners, self._sides, np.asarray(corner), side)
        return float((gaps + self._diams).min())

    def cube_distance(self, corner: np.ndarray, side: float) -> float:
        """Infimum of the plain distance over a query box."""
        if not self._members:
            return math.inf
        gaps = box_box_distance(self._corners, self._sides, np.asarray(corner), side)
        return float(gaps.min())

    def reach_boxes(self, corners: np.ndarray, sides: np.ndarray) -> np.ndarray:
        """``cube_reach`` for a batch of query boxes with shared shape."""
        return self._min_over_boxes(corners, sides, include_diam=True)

    def distance_boxes(self, corners: np.ndarray, sides: np.ndarray) -> np.ndarray:
        """``cube_distance`` for a batch of query boxes."""
        return self._min_over_boxes(corners, sides, include_diam=False)

    def _min_over_boxes(self, corners: np.ndarray, sides: np.ndarray,
                        include_diam: bool) -> np.ndarray:
        qc = np.atleast_2d(np.asarray(corners, dtype=float))
        qs = np.broadcast_to(np.asarray(sides, dtype=float), qc.shape[:1])
        n = qc.shape[0]
        if not self._members:
            return np.full(n, np.inf)
        out = np.empty(n)
        step = max(1, int(4.0e6 // max(len(self._members), 1)))
        m_lo = self._corners
        m_hi = self._corners + self._sides[:, None]
        for start in range(0, n, step):
            lo = qc[start : start + step]
            hi = lo + qs[start : start + step, None]
            gap = np.maximum(
                np.maximum(m_lo[None, :, :] - hi[:, None, :],
                           lo[:, None, :] - m_hi[None, :, :]),
                0.0,
            )
            dist = np.sqrt((gap * gap).sum(axis=2))
            if include_diam:
                dist = dist + self._diams[None, :]
            out[start : start + step] = dist.min(axis=1)
        return out

    def maximal_members(self) -> list[DyadicCube]:
        """Members with no strict ancestor in the set; they tile the
        union without overlap."""
        return [
            q for q in self._members
            if q.level == 0 or not self._strict_ancestor_present(q)
        ]


def region_distance(x: Sequence[float], provider) -> float:
    """Distance from ``x`` to a cube collection.

    For objects exposing ``reach`` (stopping-time regions and cube sets
    in the region-adapted sense) this is min over members of
    dist(x, Q) + diam Q; a bare ``CubeSet`` queried via ``distance``
    gives the plain Euclidean distance to the union. Raising on an empty
    collection is handled at construction: cube sets cannot be empty.
    """
    if provider is None:
        raise ValueError("empty region: no cubes to measure distance against")
    if isinstance(provider, CubeSet):
        return float(provider.distance(np.asarray(x, dtype=float))[0])
    reach = getattr(provider, "reach", None)
    if reach is None:
        raise TypeError(f"no distance semantics for provider {type(provider)!r}")
    return float(reach(np.asarray(x, dtype=float))[0])


# ---------------------------------------------------------------------------
# the one-third trick


@dataclass(frozen=True)
class ShiftedCube:
    """A cube from one of the 2^d shifted dyadic grids.

    ``shift`` holds per-axis offsets, each 0 or 1/3 in units of the root
    side. Coordinates may be negative: shifted grids are not confined to
    the root window.
    """

    shift: tuple[float, ...]
    level: int
    coords: tuple[int, ...]
    corner: tuple[float, ...]
    side: float

    @property
    def token(self) -> str:
        shift_txt = ",".join("1/3" if s else "0" for s in self.shift)
        coord_txt = ",".join(str(c) for c in self.coords)
        return f"{self.level}:{coord_txt}@{shift_txt}"


def shifted_containing_cube(
    corner: Sequence[float], side: float, root: RootFrame | None = None
) -> ShiftedCube:
    """Locate a shifted-grid cube of 3x the side containing a given box.

    The box has side ``base * 2**-k / 3`` for some integer k >= 0. Among
    the 2^d dyadic grids offset by 0 or 1/3 of the root side per axis,
    at least one contains the box inside a single cube of side
    ``base * 2**-k``; the choice is made independently per axis, taking
    the unshifted grid whenever it works, so the result is deterministic.
    """
    corner = tuple(float(c) for c in corner)
    if root is None:
        root = RootFrame((0.0,) * len(corner), 1.0)
    assert len(corner) == root.dim, "corner/axis count mismatch"
    base = root.base_side
    assert side > 0, "box side must be positive"
    k = round(math.log2(base / (3.0 * side)))
    if k < 0 or abs(base / (2.0 ** k) / 3.0 - side) > 1e-9 * side:
        raise ValueError(
            f"box side {side} is not base * 2**-k / 3 for any integer k >= 0"
        )
    ell = base / (2.0 ** k)  # side of the containing cube
    tol = 1e-9 * ell
    shift = []
    coords = []
    out_corner = []
    for i in range(root.dim):
        a = corner[i] - root.corner[i]
        frac = a / ell - math.floor(a / ell)
        # the box spans one third of a grid cell; it fits the unshifted
        # grid exactly when it does not straddle a multiple of ell
        if frac * ell <= 2.0 * ell / 3.0 + tol:
            v = 0.0
        else:
            v = 1.0 / 3.0
        n = math.floor((a - v * base) / ell + tol / ell)
        lo = root.corner[i] + v * base + n * ell
        assert lo <= corner[i] + tol and corner[i] + side <= lo + ell + tol, (
            "one-third trick containment failed; box not on the tripled lattice?"
        )
        shift.append(v)
        coords.append(int(n))
        out_corner.append(lo)
    return ShiftedCube(tuple(shift), k, tuple(coords), tuple(out_corner), ell)
