"""Test-map zoo: analytic families, a singular monotone CDF, sampled
grids, and empirical distortion diagnostics.

Every map evaluates in bulk through ``eval_many`` on (n, d) arrays and
declares an optional rectangular domain window (None means all of R^d).
Diagnostics are deterministic: pair and triple draws come from fixed
low-discrepancy streams, never a stateful RNG, so reports reproduce
bit-for-bit.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .affine import AffineMap, max_pairwise_distance
from .cubes import DyadicCube, box_corners, midpoint_lattice

KAHANE_DEPTH = 64  # recursion depth for non-triadic points; triadic ones exit exactly

_PRIMES = np.array(
    [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71],
    dtype=float,
)


def _kronecker(n: int, dim: int, skip: int = 0) -> np.ndarray:
    """Low-discrepancy points in [0,1)^dim (additive sqrt-prime stream)."""
    assert dim <= len(_PRIMES), "widen the prime table for this dimension"
    alpha = np.sqrt(_PRIMES[:dim])
    idx = np.arange(skip + 1, skip + n + 1, dtype=float)
    return (idx[:, None] * alpha[None, :]) % 1.0


class TestMap:
    """A map R^d -> R^D with bulk evaluation and an optional window."""

    def __init__(
        self,
        kind: str,
        dim_in: int,
        dim_out: int,
        fn: Callable[[np.ndarray], np.ndarray],
        jac: Callable[[np.ndarray], np.ndarray] | None = None,
        window: tuple[np.ndarray, float] | None = None,
        label: str = "",
    ):
        self.kind = kind
        self.dim_in = dim_in
        self.dim_out = dim_out
        self._fn = fn
        self._jac = jac
        self.window = window
        self.label = label or kind

    def eval_many(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        assert pts.shape[1] == self.dim_in, "point dimension mismatch"
        if self.window is not None:
            corner, side = self.window
            tol = 1e-9 * side
            inside = np.all(
                (pts >= corner - tol) & (pts <= corner + side + tol), axis=1
            )
            if not inside.all():
                raise ValueError(
                    f"{self.label}: {int((~inside).sum())} points outside the "
                    "domain window"
                )
        out = self._fn(pts)
        return out.reshape(pts.shape[0], self.dim_out)

    def eval(self, x: Sequence[float]) -> np.ndarray:
        return self.eval_many(np.asarray(x, dtype=float))[0]

    @property
    def has_jacobian(self) -> bool:
        return self._jac is not None

    def jacobian_many(self, points: np.ndarray) -> np.ndarray:
        assert self._jac is not None, f"{self.label} has no analytic jacobian"
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return self._jac(pts).reshape(pts.shape[0], self.dim_out, self.dim_in)

    def __repr__(self) -> str:
        return f"TestMap({self.label}, {self.dim_in}->{self.dim_out})"


# ---------------------------------------------------------------------------
# built-in kinds


def identity_map(dim: int) -> TestMap:
    eye = np.eye(dim)
    return TestMap(
        "identity",
        dim,
        dim,
        lambda p: p.copy(),
        jac=lambda p: np.broadcast_to(eye, (p.shape[0], dim, dim)).copy(),
        label=f"identity_{dim}d",
    )


def affine_test_map(A: AffineMap) -> TestMap:
    return TestMap(
        "affine",
        A.dim_in,
        A.dim_out,
        lambda p: A.evaluate(p),
        jac=lambda p: np.broadcast_to(A.linear, (p.shape[0],) + A.linear.shape).copy(),
        label="affine",
    )


def kahane_cdf(x, rho: float):
    """CDF of the self-similar measure giving the two outer thirds of
    every triadic interval mass rho each.

    Recursion on [0,1]: F = rho*F(3x) on the left third,
    rho + (1-2rho)*F(3x-1) on the middle, 1-rho + rho*F(3x-2) on the
    right; F(x+n) = n + F(x) extends it to the line. Evaluation runs the
    branch selection iteratively with a (low, mass) accumulator; triadic
    rationals resolve exactly, everything else to depth 64.
    """
    if not 0.0 < rho < 1.0 / 3.0:
        raise ValueError(f"rho={rho} outside (0, 1/3)")
    arr = np.asarray(x, dtype=float)
    scalar = arr.ndim == 0
    y = np.atleast_1d(arr).astype(float).copy()
    base = np.floor(y)
    y -= base
    lo = np.zeros_like(y)
    mass = np.ones_like(y)
    third = 1.0 / 3.0
    for _ in range(KAHANE_DEPTH):
        left = y <= third
        right = y > 2.0 * third
        mid = ~left & ~right
        # left: zoom into [0,1/3]
        y[left] *= 3.0
        mass[left] *= rho
        # middle: zoom into [1/3,2/3]
        lo[mid] += rho * mass[mid]
        mass[mid] *= 1.0 - 2.0 * rho
        y[mid] = 3.0 * y[mid] - 1.0
        # right: zoom into [2/3,1]
        lo[right] += (1.0 - rho) * mass[right]
        mass[right] *= rho
        y[right] = 3.0 * y[right] - 2.0
    out = base + lo + mass * y
    return float(out[0]) if scalar else out


def kahane_map(rho: float) -> TestMap:
    if not 0.0 < rho < 1.0 / 3.0:
        raise ValueError(f"rho={rho} outside (0, 1/3)")
    return TestMap(
        "kahane",
        1,
        1,
        lambda p: kahane_cdf(p[:, 0], rho)[:, None],
        label=f"kahane_rho{rho}",
    )


def snowflake_map(dim: int, amplitude: float, frequency: int) -> TestMap:
    """f(x) = x + amplitude * Phi(frequency * x) with Phi the unit-C1
    diagonal sine field Phi_i(y) = sin(2 pi y_i + phase_i)/(2 pi).

    amplitude < 1/(2 frequency) keeps the Jacobian within distance 1/2
    of the identity, hence the map bi-Lipschitz.
    """
    assert frequency >= 1
    assert amplitude >= 0
    phases = np.array([math.pi * i / (2 * dim) for i in range(dim)])

    def fn(p: np.ndarray) -> np.ndarray:
        return p + amplitude * np.sin(2 * math.pi * frequency * p + phases) / (
            2 * math.pi
        )

    def jac(p: np.ndarray) -> np.ndarray:
        diag = 1.0 + amplitude * frequency * np.cos(
            2 * math.pi * frequency * p + phases
        )
        out = np.zeros((p.shape[0], dim, dim))
        idx = np.arange(dim)
        out[:, idx, idx] = diag
        return out

    return TestMap(
        "snowflake_perturbation",
        dim,
        dim,
        fn,
        jac=jac,
        label=f"snowflake_a{amplitude}_f{frequency}_{dim}d",
    )


def analytic_map(
    fn: Callable[[np.ndarray], np.ndarray],
    dim_in: int,
    dim_out: int,
    jac: Callable[[np.ndarray], np.ndarray] | None = None,
    window: tuple[np.ndarray, float] | None = None,
    label: str = "analytic",
) -> TestMap:
    """Wrap an arbitrary vectorized callable as a map."""
    return TestMap("analytic", dim_in, dim_out, fn, jac=jac, window=window, label=label)


# ---------------------------------------------------------------------------
# sampled grids with multilinear interpolation


def sampled_map(
    values: np.ndarray,
    window_corner: Sequence[float] | None = None,
    window_side: float = 1.0,
    label: str = "sampled",
) -> TestMap:
    """Piecewise-multilinear map from grid samples.

    ``values`` has shape (n+1, ..., n+1, D) with n = 2^J_s a power of
    two: samples at the corners of the level-J_s lattice over the
    window. Continuous by construction; injectivity is not asserted.
    """
    values = np.asarray(values, dtype=float)
    dim = values.ndim - 1
    n = values.shape[0] - 1
    assert n >= 1 and (n & (n - 1)) == 0, "grid resolution must be a power of two"
    assert all(s == n + 1 for s in values.shape[:-1]), "grid must be cubical"
    dim_out = values.shape[-1]
    corner = np.zeros(dim) if window_corner is None else np.asarray(window_corner, float)
    side = float(window_side)

    def fn(p: np.ndarray) -> np.ndarray:
        u = (p - corner) / side
        t = np.clip(u, 0.0, 1.0) * n
        i0 = np.minimum(np.floor(t).astype(int), n - 1)
        frac = t - i0
        out = np.zeros((p.shape[0], dim_out))
        for offs in np.ndindex(*(2,) * dim):
            w = np.ones(p.shape[0])
            for ax, o in enumerate(offs):
                w = w * (frac[:, ax] if o else 1.0 - frac[:, ax])
            idx = tuple(i0[:, ax] + offs[ax] for ax in range(dim))
            out += w[:, None] * values[idx]
        return out

    return TestMap(
        "sampled", dim, dim_out, fn, window=(corner, side), label=label
    )


def sample_to_grid(map_obj, j_s: int, window_corner=None, window_side: float = 1.0):
    """Evaluate a map on the corner lattice at resolution 2^-j_s."""
    dim = map_obj.dim_in
    n = 1 << j_s
    corner = np.zeros(dim) if window_corner is None else np.asarray(window_corner, float)
    ticks = np.linspace(0.0, 1.0, n + 1)
    axes = np.meshgrid(*([ticks] * dim), indexing="ij")
    pts = corner + window_side * np.stack([a.reshape(-1) for a in axes], axis=1)
    vals = map_obj.eval_many(pts)
    return vals.reshape((n + 1,) * dim + (map_obj.dim_out,))


def write_sampled_csv(path: str, values: np.ndarray) -> None:
    """Grid-sample CSV: first data row carries (d, D, J_s), then one row
    per lattice node with integer indices and image coordinates."""
    values = np.asarray(values, dtype=float)
    dim = values.ndim - 1
    n = values.shape[0] - 1
    j_s = n.bit_length() - 1
    dim_out = values.shape[-1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["d", "D", "J_s"])
        w.writerow([dim, dim_out, j_s])
        w.writerow([f"i{k}" for k in range(dim)] + [f"y{k}" for k in range(dim_out)])
        for idx in np.ndindex(*values.shape[:-1]):
            w.writerow(list(idx) + [repr(float(v)) for v in values[idx]])


def read_sampled_csv(path: str, window_corner=None, window_side: float = 1.0) -> TestMap:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["d", "D", "J_s"], "unrecognized sampled-map header"
    dim, dim_out, j_s = (int(v) for v in rows[1])
    n = 1 << j_s
    values = np.full((n + 1,) * dim + (dim_out,), np.nan)
    for row in rows[3:]:
        if not row:
            continue
        idx = tuple(int(v) for v in row[:dim])
        values[idx] = [float(v) for v in row[dim:]]
    assert not np.isnan(values).any(), "sampled-map CSV is missing lattice nodes"
    return sampled_map(values, window_corner, window_side, label=f"sampled_J{j_s}")


# ---------------------------------------------------------------------------
# diagnostics


def image_diam(map_obj, Q: DyadicCube, m: int) -> float:
    """Max pairwise image distance over the midpoint lattice plus the
    cube corners: a lower bound on diam f(Q), nondecreasing in m for
    maps whose extremes sit at corners (affine, monotone)."""
    assert m >= 1
    nodes = np.concatenate(
        [
            midpoint_lattice(Q.corner, Q.side, m, Q.dim),
            box_corners(Q.corner, Q.side, Q.dim),
        ],
        axis=0,
    )
    return max_pairwise_distance(map_obj.eval_many(nodes))


@dataclass
class HolderFit:
    """Two-sided power-law bracket for normalized displacements.

    With u = |x-y|/diam K and v = |f(x)-f(y)|/diam f(K), the bracket is
    (1/(2C)) u^(1/alpha) <= v <= 2^alpha C u^alpha. ``grid`` holds, per
    candidate alpha, the least constants closing each side on the fit
    pairs (their max is the least feasible C); ``residual`` is the max
    relative violation of the reported bracket over all sampled pairs.
    """

    C: float
    alpha: float
    residual: float
    grid: np.ndarray  # (n_alpha, 3) columns: alpha, C_upper, C_lower

    def feasible_c(self, alpha: float) -> float:
        """Least C closing both sides at the grid alpha nearest to the
        requested one."""
        k = int(np.argmin(np.abs(self.grid[:, 0] - alpha)))
        return float(max(self.grid[k, 1], self.grid[k, 2]))


def _holder_pairs(Q: DyadicCube, n_pairs: int, skip: int) -> tuple[np.ndarray, np.ndarray]:
    d = Q.dim
    pts = _kronecker(n_pairs, 2 * d + 1, skip=skip)
    x = Q.corner + Q.side * pts[:, :d]
    raw_dir = pts[:, d : 2 * d] - 0.5
    norms = np.linalg.norm(raw_dir, axis=1)
    norms = np.maximum(norms, 1e-12)
    dirs = raw_dir / norms[:, None]
    # log-spaced gap lengths cover twenty octaves of scales
    scale = Q.side * 2.0 ** (-20.0 * pts[:, 2 * d])
    y = np.clip(x + scale[:, None] * dirs, Q.corner, Q.corner + Q.side)
    keep = np.linalg.norm(x - y, axis=1) > 1e-15 * Q.side
    return x[keep], y[keep]


def _triadic_anchor_pairs(Q: DyadicCube) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic pairs on triadic lattices (1-d cubes only).

    Self-similar maps built on third subdivisions attain their extremal
    displacement ratios at aligned triadic pairs; random streams almost
    never land on them, which would leave the fitted constants far below
    the truth.
    """
    xs, ys = [], []
    for k in range(1, 8):
        n = 3 ** k
        idx = np.arange(n + 1)
        for off in (1, 2, 3):
            i = idx[: n - off + 1]
            xs.append(Q.corner[0] + Q.side * i / n)
            ys.append(Q.corner[0] + Q.side * (i + off) / n)
    x = np.concatenate(xs)[:, None]
    y = np.concatenate(ys)[:, None]
    return x, y


def holder_fit(map_obj, K: DyadicCube, n_pairs: int) -> HolderFit:
    """Fit the two-sided power bracket on quasi-random pairs.

    Per alpha on a log grid, the least constants closing the upper and
    lower side are closed-form maxima over the fit pairs (quasi-random
    plus, on intervals, triadic anchors that hit self-similar extremes).
    The fitted alpha is the largest one whose least feasible C stays
    within 25% of the grid's best constant — the elbow where the
    constant starts exploding. The residual re-measures the bracket at
    the fitted (C, alpha) against a fresh validation stream.
    """
    assert n_pairs >= 100, "need at least 100 pairs"
    diam_img = image_diam(map_obj, K, m=6 if K.dim == 1 else 4)
    if diam_img <= 0:
        raise ValueError("degenerate image: map is constant on the cube")
    x, y = _holder_pairs(K, n_pairs, skip=0)
    if K.dim == 1:
        xa, ya = _triadic_anchor_pairs(K)
        x = np.concatenate([x, xa])
        y = np.concatenate([y, ya])
    u = np.linalg.norm(x - y, axis=1) / K.diam
    v = (
        np.linalg.norm(map_obj.eval_many(x) - map_obj.eval_many(y), axis=1)
        / diam_img
    )
    alphas = np.geomspace(0.05, 1.0, 61)
    grid = np.empty((alphas.size, 3))
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        for k, alpha in enumerate(alphas):
            c_upper = np.max(v / (2.0 ** alpha * u ** alpha))
            vv = np.where(v > 0, v, np.inf)
            c_lower = np.max(u ** (1.0 / alpha) / (2.0 * vv))
            grid[k] = (alpha, c_upper, c_lower)
    c_min = np.maximum(grid[:, 1], grid[:, 2])
    finite = np.isfinite(c_min)
    assert finite.any(), "no workable constant at any exponent"
    best_c = c_min[finite].min()
    ok = np.where(finite & (c_min <= 1.25 * best_c))[0]
    alpha = float(alphas[ok.max()])
    c_fit = float(c_min[ok.max()])

    xv, yv = _holder_pairs(K, n_pairs, skip=7 * n_pairs + 13)
    uv = np.linalg.norm(xv - yv, axis=1) / K.diam
    vv = (
        np.linalg.norm(map_obj.eval_many(xv) - map_obj.eval_many(yv), axis=1)
        / diam_img
    )
    upper = 2.0 ** alpha * c_fit * uv ** alpha
    lower = uv ** (1.0 / alpha) / (2.0 * c_fit)
    viol_up = np.maximum(vv - upper, 0.0) / upper
    viol_low = np.maximum(lower - vv, 0.0) / np.maximum(lower, 1e-300)
    residual = float(max(viol_up.max(), viol_low.max()))
    return HolderFit(C=c_fit, alpha=alpha, residual=residual, grid=grid)


def empirical_eta(map_obj, Q: DyadicCube, n_triples: int) -> np.ndarray:
    """Empirical distortion envelope from point triples.

    Bins t = |x-y|/|x-z| into log buckets and keeps each bucket's max
    image ratio |f(x)-f(y)|/|f(x)-f(z)| together with the t where it was
    seen, then applies a cumulative max so the envelope is nondecreasing
    — a lower envelope for any valid distortion gauge. Composing the map
    with a global scaling leaves the table unchanged.
    """
    assert n_triples >= 1000, "need at least 1000 triples"
    d = Q.dim
    pts = _kronecker(n_triples, 3 * d, skip=0)
    x = Q.corner + Q.side * pts[:, :d]
    y = Q.corner + Q.side * pts[:, d : 2 * d]
    z = Q.corner + Q.side * pts[:, 2 * d :]
    if d == 1:
        # structured triadic anchors pin the envelope at simple ratios
        lattice = Q.corner[0] + Q.side * np.arange(28) / 27.0
        xi, yi, zi = np.meshgrid(lattice, lattice, lattice, indexing="ij")
        mask = (xi != yi) & (xi != zi) & (yi != zi)
        x = np.concatenate([x, xi[mask][:, None]])
        y = np.concatenate([y, yi[mask][:, None]])
        z = np.concatenate([z, zi[mask][:, None]])
    dxy = np.linalg.norm(x - y, axis=1)
    dxz = np.linalg.norm(x - z, axis=1)
    good = (dxy > 1e-14 * Q.side) & (dxz > 1e-14 * Q.side)
    x, y, z, dxy, dxz = x[good], y[good], z[good], dxy[good], dxz[good]
    fx = map_obj.eval_many(x)
    fy = map_obj.eval_many(y)
    fz = map_obj.eval_many(z)
    ixy = np.linalg.norm(fx - fy, axis=1)
    ixz = np.linalg.norm(fx - fz, axis=1)
    if np.any(ixz <= 0) or np.any((ixy <= 0) & (dxy > 0)):
        raise ValueError("not an embedding on samples: image points collide")
    t = dxy / dxz
    ratio = ixy / ixz
    edges = np.geomspace(t.min() * 0.999, t.max() * 1.001, 33)
    rows = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        sel = (t >= lo) & (t < hi)
        if not sel.any():
            continue
        k = np.argmax(ratio[sel])
        rows.append((t[sel][k], ratio[sel][k]))
    table = np.array(sorted(rows))
    table[:, 1] = np.maximum.accumulate(table[:, 1])
    return table


def finite_diff_gradient(
    map_obj, x: Sequence[float], h: float, onesided: list[int] | None = None
) -> np.ndarray:
    """Central-difference Jacobian estimate, one column per axis.

    Near a window boundary the scheme falls back to a one-sided
    difference on that axis and records it in ``onesided`` when a
    collector is passed.
    """
    assert h > 0
    x = np.asarray(x, dtype=float)
    d = map_obj.dim_in
    window = map_obj.window
    plus = np.repeat(x[None, :], d, axis=0) + h * np.eye(d)
    minus = np.repeat(x[None, :], d, axis=0) - h * np.eye(d)
    use_plus = np.ones(d, dtype=bool)
    use_minus = np.ones(d, dtype=bool)
    if window is not None:
        corner, side = window
        tol = 1e-12 * side
        use_plus = np.all(
            (plus >= corner - tol) & (plus <= corner + side + tol), axis=1
        )
        use_minus = np.all(
            (minus >= corner - tol) & (minus <= corner + side + tol), axis=1
        )
        if not np.all(use_plus | use_minus):
            raise ValueError("step h exceeds the domain window on some axis")
    f0 = map_obj.eval_many(x[None, :])[0]
    cols = []
    for i in range(d):
        if use_plus[i] and use_minus[i]:
            fp = map_obj.eval_many(plus[i][None, :])[0]
            fm = map_obj.eval_many(minus[i][None, :])[0]
            cols.append((fp - fm) / (2.0 * h))
        elif use_plus[i]:
            fp = map_obj.eval_many(plus[i][None, :])[0]
            cols.append((fp - f0) / h)
            if onesided is not None:
                onesided.append(i)
        else:
            fm = map_obj.eval_many(minus[i][None, :])[0]
            cols.append((f0 - fm) / h)
            if onesided is not None:
                onesided.append(i)
    return np.stack(cols, axis=1)


# ---------------------------------------------------------------------------
# windowed smooth fields (compactly supported inside the unit window)


def _window_poly(t: np.ndarray) -> np.ndarray:
    return (4.0 * t * (1.0 - t)) ** 2


def _window_poly_prime(t: np.ndarray) -> np.ndarray:
    return 2.0 * (4.0 * t * (1.0 - t)) * (4.0 - 8.0 * t)


def windowed_field(name: str, dim: int) -> TestMap:
    """Scalar C^1 fields vanishing (with their gradient) on the boundary
    of [0,1]^dim: 'bump', 'ripple', and 'well'."""
    if name == "bump":
        mod = lambda p: np.ones(p.shape[0])
        mod_grad = lambda p: np.zeros_like(p)
    elif name == "ripple":
        def mod(p):
            return np.sin(3 * math.pi * p[:, 0]) * np.cos(2 * math.pi * p[:, -1])

        def mod_grad(p):
            g = np.zeros_like(p)
            s0 = np.sin(3 * math.pi * p[:, 0])
            c0 = np.cos(3 * math.pi * p[:, 0])
            sl = np.sin(2 * math.pi * p[:, -1])
            cl = np.cos(2 * math.pi * p[:, -1])
            if dim == 1:
                g[:, 0] = 3 * math.pi * c0 * cl + s0 * (-2 * math.pi * sl)
            else:
                g[:, 0] = 3 * math.pi * c0 * cl
                g[:, -1] += s0 * (-2 * math.pi * sl)
            return g
    elif name == "well":
        centers = np.array([0.4, 0.7, 0.55])[:dim]

        def mod(p):
            out = np.ones(p.shape[0])
            for i in range(min(dim, 2)):
                out = out * (p[:, i] - centers[i])
            return out

        def mod_grad(p):
            g = np.zeros_like(p)
            if dim == 1:
                g[:, 0] = 1.0
            else:
                g[:, 0] = p[:, 1] - centers[1]
                g[:, 1] = p[:, 0] - centers[0]
            return g
    else:
        raise ValueError(f"unknown field {name!r}")

    def fn(p: np.ndarray) -> np.ndarray:
        w = np.prod(_window_poly(p), axis=1)
        return (w * mod(p))[:, None]

    def jac(p: np.ndarray) -> np.ndarray:
        w_axes = _window_poly(p)
        w = np.prod(w_axes, axis=1)
        grad_w = np.empty_like(p)
        for i in range(dim):
            others = np.prod(np.delete(w_axes, i, axis=1), axis=1) if dim > 1 else 1.0
            grad_w[:, i] = _window_poly_prime(p[:, i]) * others
        g = grad_w * mod(p)[:, None] + w[:, None] * mod_grad(p)
        return g[:, None, :]

    return TestMap(
        "analytic",
        dim,
        1,
        fn,
        jac=jac,
        window=(np.zeros(dim), 1.0),
        label=f"field_{name}_{dim}d",
    )


# ---------------------------------------------------------------------------
# planted-structure fixtures for the decomposition tests


def oscillation_branch_map(branch: DyadicCube, amplitude: float, frequency: int) -> TestMap:
    """Identity plus a C^1 oscillation supported inside one cube.

    The perturbation vanishes with its derivative on the branch
    boundary, so the map is smooth across it and exactly affine outside.
    """
    dim = branch.dim
    corner = branch.corner
    side = branch.side
    phases = np.array([math.pi * i / (2 * dim) for i in range(dim)])

    def fn(p: np.ndarray) -> np.ndarray:
        u = (p - corner) / side
        inside = np.all((u > 0.0) & (u < 1.0), axis=1)
        out = p.copy()
        if inside.any():
            ui = u[inside]
            w = np.prod(_window_poly(ui), axis=1)
            osc = np.sin(2 * math.pi * frequency * ui + phases)
            out[inside] += amplitude * side * w[:, None] * osc
        return out

    return TestMap(
        "analytic",
        dim,
        dim,
        fn,
        label=f"osc_branch_{branch.token}_a{amplitude}_f{frequency}",
    )


def vortex_branch_map(
    branch: DyadicCube,
    beta: float,
    r0_frac: float = 0.45,
    rmin_frac: float = 1e-4,
    core: Sequence[float] | None = None,
) -> TestMap:
    """Identity outside one cube, a logarithmic rotation inside it.

    Points at radius r from the core are rotated by
    beta * log(r0 / max(r, rmin)): the rotation angle drifts linearly in
    scale, so affine fits on nested cubes tilt steadily against their
    ancestors while every single scale stays a small perturbation.
    """
    assert branch.dim == 2, "the vortex fixture is planar"
    c = np.asarray(core, dtype=float) if core is not None else branch.center
    r0 = r0_frac * branch.side
    rmin = rmin_frac * branch.side

    def fn(p: np.ndarray) -> np.ndarray:
        rel = p - c
        r = np.linalg.norm(rel, axis=1)
        ang = beta * np.log(r0 / np.maximum(r, rmin))
        ang = np.maximum(ang, 0.0)  # no rotation at or beyond r0
        cos_a = np.cos(ang)
        sin_a = np.sin(ang)
        out = p.copy()
        out[:, 0] = c[0] + cos_a * rel[:, 0] - sin_a * rel[:, 1]
        out[:, 1] = c[1] + sin_a * rel[:, 0] + cos_a * rel[:, 1]
        return out

    return TestMap(
        "analytic",
        2,
        2,
        fn,
        label=f"vortex_{branch.token}_b{beta}",
    )
