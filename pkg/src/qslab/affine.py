"""Affine fitting over cubes and the scale-free deviation functionals.

Two functionals drive everything downstream. For a box B and map f,
with A ranging over affine maps:

- ``big_omega``: sqrt(mean |f - A*|^2) / diam B at the least-squares A*
  (the plain normalized L2 deviation, infimum attained by projection);
- ``small_omega``: inf over A with nonzero linear part of
  sqrt(mean |f - A|^2) / (|A'| * diam B), a nonconvex ratio whose
  infimum may only be approached as |A'| grows; the limit value along
  rays is computed in closed form from the node covariance.

All quadrature is the midpoint rule on dyadic sublattices, so affine
integrands are integrated exactly and both functionals are exactly
invariant under rescaling f in its image or domain.

Everything here is vectorized over batches of cubes: the per-level field
builders feed (cubes x nodes) arrays through one set of moment
contractions. Single-cube entry points wrap the batched core with a
batch of one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .cubes import DyadicCube, box_corners, midpoint_lattice

# ratio minimization: log-spaced scale sweep applied to the least-squares
# direction, exponent range +-8 octaves
T_GRID = np.concatenate([2.0 ** np.linspace(-8.0, 8.0, 33)])
RANK_ONE_RESTARTS = 12  # random direction pairs beyond the deterministic ones
POWER_ITERATIONS = 200
POWER_TOL = 1e-12


class AffineMap:
    """A(x) = linear @ x + offset, with the operator norm cached."""

    def __init__(self, linear: np.ndarray, offset: np.ndarray):
        self.linear = np.atleast_2d(np.asarray(linear, dtype=float))
        self.offset = np.atleast_1d(np.asarray(offset, dtype=float))
        assert self.linear.shape[0] == self.offset.shape[0], (
            "linear part and offset disagree on output dimension"
        )
        self.op_norm = float(operator_norms(self.linear[None])[0])

    @property
    def dim_in(self) -> int:
        return self.linear.shape[1]

    @property
    def dim_out(self) -> int:
        return self.linear.shape[0]

    @classmethod
    def identity(cls, dim: int) -> "AffineMap":
        return cls(np.eye(dim), np.zeros(dim))

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return pts @ self.linear.T + self.offset

    def __call__(self, x: Sequence[float]) -> np.ndarray:
        return self.evaluate(np.asarray(x, dtype=float))[0]

    def __repr__(self) -> str:
        return f"AffineMap(linear={self.linear.tolist()}, offset={self.offset.tolist()})"


@dataclass
class FitResult:
    """Outcome of the ratio minimization over one box."""

    omega: float
    big_omega: float
    minimizer: AffineMap | str  # "limit" when the infimum is a ray limit
    attained: bool
    samples_m: int
    clipped: bool = False

    @property
    def has_map(self) -> bool:
        return isinstance(self.minimizer, AffineMap)


# ---------------------------------------------------------------------------
# operator norms


def operator_norms(mats: np.ndarray) -> np.ndarray:
    """Largest singular value for a batch of (D, d) matrices.

    Closed forms when either dimension is 1 or both are 2; symmetric
    eigenvalue solve at 3; fixed-start power iteration above that.
    """
    mats = np.asarray(mats, dtype=float)
    n, dim_out, dim_in = mats.shape
    if dim_in == 1 or dim_out == 1:
        return np.sqrt((mats * mats).sum(axis=(1, 2)))
    gram = np.einsum("nij,nik->njk", mats, mats)  # L^T L, (n, d, d)
    if dim_in == 2:
        tr = gram[:, 0, 0] + gram[:, 1, 1]
        det = gram[:, 0, 0] * gram[:, 1, 1] - gram[:, 0, 1] * gram[:, 1, 0]
        disc = np.sqrt(np.maximum(0.25 * tr * tr - det, 0.0))
        return np.sqrt(np.maximum(0.5 * tr + disc, 0.0))
    if dim_in == 3:
        return np.sqrt(np.maximum(np.linalg.eigvalsh(gram)[:, -1], 0.0))
    # power iteration on L^T L; fixed start keeps results deterministic
    v = np.ones((n, dim_in)) + 1e-3 * np.arange(dim_in)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    lam = np.zeros(n)
    for _ in range(POWER_ITERATIONS):
        w = np.einsum("njk,nk->nj", gram, v)
        norm = np.linalg.norm(w, axis=1)
        lam_new = norm
        done = np.abs(lam_new - lam) <= POWER_TOL * np.maximum(lam_new, 1e-300)
        lam = lam_new
        v = w / np.maximum(norm[:, None], 1e-300)
        if done.all():
            break
    return np.sqrt(lam)


def operator_norm(mat: np.ndarray) -> float:
    return float(operator_norms(np.atleast_2d(mat)[None])[0])


def smallest_covariance_eigen(sxx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Smallest eigenvalue and eigenvector per (d, d) covariance batch."""
    sxx = np.asarray(sxx, dtype=float)
    n, d, _ = sxx.shape
    if d == 1:
        return sxx[:, 0, 0].copy(), np.ones((n, 1))
    if d == 2:
        tr = sxx[:, 0, 0] + sxx[:, 1, 1]
        det = sxx[:, 0, 0] * sxx[:, 1, 1] - sxx[:, 0, 1] * sxx[:, 1, 0]
        disc = np.sqrt(np.maximum(0.25 * tr * tr - det, 0.0))
        lam = np.maximum(0.5 * tr - disc, 0.0)
        # eigenvector of the 2x2 symmetric matrix for its smaller eigenvalue
        a, b, c = sxx[:, 0, 0], sxx[:, 0, 1], sxx[:, 1, 1]
        vx = np.where(np.abs(b) > 1e-300, lam - c, 1.0)
        vy = np.where(np.abs(b) > 1e-300, b, 0.0)
        # b == 0: diagonal matrix, pick the axis of the smaller entry
        diag_pick = (np.abs(b) <= 1e-300) & (c < a)
        vx = np.where(diag_pick, 0.0, vx)
        vy = np.where(diag_pick, 1.0, vy)
        norm = np.sqrt(vx * vx + vy * vy)
        norm = np.maximum(norm, 1e-300)
        return lam, np.stack([vx / norm, vy / norm], axis=1)
    vals, vecs = np.linalg.eigh(sxx)
    return np.maximum(vals[:, 0], 0.0), vecs[:, :, 0]


# ---------------------------------------------------------------------------
# quadrature and moments


def fit_nodes(
    corner: np.ndarray, side: float, m: int, dim: int, window=None
) -> tuple[np.ndarray, bool]:
    """Midpoint nodes of a box, clipped to a domain window when given.

    Returns the surviving nodes and whether any were dropped. Windowed
    maps are only defined on their window; the mean is then taken over
    the survivors.
    """
    nodes = midpoint_lattice(np.asarray(corner, dtype=float), side, m, dim)
    if window is None:
        return nodes, False
    wcorner, wside = window
    wcorner = np.asarray(wcorner, dtype=float)
    tol = 1e-9 * wside
    keep = np.all((nodes >= wcorner - tol) & (nodes <= wcorner + wside + tol), axis=1)
    if keep.all():
        return nodes, False
    assert keep.any(), "box lies entirely outside the map's domain window"
    nodes = nodes[keep]
    spread = nodes.max(axis=0) - nodes.min(axis=0)
    if np.any(spread <= 0):
        raise ValueError(
            "clipped quadrature is degenerate (single node column on an axis); "
            "increase the refinement m"
        )
    return nodes, True


def weighted_moments(nodes: np.ndarray, images: np.ndarray, weights: np.ndarray):
    """Centered second moments for a batch of boxes.

    nodes: (n, k, d), images: (n, k, D), weights: (n, k) in {0, 1}.
    Returns per-box mean point, mean image, covariance sxx (n, d, d),
    cross moments c (n, D, d), and q0 = mean |image - mean|^2 (n,).
    """
    wsum = weights.sum(axis=1)
    assert np.all(wsum > 0), "every box needs at least one quadrature node"
    xbar = np.einsum("nk,nkd->nd", weights, nodes) / wsum[:, None]
    ybar = np.einsum("nk,nkD->nD", weights, images) / wsum[:, None]
    xc = nodes - xbar[:, None, :]
    yc = images - ybar[:, None, :]
    sxx = np.einsum("nk,nki,nkj->nij", weights, xc, xc) / wsum[:, None, None]
    c = np.einsum("nk,nka,nki->nai", weights, yc, xc) / wsum[:, None, None]
    q0 = np.einsum("nk,nka,nka->n", weights, yc, yc) / wsum
    return xbar, ybar, sxx, c, q0


def centered_samples(nodes: np.ndarray, images: np.ndarray, weights: np.ndarray):
    """Mean-centered nodes and images plus the weight totals.

    Centering absorbs the offset: for a fixed linear part the optimal
    affine offset zeroes the weighted residual mean.
    """
    wsum = weights.sum(axis=1)
    xbar = np.einsum("nk,nkd->nd", weights, nodes) / wsum[:, None]
    ybar = np.einsum("nk,nkD->nD", weights, images) / wsum[:, None]
    return nodes - xbar[:, None, :], images - ybar[:, None, :], wsum


def direct_residual_sq(L, xc, yc, weights, wsum) -> np.ndarray:
    """mean_w |yc - L xc|^2 with the residual formed before squaring.

    The moment form q0 - 2<L,c> + tr(L sxx L^T) cancels catastrophically
    once the true residual drops below eps * |f|^2, flooring genuinely
    affine boxes around 1e-16 in the squared value. Subtracting first
    keeps them at machine zero.
    """
    r = yc - np.einsum("nai,nki->nka", L, xc)
    return np.einsum("nk,nka,nka->n", weights, r, r) / wsum


def _solve_lsq_linear(sxx: np.ndarray, c: np.ndarray) -> np.ndarray:
    """L* = c @ sxx^{-1} per batch entry, with a pseudoinverse fallback
    for covariances degenerate on some axis (clipped lattices)."""
    try:
        return np.linalg.solve(
            np.swapaxes(sxx, 1, 2), np.swapaxes(c, 1, 2)
        ).swapaxes(1, 2)
    except np.linalg.LinAlgError:
        return np.einsum("nai,nij->naj", c, np.linalg.pinv(sxx))


# ---------------------------------------------------------------------------
# the batched ratio minimization


def _ratio_value_sq(L, sxx, c, q0, diam2):
    """r(L)^2 = (q0 - 2<L,c> + tr(L sxx L^T)) / (|L|^2 diam^2), batched."""
    lin = np.einsum("nai,nai->n", L, c)
    quad = np.einsum("nai,nij,naj->n", L, sxx, L)
    obj = np.maximum(q0 - 2.0 * lin + quad, 0.0)
    sig = operator_norms(L)
    denom = sig * sig * diam2
    return np.where(denom > 0, obj / np.maximum(denom, 1e-300), np.inf)


def _polish(L, sxx, c, q0, diam2, best):
    """Vectorized coordinate descent with relative steps.

    Steps are proportional to the entry scale, so the polish commutes
    exactly with image scaling and domain dilation.
    """
    n, dim_out, dim_in = L.shape
    fro = np.sqrt((L * L).sum(axis=(1, 2)))
    for rel in (0.5, 0.1, 0.02, 0.004):
        for a in range(dim_out):
            for i in range(dim_in):
                scale = np.maximum(np.abs(L[:, a, i]), fro / math.sqrt(dim_out * dim_in))
                for sign in (1.0, -1.0):
                    trial = L.copy()
                    trial[:, a, i] += sign * rel * scale
                    val = _ratio_value_sq(trial, sxx, c, q0, diam2)
                    gain = val < best
                    if gain.any():
                        L[gain] = trial[gain]
                        best = np.where(gain, val, best)
        fro = np.sqrt((L * L).sum(axis=(1, 2)))
    return L, best


def _direction_pairs(dim_out: int, dim_in: int) -> list[tuple[np.ndarray, np.ndarray]]:
    pairs = []
    for a in range(dim_out):
        for i in range(dim_in):
            u = np.zeros(dim_out)
            u[a] = 1.0
            v = np.zeros(dim_in)
            v[i] = 1.0
            pairs.append((u, v))
    rng = np.random.default_rng(271828)  # fixed stream: restarts are part of the spec'd scheme
    for _ in range(RANK_ONE_RESTARTS):
        u = rng.normal(size=dim_out)
        v = rng.normal(size=dim_in)
        pairs.append((u / np.linalg.norm(u), v / np.linalg.norm(v)))
    return pairs


def batched_ratio_minimization(sxx, c, q0, diams, samples_m: int, clipped=None,
                               samples=None):
    """Minimize the scale-free deviation ratio for a batch of boxes.

    Returns a dict of arrays: omega, big_omega, attained mask, the best
    finite linear parts (n, D, d), their ratio values, and the ray-limit
    values. Offsets are not resolved here; they need the node/image
    means, which the callers hold.

    samples, when given, is the raw (nodes, images, weights) triple the
    moments came from. The search still runs on moments, but the
    reported values are then recomputed residual-first at the winning
    linear parts, which removes the ~1e-8 cancellation floor on omega
    and big_omega (see direct_residual_sq).
    """
    sxx = np.asarray(sxx, dtype=float)
    c = np.asarray(c, dtype=float)
    q0 = np.asarray(q0, dtype=float)
    diams = np.asarray(diams, dtype=float)
    n, dim_out, dim_in = c.shape
    diam2 = diams * diams

    l_star = _solve_lsq_linear(sxx, c)
    g = np.einsum("nai,nai->n", l_star, c)  # = tr(L* sxx L*^T) at the lsq solution
    g = np.maximum(g, 0.0)
    resid2 = np.maximum(q0 - g, 0.0)
    big_omega = np.sqrt(resid2) / diams

    lam_min, v_min = smallest_covariance_eigen(sxx)
    limit_sq = lam_min / diam2

    best_sq = np.full(n, np.inf)
    best_L = np.zeros_like(l_star)

    def consider(L_cand, mask=None):
        nonlocal best_sq, best_L
        val = _ratio_value_sq(L_cand, sxx, c, q0, diam2)
        if mask is not None:
            val = np.where(mask, val, np.inf)
        gain = val < best_sq
        if gain.any():
            best_sq = np.where(gain, val, best_sq)
            best_L[gain] = L_cand[gain]

    sigma_star = operator_norms(l_star)
    has_lsq = (sigma_star > 0) & (g > 0)
    # scale sweep along the least-squares direction, plus its closed-form
    # optimum t* = q0/g (the ratio is a quadratic in 1/t there)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_star = np.where(g > 0, q0 / np.maximum(g, 1e-300), 1.0)
    for t in T_GRID:
        consider(t * l_star, has_lsq)
    consider(t_star[:, None, None] * l_star, has_lsq & (t_star > 0))

    # rank-one families s * u v^T: for unit u, v the optimal s and value
    # are closed-form; covers the covariance's thin direction explicitly
    def consider_rank_one(u_arr, v_arr):
        a_coef = np.einsum("na,nai,ni->n", u_arr, c, v_arr)
        flip = np.where(a_coef < 0, -1.0, 1.0)
        a_coef = np.abs(a_coef)
        b_coef = np.einsum("ni,nij,nj->n", v_arr, sxx, v_arr)
        with np.errstate(divide="ignore", invalid="ignore"):
            s_opt = np.where(a_coef > 0, q0 / np.maximum(a_coef, 1e-300), 1.0)
        s_opt = np.where(q0 > 0, s_opt, 1.0)
        L_cand = (flip * s_opt)[:, None, None] * np.einsum("na,ni->nai", u_arr, v_arr)
        consider(L_cand, b_coef > 0)

    for u, v_fixed in _direction_pairs(dim_out, dim_in):
        consider_rank_one(
            np.broadcast_to(u, (n, dim_out)), np.broadcast_to(v_fixed, (n, dim_in))
        )
    # the thin covariance direction, paired with each axis and with the
    # per-box optimal output direction C v / |C v|
    for a in range(dim_out):
        u = np.zeros(dim_out)
        u[a] = 1.0
        consider_rank_one(np.broadcast_to(u, (n, dim_out)), v_min)
    cv = np.einsum("nai,ni->na", c, v_min)
    cv_norm = np.linalg.norm(cv, axis=1, keepdims=True)
    safe = cv_norm[:, 0] > 0
    if safe.any():
        u_opt = np.where(cv_norm > 0, cv / np.maximum(cv_norm, 1e-300), 0.0)
        u_opt[~safe, 0] = 1.0
        consider_rank_one(u_opt, v_min)

    finite = np.isfinite(best_sq)
    if finite.any():
        idx = np.where(finite)[0]
        Lp, valp = _polish(
            best_L[idx].copy(), sxx[idx], c[idx], q0[idx], diam2[idx], best_sq[idx]
        )
        best_L[idx] = Lp
        best_sq[idx] = valp

    if samples is not None:
        xc_s, yc_s, wsum_s = centered_samples(*samples)
        w_s = samples[2]

        def direct_value_sq(L):
            obj = direct_residual_sq(L, xc_s, yc_s, w_s, wsum_s)
            sig = operator_norms(L)
            denom = sig * sig * diam2
            return np.where(denom > 0, obj / np.maximum(denom, 1e-300), np.inf)

        big_omega = np.sqrt(
            direct_residual_sq(l_star, xc_s, yc_s, w_s, wsum_s)
        ) / diams
        # inside the moment floor the argmin over candidates was noise;
        # the lsq direction and its ray optimum rejoin the pool here so
        # an exactly affine box lands on its own linear part
        best_sq = np.where(finite, direct_value_sq(best_L), np.inf)
        for L_cand, valid in (
            (l_star, sigma_star > 0),
            (t_star[:, None, None] * l_star, has_lsq & (t_star > 0)),
        ):
            val = np.where(valid, direct_value_sq(L_cand), np.inf)
            gain = val < best_sq
            if gain.any():
                best_sq = np.where(gain, val, best_sq)
                best_L[gain] = L_cand[gain]
        finite = np.isfinite(best_sq)

    # attained means a finite map strictly beats the ray limit
    attained = finite & (best_sq < limit_sq * (1.0 - 1e-9) - 1e-300)
    omega_sq = np.where(attained, best_sq, np.minimum(limit_sq, np.where(finite, best_sq, np.inf)))
    omega = np.sqrt(np.maximum(omega_sq, 0.0))

    return {
        "omega": omega,
        "big_omega": big_omega,
        "attained": attained,
        "best_linear": best_L,
        "best_value_sq": best_sq,
        "limit_sq": limit_sq,
        "lsq_linear": l_star,
        "clipped": np.zeros(n, dtype=bool) if clipped is None else clipped,
        "samples_m": samples_m,
    }


# ---------------------------------------------------------------------------
# single-box entry points


def _single_box_moments(map_obj, Q: DyadicCube, m: int, dilation: float):
    corner, side = Q.dilated_bounds(dilation)
    window = getattr(map_obj, "window", None)
    nodes, clipped = fit_nodes(corner, side, m, Q.dim, window)
    images = np.atleast_2d(map_obj.eval_many(nodes))
    w = np.ones((1, nodes.shape[0]))
    xbar, ybar, sxx, c, q0 = weighted_moments(nodes[None], images[None], w)
    diam = math.sqrt(Q.dim) * side * 1.0
    return xbar, ybar, sxx, c, q0, diam, clipped, (nodes[None], images[None], w)


def lsq_fit(map_obj, Q: DyadicCube, m: int, dilation: float = 1.0) -> AffineMap:
    """Least-squares affine fit on the midpoint lattice of (dilation*Q)."""
    assert m >= 1, "need at least the 2^d-point midpoint lattice"
    xbar, ybar, sxx, c, _, _, _, _ = _single_box_moments(map_obj, Q, m, dilation)
    linear = _solve_lsq_linear(sxx, c)[0]
    offset = ybar[0] - linear @ xbar[0]
    return AffineMap(linear, offset)


def big_omega(map_obj, Q: DyadicCube, m: int, dilation: float = 1.0) -> float:
    """Normalized least-squares deviation sqrt(mean |f - A*|^2)/diam."""
    assert m >= 1
    _, _, sxx, c, _, diam, _, samples = _single_box_moments(map_obj, Q, m, dilation)
    l_star = _solve_lsq_linear(sxx, c)
    xc, yc, wsum = centered_samples(*samples)
    resid2 = float(direct_residual_sq(l_star, xc, yc, samples[2], wsum)[0])
    return math.sqrt(resid2) / diam


def small_omega(map_obj, Q: DyadicCube, m: int, dilation: float = 1.0) -> FitResult:
    """Scale-free affine deviation of the map over (dilation*Q).

    Candidate scheme: least-squares direction with a log scale sweep and
    its closed-form optimum, rank-one restarts (axis pairs, a fixed
    random stream, and the covariance's thinnest direction), coordinate
    descent polish, and the closed-form ray limit. ``attained`` reports
    whether a finite map strictly beat the limit.
    """
    assert m >= 1
    xbar, ybar, sxx, c, q0, diam, clipped, samples = _single_box_moments(
        map_obj, Q, m, dilation
    )
    out = batched_ratio_minimization(
        sxx, c, q0, np.array([diam]), m, np.array([clipped]), samples=samples
    )
    omega = float(out["omega"][0])
    attained = bool(out["attained"][0])
    if attained:
        linear = out["best_linear"][0]
        offset = ybar[0] - linear @ xbar[0]
        minimizer: AffineMap | str = AffineMap(linear, offset)
    else:
        minimizer = "limit"
    return FitResult(
        omega=omega,
        big_omega=float(out["big_omega"][0]),
        minimizer=minimizer,
        attained=attained,
        samples_m=m,
        clipped=clipped,
    )


# ---------------------------------------------------------------------------
# diagnostics on given affine maps


def max_pairwise_distance(points: np.ndarray) -> float:
    """Largest Euclidean distance among rows, chunked against memory."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    n = pts.shape[0]
    best = 0.0
    step = max(1, int(2.0e6 // max(n, 1)))
    for start in range(0, n, step):
        blk = pts[start : start + step]
        d2 = ((blk[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
        best = max(best, float(d2.max()))
    return math.sqrt(best)


def fit_quality(map_obj, Q: DyadicCube, A: AffineMap, m: int) -> dict:
    """Deviation ratios of f from a given affine map over Q, plus the
    image-diameter bracket they imply.

    With delta = sampled sup of |f - A|/(|A'| diam Q), the image diameter
    over the side length should land in
    [(1 - 2 sqrt(d) delta), sqrt(d) (1 + 2 sqrt(d) delta)] * |A'|;
    the record carries the realized ratio and a pass flag. When delta is
    so large that the lower endpoint drops to zero the bracket carries
    no information and is reported as failed.
    """
    if A.op_norm <= 0:
        raise ValueError("degenerate affine map: zero linear part")
    corner, side = Q.corner, Q.side
    window = getattr(map_obj, "window", None)
    nodes, _ = fit_nodes(corner, side, m, Q.dim, window)
    nodes = np.concatenate([nodes, box_corners(corner, side, Q.dim)], axis=0)
    images = np.atleast_2d(map_obj.eval_many(nodes))
    dev = np.linalg.norm(images - A.evaluate(nodes), axis=1)
    scale = A.op_norm * Q.diam
    l1_ratio = float(dev.mean()) / scale
    sup_ratio = float(dev.max()) / scale
    diam_image = max_pairwise_distance(images)
    diam_ratio = diam_image / (A.op_norm * Q.side)
    root_d = math.sqrt(Q.dim)
    lower = 1.0 - 2.0 * root_d * sup_ratio
    upper = root_d * (1.0 + 2.0 * root_d * sup_ratio)
    return {
        "l1_ratio": l1_ratio,
        "sup_ratio": sup_ratio,
        "diam_ratio": diam_ratio,
        "diam_lower": lower,
        "diam_upper": upper,
        "bracket_pass": bool(
            lower > 0.0 and lower - 1e-12 <= diam_ratio <= upper + 1e-12
        ),
    }


def affine_separation(A1: AffineMap, A2: AffineMap, R: DyadicCube, m: int) -> dict:
    """Gap between two affine maps: operator-norm distance of linear
    parts, mean pointwise gap over R, and the smallest constant kappa
    with |A1(x) - A2(x)| <= kappa * mean * (dist(x, R) + diam R) on test
    points out to 8 diam R."""
    corner, side = R.corner, R.side
    nodes = midpoint_lattice(corner, side, m, R.dim)
    gap_nodes = np.linalg.norm(A1.evaluate(nodes) - A2.evaluate(nodes), axis=1)
    mean_ratio = float(gap_nodes.mean()) / R.diam
    linear_gap = operator_norm(A1.linear - A2.linear)
    ratio = linear_gap / mean_ratio if mean_ratio > 0 else 0.0

    center = R.center
    dirs = _test_directions(R.dim)
    radii = np.array([0.0, 0.5, 1.0, 2.0, 4.0, 8.0]) * R.diam
    pts = (center[None, None, :] + radii[:, None, None] * dirs[None, :, :]).reshape(
        -1, R.dim
    )
    gap_pts = np.linalg.norm(A1.evaluate(pts) - A2.evaluate(pts), axis=1)
    from .cubes import box_distance  # local import keeps module deps one-way

    reach = box_distance(pts, corner, side) + R.diam
    if mean_ratio > 0:
        kappa = float((gap_pts / (mean_ratio * reach)).max())
    else:
        kappa = 0.0
    return {
        "linear_gap": linear_gap,
        "mean_ratio": mean_ratio,
        "ratio": ratio,
        "pointwise_bound_constant": kappa,
    }


def _test_directions(dim: int) -> np.ndarray:
    """Deterministic unit directions: axis vectors and diagonals."""
    dirs = []
    for i in range(dim):
        e = np.zeros(dim)
        e[i] = 1.0
        dirs.append(e)
        dirs.append(-e)
    for signs in np.ndindex(*(2,) * dim):
        v = np.array([1.0 if s else -1.0 for s in signs])
        dirs.append(v / np.linalg.norm(v))
    return np.array(dirs)
