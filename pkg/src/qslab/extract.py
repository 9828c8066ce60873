"""Bi-Lipschitz subset extraction from a corona decomposition.

Every structural event of a decomposition -- a region top, a minimal
cube, a high-deviation cube -- is collected into one event set over the
tree.  Counting the events weakly above a cube gives a generation count
that is nondecreasing along root-to-leaf paths and grows by at most one
per step.  Cutting at a fixed generation and keeping the floor
witnesses of the surviving regions yields a subset whose measure is
controlled by the cut (a Chebyshev argument on the event masses) and on
which two-point distortion of the map admits a bound exponential in the
cut.  The module builds the event set, performs the cut, and audits the
distortion claim empirically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .carleson import OmegaField, carleson_sum
from .corona import CoronaDecomposition, StoppingRegion
from .cubes import CubeSet, DyadicCube, box_corners, enumerate_cubes, midpoint_lattice
from .maps import empirical_eta, image_diam

# sample-pool cap for distortion pairs; pools are centers plus one
# interior point per chosen cube, so points <= 2 * POOL_LIMIT
POOL_LIMIT = 700
# log-spaced distance strata for pair selection
PAIR_BINS = 12
# refinement of the node lattice on dilated member cubes (2^(d*r) nodes)
NODE_REFINE = 2
# triple budget for the on-demand distortion-envelope estimate
ETA_TRIPLES = 4000
# lattice refinement for image-diameter sampling of the root
IMAGE_DIAM_M = 4
# cubes per vectorized block in the chain check
CHAIN_CHUNK = 2048


@dataclass
class ExtractionResult:
    """Outcome of a generation-cut extraction.

    E is the kept subset as a union of floor-level cells, an outer
    working-resolution stand-in for the exact set where chains never
    stop; N is the generation cut; measure_fraction is |E|/|Q0| on
    exact cube volumes; T_audit maps every tree cube key to its event
    count.  kept_tops lists the tops of the surviving regions in
    seeding order, and details carries the mass accounting behind the
    choice of N.
    """

    E: CubeSet
    N: int
    measure_fraction: float
    T_audit: dict
    theta: float
    root: DyadicCube
    kept_tops: tuple
    details: dict


def _floor_level(decomp: CoronaDecomposition) -> int:
    return decomp.field.root.level + decomp.field.depth


def build_T(decomp: CoronaDecomposition) -> dict:
    """Event set of a decomposition with its generation counts.

    The events are the region tops, the minimal cubes, and the bad
    cubes; a cube carrying several roles enters the set once (the
    shared-role count is reported).  For every tree cube the count
    k(Q) = #{events weakly above Q} is accumulated in one pass down the
    levels, so k increases by 0 or 1 from parent to child.  The total
    event mass is checked against the packing budget
    (1 + 2^(d+2)) C / eps^2 + 8 per unit root volume, with C the
    realized square-sum of deviations; cubes that are bad only because
    no minimizer was attained fall outside that argument and are
    reported separately, mirroring the packing report.
    """
    field = decomp.field
    root = decomp.root
    d = root.dim
    eps = decomp.eps

    events: dict = {}

    def _add(Q: DyadicCube) -> None:
        key = Q.key()
        if key in events:
            events[key] = (events[key][0], events[key][1] + 1)
        else:
            events[key] = (Q, 1)

    for S in decomp.regions:
        _add(S.top)
        for Q in S.minimal:
            _add(Q)
    for Q in decomp.bad:
        _add(Q)

    depth = _floor_level(decomp) - root.level
    k: dict = {}
    mass_by_k: dict[int, float] = {}
    for Q in enumerate_cubes(root, depth):
        key = Q.key()
        base = 0 if Q.level == root.level else k[Q.parent().key()]
        kq = base + (1 if key in events else 0)
        k[key] = kq
        mass_by_k[kq] = mass_by_k.get(kq, 0.0) + Q.volume

    mass = sum(Q.volume for Q, _ in events.values())
    unattained = sum(
        Q.volume for Q in decomp.bad
        if field.omega(Q) < eps and field.affine(Q) is None
    )
    c_m = carleson_sum(field, root)["normalized"]
    bound = ((1.0 + 2.0 ** (d + 2)) * c_m / (eps * eps) + 8.0) * root.volume
    shared = sum(1 for _, mult in events.values() if mult > 1)

    return {
        "cubes": CubeSet([Q for Q, _ in events.values()], frame=root.root),
        "k": k,
        "mass_by_k": mass_by_k,
        "k_max": max(k.values()) if k else 0,
        "mass": mass,
        "unattained_mass": unattained,
        "mass_bound": bound,
        "mass_pass": mass - unattained <= bound * (1.0 + 1e-9),
        "carleson_normalized": c_m,
        "top_count": len(decomp.regions),
        "minimal_count": sum(len(S.minimal) for S in decomp.regions),
        "bad_count": len(decomp.bad),
        "shared_roles": shared,
    }


def extract_E(decomp: CoronaDecomposition, theta: float) -> ExtractionResult:
    """Keep the floor witnesses of regions below a generation cut.

    N is the smallest cut for which the Chebyshev step succeeds (the
    mass of cubes at generation N+1 is below theta |Q0|) and the kept
    fraction, computed exactly on cube volumes, reaches 1 - theta.  The
    second clause closes the gap left by depth truncation: floor-level
    bad cubes are unresolved stopping events whose generations would
    keep growing below the working resolution, so the Chebyshev step
    alone does not account for them.  Raises when no cut within the
    tree depth reaches the fraction, reporting the best one achieved.
    """
    assert 0.0 < theta < 1.0, "theta must lie in (0, 1)"
    audit = build_T(decomp)
    k = audit["k"]
    mass_by_k = audit["mass_by_k"]
    root = decomp.root
    vol0 = root.volume
    depth = _floor_level(decomp) - root.level
    floor_vol = (root.side * 0.5 ** depth) ** root.dim

    top_gen = [(S, k[S.top.key()]) for S in decomp.regions]
    best_fraction = 0.0
    best_cut = 0
    chosen = None
    for n in range(depth + 1):
        kept = [S for S, g in top_gen if g <= n]
        cells = sum(len(S.z_approx) for S in kept)
        fraction = cells * floor_vol / vol0
        if fraction > best_fraction:
            best_fraction, best_cut = fraction, n
        chebyshev = mass_by_k.get(n + 1, 0.0) < theta * vol0
        if chebyshev and fraction + 1e-12 >= 1.0 - theta:
            chosen = n
            break

    if chosen is None:
        raise ValueError(
            f"depth-limited extraction: no generation cut within depth {depth} "
            f"keeps fraction {1.0 - theta:.6g}; best achieved {best_fraction:.6g} "
            f"at cut {best_cut}"
        )

    kept = [S for S, g in top_gen if g <= chosen]
    members: list[DyadicCube] = []
    for S in kept:
        members.extend(S.z_approx)
    E = CubeSet(members, frame=root.root)
    fraction = len(E) * floor_vol / vol0

    floor = _floor_level(decomp)
    floor_bad = sum(Q.volume for Q in decomp.bad if Q.level == floor)
    unresolved = sum(
        Q.volume for Q in decomp.bad
        if Q.level == floor and k[Q.key()] <= chosen
    )
    details = {
        "chebyshev_mass": mass_by_k.get(chosen + 1, 0.0),
        "floor_bad_mass": floor_bad,
        "unresolved_floor_mass": unresolved,
        "kept_regions": len(kept),
        "total_regions": len(decomp.regions),
        "k_max": audit["k_max"],
        "event_mass": audit["mass"],
        "event_mass_pass": audit["mass_pass"],
    }
    return ExtractionResult(
        E=E,
        N=chosen,
        measure_fraction=fraction,
        T_audit=k,
        theta=theta,
        root=root,
        kept_tops=tuple(S.top for S in kept),
        details=details,
    )


def _interior_point(Q: DyadicCube, seed: int) -> np.ndarray:
    """A point in the open cube, a deterministic function of the cube.

    Seeding from the cube key keeps the sample pool stable under
    shrinking E: the pool of a subset is a subset of the pool, so
    exhaustive-pair distortion is monotone under set inclusion.
    """
    ss = np.random.SeedSequence([seed, Q.level, *map(int, Q.coords)])
    u = np.random.default_rng(ss).random(Q.dim)
    return Q.corner + Q.side * (0.1 + 0.8 * u)


def distortion_report(map_obj, result: ExtractionResult,
                      n_pairs: int = 400, seed: int = 0) -> dict:
    """Empirical two-point distortion of the map on the kept subset.

    Pairs are drawn from cube centers and per-cube interior points,
    stratified across log-spaced distance bins so no single scale
    dominates; selection is a deterministic function of (E, n_pairs,
    seed).  Ratios are normalized by the global scale
    diam f(Q0) / diam Q0, and the reported constant is
    L = max(L_upper, 1/L_lower), the worst two-sided violation.
    """
    assert n_pairs >= 100, "pair budget below the minimum of 100"
    if len(result.E) == 0:
        raise ValueError("extracted set is empty: no pairs to sample")

    cubes = list(result.E)
    d = result.root.dim
    rng = np.random.default_rng(seed)
    take = min(len(cubes), POOL_LIMIT)
    idx = np.unique(np.linspace(0, len(cubes) - 1, take).astype(int))
    chosen_cubes = [cubes[i] for i in idx]
    centers = np.array([Q.center for Q in chosen_cubes])
    interior = np.array([_interior_point(Q, seed) for Q in chosen_cubes])
    pts = np.vstack([centers, interior])

    iu, ju = np.triu_indices(len(pts), k=1)
    dist = np.linalg.norm(pts[iu] - pts[ju], axis=1)
    alive = dist > 1e-12 * result.root.side
    iu, ju, dist = iu[alive], ju[alive], dist[alive]
    if len(dist) == 0:
        raise ValueError("fewer than two distinct sample points in the subset")

    edges = np.geomspace(dist.min() * (1.0 - 1e-9),
                         dist.max() * (1.0 + 1e-9), PAIR_BINS + 1)
    strata = np.digitize(dist, edges)
    buckets: dict[int, list[int]] = {}
    for t in rng.permutation(len(dist)):
        buckets.setdefault(int(strata[t]), []).append(int(t))
    quota = min(n_pairs, len(dist))
    selected: list[int] = []
    keys = sorted(buckets)
    while len(selected) < quota:
        progressed = False
        for b in keys:
            if buckets[b]:
                selected.append(buckets[b].pop())
                progressed = True
                if len(selected) >= quota:
                    break
        if not progressed:
            break
    sel = np.array(selected)

    images = map_obj.eval_many(pts)
    img_dist = np.linalg.norm(images[iu[sel]] - images[ju[sel]], axis=1)
    scale = image_diam(map_obj, result.root, IMAGE_DIAM_M) / result.root.diam
    assert scale > 0, "degenerate image: zero sampled diameter"
    ratios = img_dist / (scale * dist[sel])
    l_upper = float(ratios.max())
    l_lower = float(ratios.min())
    big_l = max(l_upper, 1.0 / l_lower) if l_lower > 0 else float("inf")

    return {
        "scale": float(scale),
        "L": big_l,
        "L_upper": l_upper,
        "L_lower": l_lower,
        "n_pairs": int(len(sel)),
        "pool_points": int(len(pts)),
        "strata_nonempty": len(keys),
        "distance_min": float(dist[sel].min()),
        "distance_max": float(dist[sel].max()),
    }


def eta_at(map_obj, Q: DyadicCube, t: float = 2.0,
           n_triples: int = ETA_TRIPLES) -> float:
    """Empirical distortion envelope evaluated at ratio t."""
    table = empirical_eta(map_obj, Q, n_triples)
    return float(np.interp(t, table[:, 0], table[:, 1]))


def _group_diameters(map_obj, group: list[DyadicCube], dilation: float,
                     unit_nodes: np.ndarray, own_nodes: np.ndarray,
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Sampled domain and image diameters of the dilated cubes.

    Nodes outside the map's window are folded onto a surviving node of
    the same cube, so they drop out of both maxima; nodes inside the
    cube itself guarantee at least 2^d survivors everywhere.
    """
    d = group[0].dim
    side = group[0].side
    cent = np.array([Q.center for Q in group])
    dside = dilation * side
    nodes = np.concatenate([
        (cent - 0.5 * dside)[:, None, :] + dside * unit_nodes[None],
        (cent - 0.5 * side)[:, None, :] + side * own_nodes[None],
    ], axis=1)
    n, kn, _ = nodes.shape
    flat = nodes.reshape(-1, d)
    if map_obj.window is not None:
        wc, ws = map_obj.window
        tol = 1e-9 * ws
        ok = np.all((flat >= wc - tol) & (flat <= wc + ws + tol), axis=1)
    else:
        ok = np.ones(len(flat), dtype=bool)
    okm = ok.reshape(n, kn)
    assert okm.any(axis=1).all(), "a dilated cube lost every sample node"
    first = np.argmax(okm, axis=1)
    anchor = nodes[np.arange(n), first]
    flat = flat.copy()
    flat[~ok] = np.repeat(anchor, kn, axis=0)[~ok]

    images = map_obj.eval_many(flat).reshape(n, kn, -1)
    domains = flat.reshape(n, kn, d)

    def _max_pairwise(a: np.ndarray) -> np.ndarray:
        diff = a[:, :, None, :] - a[:, None, :, :]
        return np.sqrt((diff * diff).sum(axis=-1)).max(axis=(1, 2))

    return _max_pairwise(domains), _max_pairwise(images)


def scale_chain_check(decomp: CoronaDecomposition, result: ExtractionResult,
                      map_obj, delta: float | None = None,
                      eta2: float | None = None) -> dict:
    """Two-sided sampled diameter-ratio bound over the kept regions.

    For every member cube of every kept region, the ratio of sampled
    image diameter to sampled domain diameter over the dilated cube,
    normalized by the global scale, must lie within beta^(N+1) of one
    on both sides, where beta = max{2, eta(2),
    sqrt(d)(1 + 2 sqrt(d) delta) / ((1 - 2 sqrt(d) delta)(1 - tau))}.
    delta defaults to the decomposition's deviation budget and eta(2)
    to the on-demand empirical envelope.  Margins are reported per
    region; a margin is the factor by which the bound holds (>= 1
    passes).
    """
    root = decomp.root
    field = decomp.field
    d = root.dim
    tau = decomp.tau
    assert result.root.key() == root.key(), "result from a different root"
    if delta is None:
        delta = decomp.eps
    g = 2.0 * np.sqrt(d) * delta
    if g >= 1.0:
        raise ValueError(
            f"chain bound needs 2 sqrt(d) delta < 1, got {g:.3g}; pass a "
            "smaller delta"
        )
    if eta2 is None:
        eta2 = eta_at(map_obj, root, 2.0)
    beta = max(2.0, eta2,
               np.sqrt(d) * (1.0 + g) / ((1.0 - g) * (1.0 - tau)))
    bound = beta ** (result.N + 1)
    scale = image_diam(map_obj, root, IMAGE_DIAM_M) / root.diam
    assert scale > 0, "degenerate image: zero sampled diameter"

    unit_nodes = np.concatenate([
        midpoint_lattice(np.zeros(d), 1.0, NODE_REFINE, d),
        box_corners(np.zeros(d), 1.0, d),
    ], axis=0)
    own_nodes = midpoint_lattice(np.zeros(d), 1.0, 1, d)

    kept = [S for S in decomp.regions
            if result.T_audit[S.top.key()] <= result.N]
    rows = []
    worst = float("inf")
    for S in kept:
        by_level: dict[int, list[DyadicCube]] = {}
        for Q in S.members:
            by_level.setdefault(Q.level, []).append(Q)
        r_min, r_max = float("inf"), 0.0
        for level in sorted(by_level):
            group = by_level[level]
            for start in range(0, len(group), CHAIN_CHUNK):
                dom, img = _group_diameters(
                    map_obj, group[start:start + CHAIN_CHUNK],
                    field.dilation, unit_nodes, own_nodes,
                )
                assert (dom > 0).all(), "sample node set collapsed"
                ratio = img / (dom * scale)
                r_min = min(r_min, float(ratio.min()))
                r_max = max(r_max, float(ratio.max()))
        margin_low = r_min * bound
        margin_high = bound / r_max if r_max > 0 else float("inf")
        worst = min(worst, margin_low, margin_high)
        rows.append({
            "top": S.top.token,
            "members": len(S.members),
            "ratio_min": r_min,
            "ratio_max": r_max,
            "margin_low": margin_low,
            "margin_high": margin_high,
            "pass": margin_low >= 1.0 and margin_high >= 1.0,
        })

    return {
        "beta": float(beta),
        "eta2": float(eta2),
        "delta": float(delta),
        "tau": float(tau),
        "N": result.N,
        "bound": float(bound),
        "scale": float(scale),
        "kept_regions": len(kept),
        "regions": rows,
        "worst_margin": worst if rows else float("inf"),
        "pass": all(r["pass"] for r in rows),
    }
