"""Whitney covers, the partition of unity, the blended extension, and
the complement packing sums."""

from __future__ import annotations

import math

import numpy as np
import pytest

from qslab.affine import AffineMap
from qslab.carleson import compute_omega_field
from qslab.corona import decompose
from qslab.cubes import CubeSet, enumerate_cubes, parse_token, root_cube, unit_root
from qslab.extension import (
    ANCHOR_CAP,
    ExtensionEvaluator,
    _bump_and_grad,
    eval_extension,
    extension_diagnostics,
    kappa_bound,
    lambda_sum,
    partition_of_unity,
    region_leaf_set,
    whitney_audit,
    whitney_decompose,
    whitney_window,
)
from qslab.maps import affine_test_map, oscillation_branch_map


@pytest.fixture(scope="module")
def osc_setup():
    """Oscillation map region with its Whitney cover and evaluator."""
    root1 = unit_root(1)
    fmap = oscillation_branch_map(
        parse_token("2:1@0", root1), amplitude=0.25, frequency=3
    )
    root = root_cube(root1)
    field = compute_omega_field(fmap, root, J=4, M=3.0, m=4)
    dec = decompose(field, eps=0.02, tau=0.3)
    S = dec.regions[0]
    w = whitney_decompose(S, whitney_window(S), finest_level=9)
    ext = ExtensionEvaluator(S, field, w, fmap, eps=0.02, tau=0.3)
    return fmap, field, S, w, ext


@pytest.fixture(scope="module")
def affine_d1_setup():
    A = AffineMap(np.array([[2.0]]), np.array([0.3]))
    fmap = affine_test_map(A)
    root = root_cube(unit_root(1))
    field = compute_omega_field(fmap, root, J=3, M=3.0, m=4)
    dec = decompose(field, eps=0.05, tau=0.3)
    S = dec.regions[0]
    w = whitney_decompose(S, whitney_window(S), finest_level=6)
    ext = ExtensionEvaluator(S, field, w, fmap, eps=0.05, tau=0.3)
    return A, fmap, field, S, w, ext


@pytest.fixture(scope="module")
def affine_d2_setup():
    A = AffineMap(np.array([[2.0, 0.5], [-0.3, 1.0]]), np.array([0.1, -0.2]))
    fmap = affine_test_map(A)
    root = root_cube(unit_root(2))
    field = compute_omega_field(fmap, root, J=3, M=3.0, m=3)
    dec = decompose(field, eps=0.05, tau=0.3)
    S = dec.regions[0]
    w = whitney_decompose(S, whitney_window(S), finest_level=5)
    ext = ExtensionEvaluator(S, field, w, fmap, eps=0.05, tau=0.3)
    return A, fmap, field, S, w, ext


# ---------------------------------------------------------------------------
# whitney covers


def test_ladder_whitney_structure():
    # complement of the left half interval: the sweep geometry is fully
    # computable by hand.  At level l the box with offset j from the
    # boundary has distance j * 2^-l and side 2^-l, so it is emitted
    # exactly when j >= 20 and the parent offset floor(j/2) < 20.
    root1 = unit_root(1)
    Q0 = root_cube(root1)
    K = CubeSet([parse_token("1:0@0", root1)])
    w = whitney_decompose(K, Q0, finest_level=9)

    assert len(w) == 92
    assert int(w.underflow.sum()) == 20
    by_level: dict[int, list[int]] = {}
    for c in w.cubes:
        by_level.setdefault(c.level, []).append(c.coords[0])
    assert sorted(by_level) == [6, 7, 8, 9]
    assert sorted(by_level[6]) == [32 + j for j in range(20, 32)]
    assert sorted(by_level[7]) == [64 + j for j in range(20, 40)]
    assert sorted(by_level[8]) == [128 + j for j in range(20, 40)]
    assert sorted(by_level[9]) == [256 + j for j in range(0, 40)]
    # underflow pieces are exactly the offsets below the size test
    uf_coords = sorted(
        c.coords[0] for c, f in zip(w.cubes, w.underflow) if f
    )
    assert uf_coords == [256 + j for j in range(0, 20)]

    aud = whitney_audit(w, n_points=3000, seed=11)
    assert aud["tiling_pass"]
    assert aud["bracket_pass"]
    assert aud["neighbor_pass"] and aud["neighbor_exhaustive"]


def test_whitney_audit_oscillation(osc_setup):
    _, _, S, w, _ = osc_setup
    aud = whitney_audit(w, n_points=4000, seed=3)
    assert aud["bracket_pass"]
    assert 20.0 - 1e-9 <= aud["bracket_min"]
    assert aud["bracket_max"] <= 60.0
    assert aud["kappa"] <= kappa_bound(1)
    assert aud["kappa_pass"] and aud["tiling_pass"] and aud["neighbor_pass"]
    assert aud["neighbor_exhaustive"]  # 215 pieces, pairwise check ran


def test_whitney_determinism(osc_setup):
    _, _, S, w, _ = osc_setup
    w2 = whitney_decompose(S, whitney_window(S), finest_level=9)
    assert [c.token for c in w2.cubes] == [c.token for c in w.cubes]
    assert np.array_equal(w2.d_values, w.d_values)
    assert np.array_equal(w2.underflow, w.underflow)
    assert [a.token for a in w2.anchors] == [a.token for a in w.anchors]


def test_witness_and_anchor_contracts(osc_setup):
    _, _, S, w, _ = osc_setup
    leaves = region_leaf_set(S)
    for j in range(len(w)):
        piece = w.piece(j)
        witness, anchor = piece["witness"], piece["anchor"]
        assert witness in leaves
        assert anchor in S.members
        assert anchor.is_ancestor_of(witness)
        if not piece["underflow"]:
            # the cap binds except for the underflow fallback
            assert anchor.diam <= ANCHOR_CAP * piece["d_value"] + 1e-12
    # witnesses realize the adapted distance at regular piece centers
    centers = np.array([w.piece(j)["cube"].center for j in range(len(w))])
    reach = w.adapted_set.reach(centers)
    for j in range(len(w)):
        wit = w.piece(j)["witness"]
        gap = max(
            float(wit.corner[0]) - centers[j, 0],
            centers[j, 0] - (float(wit.corner[0]) + wit.side),
            0.0,
        )
        assert gap + wit.diam == pytest.approx(reach[j], abs=1e-12)


def test_whitney_rejects_bad_inputs():
    root1 = unit_root(1)
    Q0 = root_cube(root1)
    empty = CubeSet([], frame=root1)
    with pytest.raises(ValueError, match="nonempty provider"):
        whitney_decompose(empty, Q0, finest_level=4)
    K = CubeSet([parse_token("1:0@0", root1)])
    with pytest.raises(AssertionError, match="finest level"):
        whitney_decompose(K, Q0, finest_level=-1)


# ---------------------------------------------------------------------------
# partition of unity


def test_partition_sums_to_one(osc_setup):
    _, _, _, w, _ = osc_setup
    rng = np.random.default_rng(5)
    win = w.window
    pts = np.asarray(win.corner) + win.side * rng.random((300, 1))
    for x in pts:
        pou = partition_of_unity(w, x)
        assert sum(v for _, v in pou) == pytest.approx(1.0, abs=1e-9)
        assert all(v > 0.0 for _, v in pou)


def test_partition_gradients_cancel(osc_setup):
    _, _, _, w, _ = osc_setup
    rng = np.random.default_rng(6)
    win = w.window
    pts = np.asarray(win.corner) + win.side * rng.random((400, 1))
    pi, pj = w.support_pairs(pts)
    b, gb = _bump_and_grad(pts[pi], w.corners[pj], w.sides[pj], want_grad=True)
    n = pts.shape[0]
    B = np.zeros(n)
    np.add.at(B, pi, b)
    GB = np.zeros((n, 1))
    np.add.at(GB, pi, gb)
    assert np.all(B >= 1.0 - 1e-12)  # bumps are 1 on their own piece
    # sum of grad(phi_j) over j vanishes identically
    total = np.zeros((n, 1))
    np.add.at(total, pi, (gb * B[pi, None] - b[:, None] * GB[pi]) / B[pi, None] ** 2)
    # gradient scale is 1/side of the finest piece
    scale = 1.0 / w.sides.min()
    assert np.abs(total).max() <= 1e-9 * scale


def test_partition_core_identity(osc_setup):
    # each bump is flat at 1 on its piece and neighbor supports stop a
    # sixteenth of their side outside their own box, so on the middle
    # half of a piece its weight is exactly 1
    _, _, _, w, _ = osc_setup
    rng = np.random.default_rng(7)
    idx = rng.choice(len(w), size=60, replace=False)
    worst = 0.0
    for j in idx:
        center = w.corners[j] + 0.5 * w.sides[j]
        for frac in (-0.24, 0.0, 0.24):
            x = center + frac * w.sides[j]
            weights = dict(partition_of_unity(w, x))
            worst = max(worst, abs(weights.get(int(j), 0.0) - 1.0))
    assert worst <= 1e-12


def test_partition_outside_window_raises(osc_setup):
    _, _, _, w, _ = osc_setup
    far = np.asarray(w.window.corner) - 10.0 * w.window.side
    with pytest.raises(AssertionError, match="escapes every bump support"):
        partition_of_unity(w, far)


# ---------------------------------------------------------------------------
# the extension evaluator


def test_affine_extension_reproduces_the_map(affine_d1_setup):
    A, fmap, field, S, w, ext = affine_d1_setup
    pts = np.array([[0.3], [0.9], [-0.7], [1.8], [3.5], [-2.5]])
    vals, tags = ext.evaluate(pts)
    assert np.abs(vals - A.evaluate(pts)).max() <= 1e-12
    assert tags[0] == 0 and tags[1] == 0  # floor cells reproduce the map
    assert tags[2] == 1 and tags[3] == 1  # window blend
    assert tags[4] == 2 and tags[5] == 2  # far field
    assert np.abs(eval_extension(ext, [0.55]) - A([0.55])).max() <= 1e-12


def test_affine_extension_d2(affine_d2_setup):
    A, fmap, field, S, w, ext = affine_d2_setup
    rng = np.random.default_rng(8)
    win = w.window
    pts = np.asarray(win.corner) + win.side * rng.random((200, 2))
    vals, _ = ext.evaluate(pts)
    scale = max(1.0, float(np.abs(A.evaluate(pts)).max()))
    assert np.abs(vals - A.evaluate(pts)).max() <= 1e-10 * scale
    aud = whitney_audit(w, n_points=2000, seed=9)
    assert aud["bracket_pass"] and aud["tiling_pass"] and aud["neighbor_pass"]
    assert aud["kappa"] <= kappa_bound(2)


def test_affine_diagnostics_vanish(affine_d1_setup):
    _, _, _, _, _, ext = affine_d1_setup
    diag = extension_diagnostics(ext, grid_m=32, tree_depth=3, samples_m=2)
    assert diag["grad_deviation_energy"] <= 1e-18
    assert diag["omega_sums"]["total"] <= 1e-12
    assert diag["far_field_pass"] and diag["seam_pass"]
    assert diag["coarse_vanishing_pass"]


def test_extension_branch_routing(osc_setup):
    fmap, field, S, w, ext = osc_setup
    # floor cells reproduce the raw map exactly
    z_pts = np.array([q.center for q in S.z_approx])
    vals, tags = ext.evaluate(z_pts)
    assert set(tags.tolist()) == {0}
    assert np.abs(vals - fmap.eval_many(z_pts)).max() == 0.0
    # far points evaluate the top map
    far_x = np.array([[S.top.center[0] + 0.5 * S.top.side + 2.3 * S.top.diam]])
    vals_far, tags_far = ext.evaluate(far_x)
    assert tags_far[0] == 2
    assert np.abs(vals_far - S.top_affine().evaluate(far_x)).max() == 0.0
    # the ring between the window edge and the far cut is out of domain
    dead = np.array([[S.top.center[0] + 0.5 * S.top.side + 1.5 * S.top.side]])
    with pytest.raises(ValueError, match="leaves the extension domain"):
        ext.evaluate(dead)
    # derivatives are not defined on the floor branch
    with pytest.raises(AssertionError, match="floor cell"):
        ext.derivative(z_pts[:1])


def test_derivative_matches_finite_differences(osc_setup):
    _, _, _, w, ext = osc_setup
    rng = np.random.default_rng(10)
    win = w.window
    cand = np.asarray(win.corner) + win.side * rng.random((400, 1))
    tags = ext.classify(cand)
    pts = cand[tags == 1][:40]
    h = 1e-6 * win.side
    analytic = ext.derivative(pts)
    fd = ext.fd_derivative(pts, h)
    scale = max(1.0, ext.top_affine.op_norm)
    assert np.abs(analytic - fd).max() <= 1e-5 * scale


def test_oscillation_diagnostics(osc_setup):
    _, _, _, _, ext = osc_setup
    diag = extension_diagnostics(ext, grid_m=64, tree_depth=4, samples_m=2)
    assert diag["far_field_pass"] and diag["seam_pass"]
    assert diag["coarse_vanishing_pass"]
    sums = diag["omega_sums"]
    assert sums["total"] == pytest.approx(
        sums["fine"] + sums["transition"] + sums["coarse"], rel=1e-12
    )
    assert sums["total"] >= 0.0
    assert diag["grad_deviation_energy"] >= 0.0
    # deviation sums stay far below the stopping budget for this region
    assert diag["omega_ratio"] < 1.0


# ---------------------------------------------------------------------------
# complement packing sums


def test_lambda_ladder_oracle():
    # closed form for the left-half ladder at alpha = 1: pieces at level
    # l contribute side^2 * (2^(l+1) - 1) through their ancestor chains
    root1 = unit_root(1)
    Q0 = root_cube(root1)
    K = CubeSet([parse_token("1:0@0", root1)])
    out = lambda_sum(K, Q0, alpha=1.0, finest_level=9)
    expected = (
        12 * 2.0 ** -12 * (2.0 ** 7 - 1)
        + 20 * 2.0 ** -14 * (2.0 ** 8 - 1)
        + 20 * 2.0 ** -16 * (2.0 ** 9 - 1)
        + 40 * 2.0 ** -18 * (2.0 ** 10 - 1)
    )
    assert out["total"] == pytest.approx(expected, rel=1e-12)
    assert out["piece_count"] == 92
    assert out["underflow_count"] == 20
    assert out["total"] <= out["total_bound"]
    assert out["total_bound"] == pytest.approx(1.0)
    # root value: sum of squared piece sides
    root_val = out["field"][Q0.key()]
    assert root_val == pytest.approx((12 * 64 + 20 * 16 + 20 * 4 + 40) / 2.0 ** 18)


def test_lambda_full_cover_returns_zero():
    root1 = unit_root(1)
    Q0 = root_cube(root1)
    K = CubeSet([parse_token("1:0@0", root1), parse_token("1:1@0", root1)])
    out = lambda_sum(K, Q0, alpha=1.0)
    assert out["total"] == 0.0 and out["field"] == {}


def test_lambda_rejects_empty_set():
    root1 = unit_root(1)
    Q0 = root_cube(root1)
    with pytest.raises(ValueError, match="unbounded"):
        lambda_sum(CubeSet([], frame=root1), Q0, alpha=1.0)
    K = CubeSet([parse_token("3:0@0", root1)])
    with pytest.raises(AssertionError, match="resolution"):
        lambda_sum(K, Q0, alpha=1.0, finest_level=2)
    with pytest.raises(AssertionError, match="positive"):
        lambda_sum(K, Q0, alpha=0.0)


def test_lambda_random_compact_sets():
    # the two packing inequalities are asserted inside lambda_sum; this
    # drives them across random sets, alphas, and both dimensions
    rng = np.random.default_rng(12)
    for dim in (1, 2):
        root1 = unit_root(dim)
        Q0 = root_cube(root1)
        pool = enumerate_cubes(Q0, 3)[1:]  # skip the root itself
        for alpha in (0.5, 1.0, 2.0):
            for _ in range(3):
                k = rng.integers(1, 6)
                picks = rng.choice(len(pool), size=k, replace=False)
                K = CubeSet([pool[i] for i in picks])
                out = lambda_sum(K, Q0, alpha=float(alpha), finest_level=7)
                assert out["total"] <= out["total_bound"] + 1e-12
                assert out["complement_volume"] >= 0.0
                # spot check one per-cube inequality independently
                if out["field"]:
                    key = next(iter(sorted(out["field"])))
                    level, coords = key
                    q_side = root1.base_side / (1 << level)
                    q_corner = np.asarray(root1.corner) + q_side * np.asarray(coords)
                    inter = 0.0
                    for m in K.maximal_members():
                        lo = np.maximum(m.corner, q_corner)
                        hi = np.minimum(m.corner + m.side, q_corner + q_side)
                        ext_len = np.clip(hi - lo, 0.0, None)
                        inter += float(ext_len.prod())
                    frac = (q_side ** dim - inter) / q_side ** dim
                    assert out["field"][key] <= frac + 1e-12
