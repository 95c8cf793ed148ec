import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tsp3d import autodiff as ad
from tsp3d.errors import EmptyGrid, InvalidInput
from tsp3d.head import Box3D
from tsp3d.params import ParamStore
from tsp3d.sparse import SparseGrid, VoxelMask
from tsp3d.text import TokenSet
from tsp3d.tgp import (
    binarize_and_prune,
    build_scene_supervision,
    build_target_supervision,
    init_tgp,
    predict_prune_probs,
    tgp_block,
)

VS = 0.16


def dense_grid(n=9, channels=4, seed=0):
    coords = np.array([(x, y, z) for x in range(n) for y in range(n) for z in range(n)])
    feats = np.random.default_rng(seed).normal(size=(len(coords), channels))
    return SparseGrid(coords, feats, 2, VS)


def random_grid(seed, n=60, channels=4, span=8):
    r = np.random.default_rng(seed)
    coords = np.unique(r.integers(0, span, size=(n, 3)), axis=0)
    return SparseGrid(coords, r.normal(size=(len(coords), channels)), 2, VS)


def tokens(w=3, d=8, seed=1):
    return TokenSet(np.random.default_rng(seed).normal(size=(w, d)))


def tgp_params(simplified=True, sigma=0.5, seed=0):
    return init_tgp(ParamStore(seed), "tgp", 4, 8, 8, 2, sigma, "scene", simplified=simplified)


def brute_cube(coords, centers, cube):
    half = cube // 2
    out = []
    for c in coords:
        out.append(float(any(np.all(np.abs(c - np.floor(np.asarray(x) / VS)) <= half) for x in centers)))
    return out


def test_small_grid_fps_is_identity():
    g = random_grid(0)
    p = tgp_params()
    a = predict_prune_probs(g, tokens(), p, use_fps=False)
    b = predict_prune_probs(g, tokens(), p, use_fps=True, fps_k=512)
    np.testing.assert_array_equal(a.values, b.values)


def test_fps_probs_cover_every_voxel():
    g = dense_grid(6)
    probs = predict_prune_probs(g, tokens(), tgp_params(), use_fps=True, fps_k=20)
    assert len(probs) == len(g)
    assert np.all((probs.values > 0) & (probs.values < 1))


def test_constant_features_constant_probability():
    g = SparseGrid(np.array([[0, 0, 0], [3, 1, 0], [5, 5, 5]]), np.ones((3, 4)), 2, VS)
    probs = predict_prune_probs(g, tokens(), tgp_params()).values
    assert np.all(probs == probs[0])


def test_hand_mlp_probabilities():
    p = tgp_params()
    p.cross_attn.o.data[:] = 0  # attention leaves features unchanged
    (w0, b0), (w1, b1) = p.mlp.layers
    w0.data[:] = 0
    w0.data[0, 0] = 1.0
    w0.data[1, 1] = -1.0
    b0.data[:] = 0
    w1.data[:] = 0
    w1.data[0, 0], w1.data[1, 0] = 2.0, 0.5
    b1.data[:] = -0.25
    feats = np.array([[0.0, 0, 0, 0], [1.0, 0, 0, 0], [0.0, -2, 0, 0], [0.5, 0.5, 0, 0], [-1.0, -1, 0, 0]])
    g = SparseGrid(np.arange(5)[:, None] * np.array([[1, 0, 0]]), feats, 2, VS)
    hidden = np.maximum(feats[:, 0], 0) * 2.0 + np.maximum(-feats[:, 1], 0) * 0.5 - 0.25
    np.testing.assert_allclose(predict_prune_probs(g, tokens(), p).values, 1 / (1 + np.exp(-hidden)))


def test_binarize_examples():
    g = SparseGrid(np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]]), np.zeros((3, 1)), 3, 0.32)
    kept, trace = binarize_and_prune(g, np.array([0.8, 0.6, 0.2]), 0.7, k_min=1)
    assert kept.coords.tolist() == [[0, 0, 0]] and not trace.fallback_used
    kept, trace = binarize_and_prune(g, np.array([0.8, 0.6, 0.2]), 0.0, k_min=1)
    assert len(kept) == 3 and trace.kept_ratio == 1.0
    kept, trace = binarize_and_prune(g, np.array([0.1, 0.6, 0.2]), 0.7, k_min=2)
    assert kept.coords.tolist() == [[1, 0, 0], [2, 0, 0]] and trace.fallback_used
    kept, _ = binarize_and_prune(g, np.array([0.7, 0.2, 0.2]), 0.7, k_min=1)
    assert len(kept) == 1  # boundary is kept
    assert trace.csv_row() == "3,3,2,0.666667,1"


@given(st.integers(0, 10**6), st.floats(0, 1), st.floats(0, 1))
def test_threshold_monotonicity(seed, s1, s2):
    lo, hi = sorted((s1, s2))
    g = random_grid(seed)
    probs = np.random.default_rng(seed).random(len(g))
    keep_lo, _ = binarize_and_prune(g, probs, lo, k_min=0)
    keep_hi, _ = binarize_and_prune(g, probs, hi, k_min=0)
    assert keep_hi.coord_set() <= keep_lo.coord_set() <= g.coord_set()


def test_scene_supervision_full_cube():
    g = dense_grid(9)
    box = Box3D(((4.5) * VS, 4.5 * VS, 4.5 * VS), (0.1, 0.1, 0.1))
    assert build_scene_supervision([box], g, 7).values.sum() == 343
    assert build_scene_supervision([], g, 7).values.sum() == 0
    with pytest.raises(InvalidInput):
        build_scene_supervision([box], g, 6)


@pytest.mark.parametrize("seed", range(100))
def test_supervision_matches_brute_force(seed):
    r = np.random.default_rng(seed)
    g = random_grid(seed, n=120, span=10)
    centers = r.random((int(r.integers(1, 4)), 3)) * 10 * VS
    boxes = [Box3D(c, (0.2, 0.2, 0.2)) for c in centers]
    cube = int(r.choice([1, 3, 5, 7]))
    assert build_scene_supervision(boxes, g, cube).values.tolist() == brute_cube(g.coords, centers, cube)
    target = build_target_supervision(boxes[0], boxes[1:], g, cube)
    np.testing.assert_array_equal(target.values, build_scene_supervision(boxes, g, cube).values)


def test_target_supervision_union_and_single():
    g = dense_grid(9)
    t = Box3D((2.5 * VS, 4.5 * VS, 4.5 * VS), (0.1, 0.1, 0.1))
    rel = Box3D((4.5 * VS, 4.5 * VS, 4.5 * VS), (0.1, 0.1, 0.1))
    only = build_target_supervision(t, [], g, 3).values
    assert only.sum() == 27
    both = build_target_supervision(t, [rel], g, 3).values
    # x ranges 1..3 and 3..5 overlap on one slab of 9 voxels
    assert both.sum() == 27 + 27 - 9


@pytest.mark.parametrize("simplified", [True, False])
def test_tgp_block_sigma_zero_keeps_coords(simplified):
    g = dense_grid(6)
    res = tgp_block(g, tokens(), tgp_params(simplified, sigma=0.0), simplified=simplified, fps_k=50)
    pruned, toks, probs, trace = res
    np.testing.assert_array_equal(pruned.coords, g.coords)
    assert isinstance(probs, VoxelMask) and len(probs) == len(g) and toks.w == 3
    assert trace.voxels_after == trace.voxels_before == len(g)
    assert not np.array_equal(pruned.values, g.values)  # attention still enriches


@pytest.mark.parametrize("simplified", [True, False])
def test_kept_ratio_decreases_with_sigma(simplified):
    g = dense_grid(6)
    ratios = []
    for sigma in np.linspace(0, 1, 11):
        p = tgp_params(simplified, sigma=float(sigma))
        ratios.append(tgp_block(g, tokens(), p, simplified=simplified, k_min=0, fps_k=50).trace.kept_ratio)
    assert all(a >= b for a, b in zip(ratios, ratios[1:]))
    assert ratios[0] == 1.0


def test_variants_share_output_contract():
    g = dense_grid(5)
    a = tgp_block(g, tokens(), tgp_params(True), simplified=True)
    b = tgp_block(g, tokens(), tgp_params(False), simplified=False)
    for res in (a, b):
        assert res.grid.coord_set() <= g.coord_set()
        assert res.grid.channels == g.channels and res.grid.level == g.level


def test_empty_grid_rejected():
    with pytest.raises(EmptyGrid):
        predict_prune_probs(SparseGrid.empty(4, 2, VS), tokens(), tgp_params())


def test_pruned_branch_is_a_gradient_barrier():
    store = ParamStore(0)
    p = init_tgp(store, "tgp", 4, 8, 8, 2, 0.5, "scene")
    g = dense_grid(4)
    res = tgp_block(g, tokens(), p, simplified=True, k_min=0)
    # a loss on the survivors alone sends nothing into the scoring MLP
    ad.backward(ad.tsum(res.grid.feats), store)
    assert not any(store[n].grad.any() for n in store if ".mlp." in n)
    assert any(store[n].grad.any() for n in store if ".cross_attn." in n)
