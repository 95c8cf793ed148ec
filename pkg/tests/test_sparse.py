import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tsp3d import autodiff as ad
from tsp3d.errors import EmptyScene, InvalidInput, InvalidK, LevelError, LevelUnderflow, ShapeError
from tsp3d.sparse import (
    OFFSETS_3,
    SparseGrid,
    VoxelMask,
    coarsen,
    coord_align_mask,
    farthest_point_sample,
    generative_upsample,
    interpolate_features,
    interpolation_matrix,
    level_voxel_size,
    prune,
    residual_block,
    sparse_conv,
    voxelize,
)

coord_lists = st.lists(st.tuples(*[st.integers(-6, 6)] * 3), min_size=1, max_size=40, unique=True)


def grid_of(coords, feats=None, level=1, channels=2, seed=0):
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    if feats is None:
        feats = np.random.default_rng(seed).normal(size=(len(coords), channels))
    return SparseGrid.build(coords, feats, level, level_voxel_size(level))


# -- voxelize --------------------------------------------------------------

def test_voxelize_single_point():
    g = voxelize(np.array([[0.004, 0.004, 0.004, 1, 0, 0]]), 0.01)
    assert g.coords.tolist() == [[0, 0, 0]]
    np.testing.assert_array_equal(g.values[0], [0.004, 0.004, 0.004, 1, 0, 0])


def test_voxelize_averages_colours_in_cell():
    pts = np.array([[0.001, 0.002, 0.003, 1, 0, 0], [0.005, 0.006, 0.007, 0, 1, 0]])
    g = voxelize(pts, 0.01)
    assert len(g) == 1
    np.testing.assert_allclose(g.values[0, 3:], [0.5, 0.5, 0.0])


def test_voxelize_errors():
    with pytest.raises(EmptyScene):
        voxelize(np.zeros((0, 6)))
    with pytest.raises(InvalidInput):
        voxelize(np.array([[np.nan, 0, 0, 0, 0, 0]]))
    with pytest.raises(InvalidInput):
        voxelize(np.ones((2, 6)), voxel_size=0.0)


def test_voxelize_matches_bucketing_oracle(rng):
    pts = np.column_stack([rng.random((500, 3)) * 0.1 - 0.05, rng.random((500, 3))])
    g = voxelize(pts, 0.02)
    buckets = {}
    for p in pts:
        buckets.setdefault(tuple(np.floor(p[:3] / 0.02).astype(int)), []).append(p)
    assert g.coord_set() == set(buckets)
    for c, row in zip(g.coords, g.values):
        np.testing.assert_allclose(row, np.mean(buckets[tuple(c)], axis=0), atol=1e-12)


@given(st.integers(0, 2**31 - 1))
def test_voxelize_permutation_invariant(seed):
    r = np.random.default_rng(seed)
    pts = np.column_stack([r.random((60, 3)) * 0.05, r.random((60, 3))])
    a = voxelize(pts, 0.01)
    b = voxelize(pts[r.permutation(60)], 0.01)
    np.testing.assert_array_equal(a.coords, b.coords)
    np.testing.assert_array_equal(a.values, b.values)


def test_grid_rejects_unsorted_or_duplicate_coords():
    with pytest.raises(InvalidInput):
        SparseGrid(np.array([[1, 0, 0], [0, 0, 0]]), np.zeros((2, 1)), 1, 0.08)
    with pytest.raises(InvalidInput):
        SparseGrid.build(np.array([[0, 0, 0], [0, 0, 0]]), np.zeros((2, 1)), 1, 0.08)
    with pytest.raises(ShapeError):
        SparseGrid(np.array([[0, 0, 0]]), np.zeros((2, 1)), 1, 0.08)


def test_coarsen_means_children():
    g = grid_of([[0, 0, 0], [1, 1, 1], [4, 0, 0]], np.array([[1.0], [3.0], [5.0]]), level=-2)
    c = coarsen(g, 4)
    assert c.coords.tolist() == [[0, 0, 0], [1, 0, 0]]
    np.testing.assert_allclose(c.values[:, 0], [2.0, 5.0])


# -- convolution -----------------------------------------------------------

def brute_conv3(grid, w):
    index = {tuple(c): i for i, c in enumerate(grid.coords.tolist())}
    out = np.zeros((len(grid), w.shape[2]))
    for j, c in enumerate(grid.coords):
        for k, o in enumerate(OFFSETS_3):
            i = index.get(tuple(c + o))
            if i is not None:
                out[j] += grid.values[i] @ w[k]
    return out


def test_single_voxel_conv_uses_centre_tap(rng):
    g = grid_of([[3, 3, 3]], channels=4)
    w = rng.normal(size=(27, 4, 5))
    out = sparse_conv(g, w, stride=1)
    assert out.coords.tolist() == [[3, 3, 3]]
    np.testing.assert_allclose(out.values, g.values @ w[13])


def test_stride2_merges_siblings(rng):
    g = grid_of([[0, 0, 0], [1, 0, 0]], channels=3)
    w = rng.normal(size=(8, 3, 2))
    out = sparse_conv(g, w, stride=2)
    assert out.coords.tolist() == [[0, 0, 0]]
    # child offset (1,0,0) is tap 4 in (dx,dy,dz) lexicographic order
    np.testing.assert_allclose(out.values[0], g.values[0] @ w[0] + g.values[1] @ w[4])
    assert out.level == 2


def test_zero_weights_give_zero_features():
    g = grid_of([[0, 0, 0], [0, 1, 0]], channels=3)
    out = sparse_conv(g, np.zeros((27, 3, 2)), stride=1)
    np.testing.assert_array_equal(out.coords, g.coords)
    assert not out.values.any()


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        sparse_conv(grid_of([[0, 0, 0]], channels=3), np.zeros((27, 4, 2)))
    with pytest.raises(ShapeError):
        sparse_conv(grid_of([[0, 0, 0]], channels=3), np.zeros((8, 3, 2)), stride=1)


@given(coord_lists, st.integers(0, 1000))
def test_conv_matches_brute_force(coords, seed):
    r = np.random.default_rng(seed)
    cin, cout = (3, 5) if seed % 2 else (5, 3)  # exercise both GEMM layouts
    g = grid_of(coords, channels=cin, seed=seed)
    w = r.normal(size=(27, cin, cout))
    np.testing.assert_allclose(sparse_conv(g, w).values, brute_conv3(g, w), atol=1e-12)


@given(coord_lists, st.floats(-3, 3), st.floats(-3, 3))
def test_conv_linearity(coords, alpha, beta):
    r = np.random.default_rng(len(coords))
    w = r.normal(size=(27, 2, 3))
    x, y = r.normal(size=(2, len(coords), 2))
    gx, gy = grid_of(coords, x), grid_of(coords, y)
    lhs = sparse_conv(gx.with_feats(alpha * gx.values + beta * gy.values), w).values
    rhs = alpha * sparse_conv(gx, w).values + beta * sparse_conv(gy, w).values
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_dilating_conv_grows_support(rng):
    g = grid_of([[0, 0, 0]], channels=2)
    out = sparse_conv(g, rng.normal(size=(27, 2, 2)), submanifold=False)
    assert len(out) == 27


def _block_params(rng, cin, cout, zero_path=False):
    p = {
        "down_w": rng.normal(size=(8, cin, cout)), "down_b": np.zeros(cout),
        "conv1_w": rng.normal(size=(27, cout, cout)), "conv1_b": np.zeros(cout),
        "conv2_w": rng.normal(size=(27, cout, cout)), "conv2_b": np.zeros(cout),
    }
    if zero_path:
        p["conv2_w"] = np.zeros_like(p["conv2_w"])
    return p


def test_residual_block_with_zero_path_is_downsample(rng):
    g = grid_of([[0, 0, 0], [1, 1, 0], [5, 2, 2]], channels=3)
    p = _block_params(rng, 3, 4, zero_path=True)
    out = residual_block(g, p)
    d = sparse_conv(g, p["down_w"], stride=2)
    np.testing.assert_array_equal(out.coords, d.coords)
    np.testing.assert_allclose(out.values, np.maximum(d.values, 0))
    assert out.level == g.level + 1


@given(coord_lists)
def test_residual_block_coords_are_unique_parents(coords):
    g = grid_of(coords, channels=2)
    out = residual_block(g, _block_params(np.random.default_rng(0), 2, 2))
    assert out.coord_set() == {tuple(np.floor_divide(c, 2)) for c in coords}


# -- generative upsampling ---------------------------------------------------

def test_upsample_single_voxel_children(rng):
    g = grid_of([[1, 2, 3]], channels=2, level=2)
    out = generative_upsample(g, rng.normal(size=(8, 2, 3)))
    expected = set(itertools.product((2, 3), (4, 5), (6, 7)))
    assert out.coord_set() == expected and len(out) == 8
    assert out.level == 1


def test_upsample_rejects_level_one():
    with pytest.raises(LevelUnderflow):
        generative_upsample(grid_of([[0, 0, 0]], level=1), np.zeros((8, 2, 2)))


@given(coord_lists, st.integers(0, 1000))
def test_upsample_matches_expansion_oracle(coords, seed):
    r = np.random.default_rng(seed)
    g = grid_of(coords, channels=2, level=3, seed=seed)
    w = r.normal(size=(8, 2, 3))
    out = generative_upsample(g, w)
    expected = {}
    for c, f in zip(g.coords, g.values):
        for k, o in enumerate(itertools.product((0, 1), repeat=3)):
            child = tuple(2 * c + np.array(o))
            expected[child] = expected.get(child, 0) + f @ w[k]
    assert out.coord_set() == set(expected)
    for c, row in zip(out.coords.tolist(), out.values):
        np.testing.assert_allclose(row, expected[tuple(c)], atol=1e-12)


# -- interpolation -----------------------------------------------------------

def test_interpolation_exact_hit_returns_row():
    g = grid_of([[0, 0, 0], [1, 0, 0]], np.array([[2.0, 3.0], [5.0, 7.0]]))
    np.testing.assert_array_equal(interpolate_features(g, [[1, 0, 0]]).data, [[5.0, 7.0]])


def test_interpolation_midpoint():
    g = grid_of([[0, 0, 0], [2, 0, 0]], np.array([[0.0], [1.0]]))
    np.testing.assert_allclose(interpolate_features(g, [[1, 0, 0]]).data, [[0.5]], atol=1e-15)


def test_interpolation_miss_is_flagged_zero():
    g = grid_of([[0, 0, 0]], np.array([[4.0]]))
    out, miss = interpolate_features(g, [[3, 0, 0], [2, 2, 2]], return_miss=True)
    assert miss.tolist() == [True, False]
    assert out.data[0, 0] == 0.0 and out.data[1, 0] == 4.0


@given(coord_lists, st.lists(st.tuples(*[st.integers(-8, 8)] * 3), min_size=1, max_size=30))
def test_interpolation_partition_of_unity(coords, queries):
    mat, miss = interpolation_matrix(np.asarray(coords), np.asarray(queries))
    sums = np.asarray(mat.sum(axis=1)).ravel()
    np.testing.assert_allclose(sums[~miss], 1.0, atol=1e-9)
    assert np.all(sums[miss] == 0)
    g = grid_of(coords, np.full((len(coords), 1), 3.25))
    vals = interpolate_features(g, queries).data[:, 0]
    np.testing.assert_allclose(vals[~miss], 3.25, atol=1e-9)


def test_interpolation_uses_at_most_eight_neighbours():
    coords = list(itertools.product((-1, 0, 1), repeat=3))
    coords.remove((0, 0, 0))
    mat, _ = interpolation_matrix(np.array(coords), np.array([[0, 0, 0]]))
    assert mat.nnz == 8
    # the six face neighbours are nearest, then the two lowest edge neighbours
    cols = sorted(np.array(coords)[mat.indices].tolist())
    assert [c for c in cols if sum(map(abs, c)) == 1] == sorted(
        [list(c) for c in coords if sum(map(abs, c)) == 1])


# -- align, FPS, prune --------------------------------------------------------

def test_align_mask_examples():
    b = grid_of([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0], [4, 0, 0]])
    a = grid_of([[0, 0, 0], [2, 0, 0], [4, 0, 0]])
    assert coord_align_mask(a, b).values.tolist() == [1, 0, 1, 0, 1]
    assert coord_align_mask(b, b).values.tolist() == [1] * 5
    assert coord_align_mask(grid_of([[9, 9, 9]]), b).values.tolist() == [0] * 5
    with pytest.raises(LevelError):
        coord_align_mask(grid_of([[0, 0, 0]], level=2), b)


@given(coord_lists, coord_lists)
def test_align_mask_matches_membership(ca, cb):
    a, b = grid_of(ca), grid_of(cb)
    expected = [float(tuple(c) in set(ca)) for c in b.coords.tolist()]
    assert coord_align_mask(a, b).values.tolist() == expected


def greedy_fps(points, k):
    chosen = [0]
    while len(chosen) < k:
        best, best_d = None, -1.0
        for i, p in enumerate(points):
            d = min(float(((p - points[j]) ** 2).sum()) for j in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return chosen


def test_fps_examples():
    g = grid_of([[0, 0, 0], [1, 0, 0], [10, 0, 0]])
    idx, order = farthest_point_sample(g, 2)
    assert order.tolist() == [0, 2] and idx.tolist() == [0, 2]
    assert farthest_point_sample(g, 1)[0].tolist() == [0]
    assert farthest_point_sample(g, 3)[0].tolist() == [0, 1, 2]
    for bad in (0, 4):
        with pytest.raises(InvalidK):
            farthest_point_sample(g, bad)


@given(coord_lists, st.integers(1, 40))
def test_fps_matches_greedy_oracle(coords, k):
    g = grid_of(coords)
    k = min(k, len(g))
    _, order = farthest_point_sample(g, k)
    assert order.tolist() == greedy_fps(g.coords.astype(float), k)


def test_prune_examples():
    g = grid_of([[0, 0, 0], [1, 0, 0], [2, 0, 0]])
    p = prune(g, VoxelMask.of([1, 0, 1]))
    assert p.coords.tolist() == [[0, 0, 0], [2, 0, 0]]
    np.testing.assert_array_equal(p.values, g.values[[0, 2]])
    assert prune(g, np.ones(3)) is g
    assert len(prune(g, np.zeros(3))) == 0
    with pytest.raises(ShapeError):
        prune(g, np.ones(2))


@given(coord_lists, st.integers(0, 2**31 - 1))
def test_prune_composes(coords, seed):
    r = np.random.default_rng(seed)
    g = grid_of(coords)
    m1 = r.random(len(g)) < 0.6
    once = prune(g, m1.astype(float))
    m2 = r.random(len(once)) < 0.6
    composed = np.zeros(len(g), dtype=bool)
    composed[np.flatnonzero(m1)[m2]] = True
    twice = prune(once, m2.astype(float))
    direct = prune(g, composed.astype(float))
    np.testing.assert_array_equal(twice.coords, direct.coords)
    np.testing.assert_array_equal(twice.values, direct.values)


def test_conv_is_deterministic(rng):
    coords = rng.integers(0, 6, size=(50, 3))
    coords = np.unique(coords, axis=0)
    g = grid_of(coords, channels=3)
    w = rng.normal(size=(27, 3, 4))
    a, b = sparse_conv(g, w), sparse_conv(g, ad.Tensor(w.copy()))
    assert a.values.tobytes() == b.values.tobytes()
