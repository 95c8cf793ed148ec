"""Coordinate-hashed sparse voxel grids and their geometric primitives.

Coordinates are int64 lattice indices kept in canonical lexicographic
``(x, y, z)`` order.  Every coordinate packs into a single int64 key whose
numeric order equals that lexicographic order, so membership tests and
lookups are ``searchsorted`` calls on the sorted key array.
"""
from __future__ import annotations

import itertools
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Tensor
from .errors import (
    EmptyScene,
    InvalidInput,
    InvalidK,
    LevelError,
    LevelUnderflow,
    ShapeError,
)

BASE_VOXEL = 0.01
_OFF = 1 << 20
_MASK = (1 << 21) - 1

OFFSETS_3 = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=np.int64)
OFFSETS_2 = np.array(list(itertools.product((0, 1), repeat=3)), dtype=np.int64)

INTERP_RADIUS = 2
INTERP_MAX_NEIGHBORS = 8


def level_voxel_size(level):
    """Edge length in metres of a level-``level`` voxel: 2**(level+2) cm."""
    return BASE_VOXEL * 2.0 ** (level + 2)


def level_for_voxel_size(voxel_size):
    exp = np.log2(voxel_size / BASE_VOXEL)
    if abs(exp - round(exp)) < 1e-9:
        return int(round(exp)) - 2
    return None


def coord_keys(coords):
    c = np.asarray(coords, dtype=np.int64).reshape(-1, 3) + _OFF
    return (c[:, 0] << 42) | (c[:, 1] << 21) | c[:, 2]


def keys_to_coords(keys):
    keys = np.asarray(keys, dtype=np.int64)
    out = np.empty((keys.size, 3), dtype=np.int64)
    out[:, 0] = (keys >> 42) & _MASK
    out[:, 1] = (keys >> 21) & _MASK
    out[:, 2] = keys & _MASK
    return out - _OFF


def lookup(sorted_keys, query_keys):
    """Index of each query in ``sorted_keys`` or -1 when absent."""
    if sorted_keys.size == 0:
        return np.full(np.shape(query_keys), -1, dtype=np.int64)
    pos = np.searchsorted(sorted_keys, query_keys)
    pos_c = np.minimum(pos, sorted_keys.size - 1)
    hit = sorted_keys[pos_c] == query_keys
    return np.where(hit, pos_c, -1)


@dataclass(frozen=True, eq=False)
class SparseGrid:
    coords: np.ndarray
    feats: Tensor
    level: int | None
    voxel_size: float

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        feats = self.feats if isinstance(self.feats, Tensor) else Tensor(np.asarray(self.feats, dtype=np.float64))
        if feats.ndim != 2 or feats.shape[0] != coords.shape[0]:
            raise ShapeError(f"feats shape {feats.shape} does not match {coords.shape[0]} coords")
        keys = coord_keys(coords)
        if keys.size > 1 and not np.all(keys[1:] > keys[:-1]):
            raise InvalidInput("coords must be unique and in canonical order; use SparseGrid.build")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "feats", feats)
        object.__setattr__(self, "_keys", keys)

    @classmethod
    def build(cls, coords, feats, level, voxel_size):
        """Canonicalise arbitrary-order unique coordinates."""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        keys = coord_keys(coords)
        order = np.argsort(keys, kind="stable")
        if keys.size > 1 and np.any(keys[order][1:] == keys[order][:-1]):
            raise InvalidInput("duplicate coordinates")
        feats = ad.as_tensor(feats)
        if not np.array_equal(order, np.arange(order.size)):
            feats = ad.take_rows(feats, order)
        return cls(coords[order], feats, level, voxel_size)

    @classmethod
    def empty(cls, channels, level, voxel_size):
        return cls(np.zeros((0, 3), dtype=np.int64), Tensor(np.zeros((0, channels))), level, voxel_size)

    @property
    def keys(self):
        return self._keys

    @property
    def channels(self):
        return self.feats.shape[1]

    @property
    def values(self):
        return self.feats.data

    def __len__(self):
        return self.coords.shape[0]

    def centers(self):
        """Voxel centres in metres."""
        return (self.coords + 0.5) * self.voxel_size

    def index_of(self, coords):
        return lookup(self._keys, coord_keys(coords))

    def with_feats(self, feats):
        return SparseGrid(self.coords, feats, self.level, self.voxel_size)

    def coord_set(self):
        return set(map(tuple, self.coords.tolist()))


@dataclass(frozen=True)
class VoxelMask:
    values: np.ndarray
    host_len: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if v.size != self.host_len:
            raise ShapeError(f"mask length {v.size} != host length {self.host_len}")
        object.__setattr__(self, "values", v)

    @classmethod
    def of(cls, values):
        v = np.asarray(values, dtype=np.float64).reshape(-1)
        return cls(v, v.size)

    @property
    def is_binary(self):
        return bool(np.all((self.values == 0) | (self.values == 1)))

    def as_bool(self):
        return self.values > 0.5

    def __len__(self):
        return self.host_len


@dataclass(frozen=True)
class KernelMap:
    """Per-offset (tap, input index, output index) triples of a sparse convolution."""

    entries: tuple
    n_in: int
    n_out: int
    taps: int = 27
    _mats: dict = field(default_factory=dict, repr=False, compare=False)

    def pairs(self):
        return sum(len(e[1]) for e in self.entries)

    def _triples(self):
        k = np.concatenate([np.full(len(e[1]), e[0], dtype=np.int64) for e in self.entries])
        i = np.concatenate([e[1] for e in self.entries]).astype(np.int64)
        j = np.concatenate([e[2] for e in self.entries]).astype(np.int64)
        return k, i, j

    def gather_matrix(self):
        """(n_out * taps, n_in) 0/1 matrix: row j * taps + k selects the input under tap k."""
        if "gather" not in self._mats:
            k, i, j = self._triples()
            self._mats["gather"] = sp.csr_matrix(
                (np.ones(i.size), (j * self.taps + k, i)), shape=(self.n_out * self.taps, self.n_in))
        return self._mats["gather"]

    def scatter_matrix(self):
        """(n_out, n_in * taps) 0/1 matrix summing per-tap products into outputs."""
        if "scatter" not in self._mats:
            k, i, j = self._triples()
            self._mats["scatter"] = sp.csr_matrix(
                (np.ones(i.size), (j, i * self.taps + k)), shape=(self.n_out, self.n_in * self.taps))
        return self._mats["scatter"]


_CACHE_SIZE = 256
_cache: OrderedDict = OrderedDict()


def _memo(kind, arrays, build):
    """LRU memo keyed on the raw bytes of coordinate arrays."""
    key = (kind,) + tuple((a.shape, a.tobytes()) for a in arrays)
    hit = _cache.get(key)
    if hit is not None:
        _cache.move_to_end(key)
        return hit
    value = build()
    _cache[key] = value
    if len(_cache) > _CACHE_SIZE:
        _cache.popitem(last=False)
    return value


def _frozen(a):
    a.flags.writeable = False
    return a


def clear_caches():
    _cache.clear()


# -- voxelization ---------------------------------------------------------------

def voxelize(points, voxel_size=BASE_VOXEL):
    """Mean-pool (x, y, z, r, g, b) rows into occupied cells of edge ``voxel_size``."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise EmptyScene("cannot voxelize an empty point cloud")
    if pts.shape[1] != 6:
        raise InvalidInput(f"points must be N x 6, got {pts.shape}")
    if not voxel_size > 0:
        raise InvalidInput(f"voxel_size must be positive, got {voxel_size}")
    if not np.all(np.isfinite(pts)):
        raise InvalidInput("non-finite point values")
    cells = np.floor(pts[:, :3] / voxel_size).astype(np.int64)
    keys = coord_keys(cells)
    # full-row tie breaking fixes the summation order, so any input permutation
    # produces bit-identical means
    order = np.lexsort(tuple(pts[:, ::-1].T) + (keys,))
    keys_s, pts_s = keys[order], pts[order]
    starts = np.flatnonzero(np.r_[True, keys_s[1:] != keys_s[:-1]])
    counts = np.diff(np.r_[starts, keys_s.size])
    feats = np.add.reduceat(pts_s, starts, axis=0) / counts[:, None]
    return SparseGrid(keys_to_coords(keys_s[starts]), Tensor(feats),
                      level_for_voxel_size(voxel_size), float(voxel_size))


def coarsen(grid, factor):
    """Parameter-free mean pooling onto a lattice ``factor`` times coarser."""
    parent = np.floor_divide(grid.coords, factor)
    keys = coord_keys(parent)
    uniq, inverse = np.unique(keys, return_inverse=True)
    counts = np.bincount(inverse, minlength=uniq.size).astype(np.float64)
    summed = ad.scatter_rows(grid.feats, inverse, uniq.size)
    feats = ad.mul(summed, (1.0 / counts)[:, None])
    level = None if grid.level is None else grid.level + int(round(np.log2(factor)))
    return SparseGrid(keys_to_coords(uniq), feats, level, grid.voxel_size * factor)


# -- kernel maps ----------------------------------------------------------------

def submanifold_kmap(coords_in, out_coords=None):
    """Kernel-3 map: out[p] gathers in[p + o] for every occupied neighbour."""
    out = coords_in if out_coords is None else out_coords
    return _memo("subm", (np.ascontiguousarray(coords_in), np.ascontiguousarray(out)),
                 lambda: _submanifold_kmap(coords_in, out))


def _submanifold_kmap(coords_in, out_coords):
    in_keys = coord_keys(coords_in)
    out = coords_in if out_coords is None else out_coords
    entries = []
    arange = np.arange(out.shape[0])
    for k, off in enumerate(OFFSETS_3):
        idx = lookup(in_keys, coord_keys(out + off))
        hit = idx >= 0
        if hit.any():
            entries.append((k, idx[hit], arange[hit]))
    return KernelMap(tuple(entries), coords_in.shape[0], out.shape[0], 27)


def dilated_output_coords(coords):
    keys = np.unique(np.concatenate([coord_keys(coords - off) for off in OFFSETS_3]))
    return keys_to_coords(keys)


def downsample_kmap(coords_in):
    """Kernel-2 stride-2 map onto unique parents floor(c / 2)."""
    return _memo("down", (np.ascontiguousarray(coords_in),), lambda: _downsample_kmap(coords_in))


def _downsample_kmap(coords_in):
    parents = np.floor_divide(coords_in, 2)
    out_keys = np.unique(coord_keys(parents))
    out_idx = lookup(out_keys, coord_keys(parents))
    child = coords_in - 2 * parents
    k_of = child[:, 0] * 4 + child[:, 1] * 2 + child[:, 2]
    entries = []
    for k in range(8):
        sel = np.flatnonzero(k_of == k)
        if sel.size:
            entries.append((k, sel, out_idx[sel]))
    return KernelMap(tuple(entries), coords_in.shape[0], out_keys.size, 8), _frozen(keys_to_coords(out_keys))


def upsample_kmap(coords_in):
    """Transposed kernel-2 stride-2 map onto all children 2c + o."""
    return _memo("up", (np.ascontiguousarray(coords_in),), lambda: _upsample_kmap(coords_in))


def _upsample_kmap(coords_in):
    children = (2 * coords_in[:, None, :] + OFFSETS_2[None, :, :]).reshape(-1, 3)
    out_keys = np.unique(coord_keys(children))
    arange = np.arange(coords_in.shape[0])
    entries = []
    for k, off in enumerate(OFFSETS_2):
        entries.append((k, arange, lookup(out_keys, coord_keys(2 * coords_in + off))))
    return KernelMap(tuple(entries), coords_in.shape[0], out_keys.size, 8), _frozen(keys_to_coords(out_keys))


# -- convolutions -----------------------------------------------------------------

def _check_weights(grid, weights, taps):
    w = ad.as_tensor(weights)
    if w.ndim != 3 or w.shape[0] != taps:
        raise ShapeError(f"expected weights of shape ({taps}, C_in, C_out), got {w.shape}")
    if w.shape[1] != grid.channels:
        raise ShapeError(f"channel mismatch: grid has {grid.channels}, weights expect {w.shape[1]}")
    return w


def sparse_conv(grid, weights, stride=1, bias=None, submanifold=True):
    """Sparse convolution.

    stride 1 uses a 3x3x3 kernel; with ``submanifold`` the output keeps the
    input coordinates, otherwise it dilates to every cell within one step.
    stride 2 uses a 2x2x2 kernel onto parent coordinates floor(c / 2).
    """
    if stride == 1:
        w = _check_weights(grid, weights, 27)
        out_coords = grid.coords if submanifold else dilated_output_coords(grid.coords)
        kmap = submanifold_kmap(grid.coords, out_coords)
        level, vs = grid.level, grid.voxel_size
    elif stride == 2:
        w = _check_weights(grid, weights, 8)
        kmap, out_coords = downsample_kmap(grid.coords)
        level = None if grid.level is None else grid.level + 1
        vs = grid.voxel_size * 2
    else:
        raise ShapeError(f"unsupported stride {stride}")
    out = ad.kernel_conv(grid.feats, w, kmap)
    if bias is not None:
        out = ad.add(out, bias)
    return SparseGrid(out_coords, out, level, vs)


def residual_block(grid, params, submanifold=True):
    """Strided entry convolution followed by a two-convolution residual path.

    ``params`` maps ``down_w, down_b, conv1_w, conv1_b, conv2_w, conv2_b``.
    """
    d = sparse_conv(grid, params["down_w"], stride=2, bias=params.get("down_b"))
    d = d.with_feats(ad.relu(d.feats))
    h = sparse_conv(d, params["conv1_w"], stride=1, bias=params.get("conv1_b"), submanifold=submanifold)
    h = h.with_feats(ad.relu(h.feats))
    if not submanifold:
        # dilated outputs grow the support; restrict back onto d's coordinates
        h = h.with_feats(ad.take_rows(h.feats, h.index_of(d.coords)))
        h = SparseGrid(d.coords, h.feats, d.level, d.voxel_size)
    r = sparse_conv(h, params["conv2_w"], stride=1, bias=params.get("conv2_b"), submanifold=True)
    return d.with_feats(ad.add(d.feats, r.feats))


def generative_upsample(grid, weights, bias=None):
    """Transposed stride-2 convolution expanding each voxel into its 8 children."""
    if grid.level is not None and grid.level < 2:
        raise LevelUnderflow(f"cannot upsample a level-{grid.level} grid")
    w = _check_weights(grid, weights, 8)
    kmap, out_coords = upsample_kmap(grid.coords)
    out = ad.kernel_conv(grid.feats, w, kmap, name="generative_upsample")
    if bias is not None:
        out = ad.add(out, bias)
    level = None if grid.level is None else grid.level - 1
    return SparseGrid(out_coords, out, level, grid.voxel_size / 2)


# -- interpolation ----------------------------------------------------------------

def _interp_offsets():
    r = INTERP_RADIUS
    offs = np.array(list(itertools.product(range(-r, r + 1), repeat=3)), dtype=np.int64)
    dist = np.sqrt((offs ** 2).sum(axis=1))
    order = np.lexsort((coord_keys(offs), dist))
    return offs[order], dist[order]


_INTERP_OFFS, _INTERP_DIST = _interp_offsets()


def interpolation_matrix(src_coords, queries):
    """Sparse (m x n) inverse-distance weights and a per-query miss flag.

    An exact hit gets weight 1 on itself; otherwise up to 8 nearest occupied
    voxels within Chebyshev radius 2 (ties broken in canonical offset order)
    share weights proportional to 1/distance.
    """
    queries = np.ascontiguousarray(queries, dtype=np.int64).reshape(-1, 3)
    src_coords = np.ascontiguousarray(src_coords, dtype=np.int64).reshape(-1, 3)
    return _memo("interp", (src_coords, queries), lambda: _interpolation_matrix(src_coords, queries))


def _interpolation_matrix(src_coords, queries):
    m = queries.shape[0]
    src_keys = coord_keys(src_coords)
    n = src_keys.size
    count = np.zeros(m, dtype=np.int64)
    rows, cols, wts = [], [], []
    for off, dist in zip(_INTERP_OFFS, _INTERP_DIST):
        open_q = np.flatnonzero(count < INTERP_MAX_NEIGHBORS)
        if open_q.size == 0 or n == 0:
            break
        idx = lookup(src_keys, coord_keys(queries[open_q] + off))
        hit = idx >= 0
        if not hit.any():
            continue
        q = open_q[hit]
        rows.append(q)
        cols.append(idx[hit])
        if dist == 0:
            wts.append(np.full(q.size, np.inf))
            count[q] = INTERP_MAX_NEIGHBORS
        else:
            wts.append(np.full(q.size, 1.0 / dist))
            count[q] += 1
    if rows:
        rows, cols, wts = np.concatenate(rows), np.concatenate(cols), np.concatenate(wts)
        exact = np.isinf(wts)
        wts[exact] = 1.0
        totals = np.bincount(rows, weights=wts, minlength=m)
        wts = wts / totals[rows]
    else:
        rows = cols = np.zeros(0, dtype=np.int64)
        wts = np.zeros(0)
    mat = sp.csr_matrix((wts, (rows, cols)), shape=(m, n))
    miss = count == 0
    return mat, miss


def interpolate_features(grid, queries, return_miss=False):
    """Interpolate ``grid`` features at integer ``queries`` on the same lattice.

    Queries with no occupied voxel within the radius get a zero row and are
    flagged in the returned miss array.
    """
    queries = np.asarray(queries, dtype=np.int64).reshape(-1, 3)
    mat, miss = interpolation_matrix(grid.coords, queries)
    if len(grid) == 0:
        out = Tensor(np.zeros((queries.shape[0], grid.channels)))
    else:
        out = ad.sparse_matmul(mat, grid.feats)
    return (out, miss) if return_miss else out


# -- masks, sampling, pruning ---------------------------------------------------

def coord_align_mask(a, b):
    """Binary mask over ``b.coords``: 1 where the coordinate also exists in ``a``."""
    if a.level != b.level:
        raise LevelError(f"level mismatch: {a.level} vs {b.level}")
    present = lookup(a.keys, b.keys) >= 0
    return VoxelMask(present.astype(np.float64), len(b))


def farthest_point_sample(grid, k):
    """Greedy max-min selection over voxel centres, seeded at index 0.

    Returns ``(indices, order)``: the chosen indices sorted ascending and the
    same indices in selection order.
    """
    n = len(grid)
    if not 1 <= k <= n:
        raise InvalidK(f"k must be in [1, {n}], got {k}")
    pts = grid.coords.astype(np.float64)
    order = np.empty(k, dtype=np.int64)
    order[0] = 0
    dist = ((pts - pts[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        j = int(np.argmax(dist))
        order[i] = j
        dist = np.minimum(dist, ((pts - pts[j]) ** 2).sum(axis=1))
    return np.sort(order), order


def prune(grid, mask):
    """Keep the rows whose mask entry is 1, preserving canonical order."""
    values = mask.values if isinstance(mask, VoxelMask) else np.asarray(mask, dtype=np.float64).reshape(-1)
    if values.size != len(grid):
        raise ShapeError(f"mask of length {values.size} for a grid of {len(grid)} voxels")
    keep = np.flatnonzero(values > 0.5)
    if keep.size == len(grid):
        return grid
    return SparseGrid(grid.coords[keep], ad.take_rows(grid.feats, keep), grid.level, grid.voxel_size)


def union_coords(*coord_arrays):
    keys = np.unique(np.concatenate([coord_keys(c) for c in coord_arrays]))
    return keys_to_coords(keys)
