"""Anchor-free grounding head, axis-aligned box geometry and training losses."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Tensor
from .errors import EmptyGrid, EmptyPrediction, InvalidInput, NumericError
from .sparse import SparseGrid, sparse_conv, submanifold_kmap
from .text import concat_fuse, init_mlp, mlp, pooled_tokens

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
SIZE_PRIOR = 5.0  # 40 cm at the 8 cm head resolution


@dataclass(frozen=True)
class Box3D:
    center: tuple
    size: tuple

    def __post_init__(self):
        c = tuple(float(v) for v in np.asarray(self.center, dtype=np.float64).reshape(3))
        s = tuple(float(v) for v in np.asarray(self.size, dtype=np.float64).reshape(3))
        if not all(v > 0 for v in s):
            raise InvalidInput(f"box sizes must be positive, got {s}")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "size", s)

    @property
    def min(self):
        return np.asarray(self.center) - 0.5 * np.asarray(self.size)

    @property
    def max(self):
        return np.asarray(self.center) + 0.5 * np.asarray(self.size)

    @property
    def volume(self):
        return float(np.prod(self.size))

    def contains(self, points):
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return np.all((p >= self.min) & (p <= self.max), axis=1)

    def translated(self, delta):
        return Box3D(np.asarray(self.center) + np.asarray(delta), self.size)


def iou3d(a, b):
    # volumes from the same corner differences as the overlap, so iou3d(b, b) == 1
    amin, amax, bmin, bmax = a.min, a.max, b.min, b.max
    inter = float(np.prod(np.clip(np.minimum(amax, bmax) - np.maximum(amin, bmin), 0.0, None)))
    va, vb = float(np.prod(amax - amin)), float(np.prod(bmax - bmin))
    return inter / (va + vb - inter)


def diou_loss(pred, gt):
    """1 - IoU + squared centre distance over the enclosing-box diagonal squared."""
    rho2 = float(np.sum((np.asarray(pred.center) - np.asarray(gt.center)) ** 2))
    diag = np.maximum(pred.max, gt.max) - np.minimum(pred.min, gt.min)
    return 1.0 - iou3d(pred, gt) + rho2 / float(np.sum(diag ** 2))


def diou_loss_tensor(centers, sizes, gt):
    """Per-row DIoU of predicted (P x 3) centres/sizes against one ``gt`` box."""
    half = ad.mul(sizes, 0.5)
    pmin, pmax = ad.sub(centers, half), ad.add(centers, half)
    gmin, gmax = gt.min[None, :], gt.max[None, :]
    extent = ad.relu(ad.sub(ad.minimum(pmax, gmax), ad.maximum(pmin, gmin)))
    inter = ad.mul(ad.mul(extent[:, 0], extent[:, 1]), extent[:, 2])
    pvol = ad.mul(ad.mul(sizes[:, 0], sizes[:, 1]), sizes[:, 2])
    union = ad.sub(ad.add(pvol, gt.volume), inter)
    iou = ad.div(inter, union)
    rho2 = ad.tsum(ad.power(ad.sub(centers, np.asarray(gt.center)[None, :]), 2), axis=1)
    diag = ad.sub(ad.maximum(pmax, gmax), ad.minimum(pmin, gmin))
    c2 = ad.tsum(ad.power(diag, 2), axis=1)
    return ad.add(ad.sub(1.0, iou), ad.div(rho2, c2))


def focal_loss(probs, labels, alpha=FOCAL_ALPHA, gamma=FOCAL_GAMMA):
    """Mean of -alpha_t (1 - p_t)^gamma log p_t over all entries.

    Accepts arrays or tensors of probabilities strictly inside (0, 1).
    """
    p = ad.as_tensor(probs)
    y = np.asarray(labels, dtype=np.float64).reshape(p.shape)
    if p.size == 0:
        return Tensor(np.array(0.0))
    if not np.all((p.data > 0) & (p.data < 1)):
        raise NumericError("focal loss needs probabilities strictly inside (0, 1)", node="focal_loss")
    pt = ad.add(ad.mul(p, 2 * y - 1), 1 - y)
    alpha_t = np.where(y > 0.5, alpha, 1.0 - alpha)
    per = ad.mul(ad.mul(ad.power(ad.sub(1.0, pt), gamma), ad.log(pt)), -alpha_t)
    return ad.mean(per)


def sigmoid_focal_loss(logits, labels, alpha=FOCAL_ALPHA, gamma=FOCAL_GAMMA):
    """``focal_loss(sigmoid(logits))`` evaluated stably in logit space."""
    x = ad.as_tensor(logits)
    y = np.asarray(labels, dtype=np.float64).reshape(x.shape)
    if x.size == 0:
        return Tensor(np.array(0.0))
    s = ad.mul(x, 2 * y - 1)
    neg_s = ad.mul(s, -1.0)
    alpha_t = np.where(y > 0.5, alpha, 1.0 - alpha)
    per = ad.mul(ad.softplus(neg_s), alpha_t)
    if gamma:
        per = ad.mul(per, ad.power(ad.sigmoid(neg_s), gamma))
    return ad.mean(per)


def binary_cross_entropy(probs, labels):
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    return float(np.mean(-(y * np.log(p) + (1 - y) * np.log(1 - p))))


def cube_mask(coords, voxel_size, center, cube):
    """Voxels within the ``cube``-wide lattice cube around the voxel holding ``center``."""
    anchor = np.floor(np.asarray(center, dtype=np.float64) / voxel_size).astype(np.int64)
    return np.all(np.abs(np.asarray(coords, dtype=np.int64) - anchor) <= cube // 2, axis=1)


def assign_targets(coords, voxel_size, target, l_pos=3):
    """Positives: inside the l_pos cube around the target centre voxel and inside the box."""
    if l_pos % 2 == 0:
        raise InvalidInput(f"l_pos must be odd, got {l_pos}")
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    near = cube_mask(coords, voxel_size, target.center, l_pos)
    inside = target.contains((coords + 0.5) * voxel_size)
    return (near & inside).astype(np.float64)


# -- head ---------------------------------------------------------------------

@dataclass
class HeadBranch:
    conv_w: Tensor
    conv_b: Tensor
    mlp: object


@dataclass
class HeadParams:
    cls: HeadBranch
    box: HeadBranch


def _init_branch(store, prefix, c, hidden, outputs):
    return HeadBranch(
        conv_w=store.get_or_add(f"{prefix}.conv.w", (27, c, hidden), fan_in=27 * c),
        conv_b=store.get_or_add(f"{prefix}.conv.b", (hidden,), init="zeros"),
        mlp=init_mlp(store, f"{prefix}.mlp", (hidden, hidden, outputs)),
    )


def init_head(store, in_channels, token_dim, hidden, prefix="head", size_prior=SIZE_PRIOR):
    """Objectness and box branches, each a conv over the fused input plus an MLP.

    The branches share no weights: the box loss is an order of magnitude
    larger than the focal loss, and a shared trunk ends up serving regression
    while objectness stops separating the target from its anchor.

    ``size_prior`` is a typical object edge in voxel units. The box branch's
    log-size outputs start at its log, so fresh boxes are object-sized rather
    than one voxel wide.
    """
    c = in_channels + token_dim
    last_bias = f"{prefix}.box.mlp.b1"
    if last_bias not in store:
        store.add(last_bias, (6,), value=[0.0] * 3 + [float(np.log(size_prior))] * 3)
    return HeadParams(
        cls=_init_branch(store, f"{prefix}.cls", c, hidden, 1),
        box=_init_branch(store, f"{prefix}.box", c, hidden, 6),
    )


@dataclass
class Prediction:
    logits: Tensor
    box_params: Tensor
    coords: np.ndarray
    voxel_size: float

    @property
    def objectness(self):
        return ad._sigmoid(self.logits.data)

    def __len__(self):
        return self.coords.shape[0]

    def decode(self, rows=None):
        """Centres and sizes in metres for ``rows`` (all rows by default) as tensors."""
        rows = np.arange(len(self)) if rows is None else np.asarray(rows, dtype=np.int64)
        params = ad.take_rows(self.box_params, rows)
        base = (self.coords[rows] + 0.5) * self.voxel_size
        centers = ad.add(ad.mul(params[:, 0:3], self.voxel_size), base)
        sizes = ad.mul(ad.exp(params[:, 3:6]), self.voxel_size)
        return centers, sizes


def _concat_conv(u1, tokens, weights, bias):
    """Submanifold conv of ``concat_fuse(u1, tokens)`` without materialising the concat.

    The pooled token block is the same on every row, so its contribution at a
    voxel is the sum of (pooled @ W_k) over the taps that hit an occupied
    neighbour.
    """
    c = u1.channels
    weights = ad.as_tensor(weights)
    taps, _, c_out = weights.shape
    voxel_part = sparse_conv(u1, ad.getitem(weights, (slice(None), slice(0, c))), stride=1).feats
    kmap = submanifold_kmap(u1.coords)
    rows = np.concatenate([e[2] for e in kmap.entries])
    cols = np.concatenate([np.full(len(e[2]), e[0]) for e in kmap.entries])
    occupancy = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(len(u1), taps))
    w_tok = ad.reshape(ad.transpose(ad.getitem(weights, (slice(None), slice(c, None))), (1, 0, 2)),
                       (-1, taps * c_out))
    per_tap = ad.reshape(ad.matmul(pooled_tokens(tokens), w_tok), (taps, c_out))
    out = ad.add(voxel_part, ad.sparse_matmul(occupancy, per_tap))
    return out if bias is None else ad.add(out, bias)


def _branch(u1, tokens, branch, submanifold):
    if submanifold:
        h = _concat_conv(u1, tokens, branch.conv_w, branch.conv_b)
    else:
        fused = concat_fuse(u1, tokens)
        h = sparse_conv(fused, branch.conv_w, stride=1, bias=branch.conv_b, submanifold=False)
        h = ad.take_rows(h.feats, h.index_of(u1.coords))
    return mlp(ad.relu(h), branch.mlp)


def grounding_head(u1, tokens, params, submanifold=True):
    if len(u1) == 0:
        raise EmptyGrid("grounding head needs at least one voxel")
    logits = _branch(u1, tokens, params.cls, submanifold)
    box = _branch(u1, tokens, params.box, submanifold)
    return Prediction(logits[:, 0], box, u1.coords, u1.voxel_size)


def select_box(pred):
    """Decode the box of the highest-objectness voxel (lowest canonical index on ties)."""
    if len(pred) == 0:
        raise EmptyPrediction("no voxels to select from")
    best = int(np.argmax(pred.logits.data))
    with ad.no_grad():
        c, s = pred.decode([best])
    return Box3D(c.data[0], s.data[0])


# -- loss composition ---------------------------------------------------------

LOSS_TERMS = ("pruning", "completion", "class", "bbox")


def total_loss(pruning_terms, completion_terms, class_terms, bbox_terms, lambdas=(1.0, 1.0, 1.0, 1.0)):
    """Weighted sum of the four loss groups; each group is a list of scalars summed."""
    groups = dict(zip(LOSS_TERMS, (pruning_terms, completion_terms, class_terms, bbox_terms)))
    total = Tensor(np.array(0.0))
    parts = {}
    for (name, terms), lam in zip(groups.items(), lambdas):
        terms = list(terms) if isinstance(terms, (list, tuple)) else [terms]
        value = Tensor(np.array(0.0))
        for t in terms:
            value = ad.add(value, t)
        if not np.all(np.isfinite(value.data)):
            raise NumericError(f"loss term {name!r} is not finite", node=name)
        parts[name] = float(value.data)
        if lam:
            total = ad.add(total, ad.mul(value, float(lam)))
    return total, parts
