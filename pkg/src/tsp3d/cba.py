"""Completion-based addition and the two plain addition alternatives.

All three fuse the upsampled pruned map ``ug`` with backbone features ``v`` at
the same level.  Rows missing on one side are filled by
``interpolate_features``, which returns the stored row on an exact hit.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import EmptyGrid, InvalidInput, LevelError, ShapeError
from .sparse import (
    SparseGrid,
    VoxelMask,
    coord_align_mask,
    interpolate_features,
    union_coords,
)
from .text import AttentionParams, MLPParams, cross_attention, init_attention, init_mlp, mlp

TAU = 0.15


@dataclass
class CbaLevelParams:
    cross_attn: AttentionParams
    mlp: MLPParams
    tau: float

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise InvalidInput(f"tau must lie in [0, 1], got {self.tau}")


def init_cba(store, prefix, channels, token_dim, width, heads, tau=TAU):
    return CbaLevelParams(
        cross_attn=init_attention(store, f"{prefix}.cross_attn", channels, token_dim, width, heads),
        mlp=init_mlp(store, f"{prefix}.mlp", (channels, 2 * channels, 1)),
        tau=tau,
    )


def _same_level(a, b):
    if a.level != b.level:
        raise LevelError(f"level mismatch: {a.level} vs {b.level}")


@dataclass
class TargetMask:
    attended: SparseGrid
    mask: VoxelMask
    logits: Tensor

    def __iter__(self):
        return iter((self.attended, self.mask))


def predict_target_mask(v, tokens, params):
    """Text-attend ``v`` and threshold sigmoid(MLP) at tau (boundary kept)."""
    if len(v) == 0:
        raise EmptyGrid("backbone grid is empty")
    attended = cross_attention(v, tokens, params.cross_attn)
    logits = mlp(attended.feats, params.mlp)[:, 0]
    probs = ad._sigmoid(logits.data)
    return TargetMask(attended, VoxelMask((probs >= params.tau).astype(np.float64), len(v)), logits)


def missing_mask(m_tar, ug, v):
    """Target voxels of ``v`` that the upsampled map does not cover."""
    if len(m_tar) != len(v):
        raise ShapeError(f"target mask of length {len(m_tar)} for {len(v)} voxels")
    present = coord_align_mask(ug, v).as_bool()
    return VoxelMask((m_tar.as_bool() & ~present).astype(np.float64), len(v))


def completion_features(v_att, ug, m_mis):
    """Attended backbone rows at missing coordinates plus features interpolated from ``ug``."""
    if len(m_mis) != len(v_att):
        raise ShapeError(f"missing mask of length {len(m_mis)} for {len(v_att)} voxels")
    idx = np.flatnonzero(m_mis.as_bool())
    if idx.size == 0:
        return SparseGrid.empty(v_att.channels, v_att.level, v_att.voxel_size)
    coords = v_att.coords[idx]
    rows = ad.take_rows(v_att.feats, idx)
    if len(ug):
        rows = ad.add(rows, interpolate_features(ug, coords))
    return SparseGrid(coords, rows, v_att.level, v_att.voxel_size)


def pruning_aware_addition(ug, v):
    """Addition restricted to ``ug``'s coordinates.

    The backbone side is read from ``v`` where present and interpolated from
    ``ug`` elsewhere.
    """
    _same_level(ug, v)
    if len(ug) == 0:
        return ug
    idx = v.index_of(ug.coords)
    present = idx >= 0
    parts = []
    if present.any():
        parts.append(ad.scatter_rows(ad.take_rows(v.feats, idx[present]), np.flatnonzero(present), len(ug)))
    if not present.all():
        absent = np.flatnonzero(~present)
        parts.append(ad.scatter_rows(interpolate_features(ug, ug.coords[absent]), absent, len(ug)))
    other = parts[0] if len(parts) == 1 else ad.add(parts[0], parts[1])
    return ug.with_feats(ad.add(ug.feats, other))


def full_addition(ug, v):
    """Addition over the coordinate union; each side fills its gaps from itself."""
    _same_level(ug, v)
    if len(ug) == 0:
        return v
    if len(v) == 0:
        return ug
    coords = union_coords(ug.coords, v.coords)
    feats = ad.add(interpolate_features(ug, coords), interpolate_features(v, coords))
    return SparseGrid(coords, feats, ug.level, ug.voxel_size)


def cba_combine(ug, v, v_att, m_mis):
    """Pruning-aware addition on ``ug``'s coordinates joined with completion voxels."""
    _same_level(ug, v)
    base = pruning_aware_addition(ug, v)
    completion = completion_features(v_att, ug, m_mis)
    if len(completion) == 0:
        return base
    if len(base) == 0:
        return completion
    return SparseGrid.build(
        np.concatenate([base.coords, completion.coords]),
        ad.concat([base.feats, completion.feats], axis=0),
        ug.level,
        ug.voxel_size,
    )


@dataclass
class CbaResult:
    grid: SparseGrid
    target: TargetMask
    missing: VoxelMask

    @property
    def completions(self):
        return int(self.missing.values.sum())


def completion_based_addition(ug, v, tokens, params):
    target = predict_target_mask(v, tokens, params)
    m_mis = missing_mask(target.mask, ug, v)
    return CbaResult(cba_combine(ug, v, target.attended, m_mis), target, m_mis)
