"""Text-guided voxel pruning and its supervision masks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import EmptyGrid, InvalidInput
from .head import cube_mask
from .sparse import (
    SparseGrid,
    VoxelMask,
    farthest_point_sample,
    interpolate_features,
    prune,
)
from .text import (
    AttentionParams,
    MLPParams,
    TokenSet,
    cross_attention,
    init_attention,
    init_mlp,
    mlp,
    self_attention,
    voxel_self_attention,
)

SIGMA_SCENE = 0.7
SIGMA_TARGET = 0.3
SUPERVISION_CUBE = 7
K_MIN = 32
FPS_K = 512


@dataclass
class TgpLevelParams:
    token_attn: AttentionParams
    cross_attn: AttentionParams
    mlp: MLPParams
    sigma: float
    kind: str
    voxel_attn: AttentionParams | None = None
    post_cross_attn: AttentionParams | None = None

    def __post_init__(self):
        if not 0.0 <= self.sigma <= 1.0:
            raise InvalidInput(f"sigma must lie in [0, 1], got {self.sigma}")
        if self.kind not in ("scene", "target"):
            raise InvalidInput(f"kind must be 'scene' or 'target', got {self.kind!r}")


def init_tgp(store, prefix, channels, token_dim, width, heads, sigma, kind, simplified=True):
    params = TgpLevelParams(
        token_attn=init_attention(store, f"{prefix}.token_attn", token_dim, token_dim, width, heads),
        cross_attn=init_attention(store, f"{prefix}.cross_attn", channels, token_dim, width, heads),
        mlp=init_mlp(store, f"{prefix}.mlp", (channels, 2 * channels, 1)),
        sigma=sigma,
        kind=kind,
    )
    if not simplified:
        params.voxel_attn = init_attention(store, f"{prefix}.voxel_attn", channels, channels, width, heads)
        params.post_cross_attn = init_attention(store, f"{prefix}.post_cross_attn", channels, token_dim,
                                                width, heads)
    return params


@dataclass
class PruneTrace:
    level: int
    voxels_before: int
    voxels_after: int
    kept_ratio: float
    fallback_used: bool

    def csv_row(self):
        return f"{self.level},{self.voxels_before},{self.voxels_after},{self.kept_ratio:.6f},{int(self.fallback_used)}"


def _attn_flops(n_queries, n_keys, params):
    return int(n_queries) * int(n_keys) * int(params.q.shape[1])


@dataclass
class ScoreResult:
    """Keep probabilities over every voxel plus the logits that produced them."""

    probs: Tensor
    logits: Tensor
    logit_index: np.ndarray
    attended: SparseGrid | None
    flops: int


def _score(grid, tokens, params, use_fps, fps_k):
    if len(grid) == 0:
        raise EmptyGrid("cannot score an empty grid")
    n = len(grid)
    if use_fps and n > fps_k:
        idx, _ = farthest_point_sample(grid, fps_k)
        sub = SparseGrid(grid.coords[idx], ad.take_rows(grid.feats, idx), grid.level, grid.voxel_size)
    else:
        idx = np.arange(n)
        sub = grid
    attended = cross_attention(sub, tokens, params.cross_attn)
    logits = mlp(attended.feats, params.mlp)[:, 0]
    probs = ad.sigmoid(logits)
    if idx.size != n:
        probs = interpolate_features(sub.with_feats(ad.reshape(probs, (-1, 1))), grid.coords)[:, 0]
        attended = None
    return ScoreResult(probs, logits, idx, attended, _attn_flops(len(sub), tokens.w, params.cross_attn))


def predict_prune_probs(grid, tokens, params, use_fps=False, fps_k=FPS_K):
    """Per-voxel keep probabilities as a mask over ``grid``.

    With ``use_fps`` the probabilities come from a farthest-point subsample and
    are interpolated back onto every coordinate.
    """
    return VoxelMask(_score(grid, tokens, params, use_fps, fps_k).probs.data, len(grid))


def binarize_and_prune(grid, probs, sigma, k_min=K_MIN):
    """Keep voxels with prob >= sigma; fall back to the top ``k_min`` if too few survive."""
    p = probs.values if isinstance(probs, VoxelMask) else np.asarray(
        probs.data if isinstance(probs, Tensor) else probs, dtype=np.float64).reshape(-1)
    keep = p >= sigma
    fallback = False
    if keep.sum() < min(k_min, len(grid)):
        order = np.argsort(-p, kind="stable")[: min(k_min, len(grid))]
        keep = np.zeros(len(grid), dtype=bool)
        keep[order] = True
        fallback = True
    pruned = prune(grid, keep.astype(np.float64))
    before = len(grid)
    trace = PruneTrace(grid.level, before, len(pruned), len(pruned) / before if before else 1.0, fallback)
    return pruned, trace


def build_scene_supervision(objects, grid, cube=SUPERVISION_CUBE):
    """1 where a voxel lies in any object's cube x cube x cube lattice neighbourhood."""
    if cube % 2 == 0:
        raise InvalidInput(f"supervision cube must be odd, got {cube}")
    mask = np.zeros(len(grid), dtype=bool)
    for box in objects:
        mask |= cube_mask(grid.coords, grid.voxel_size, box.center, cube)
    return VoxelMask(mask.astype(np.float64), len(grid))


def build_target_supervision(target, relevant, grid, cube=SUPERVISION_CUBE):
    return build_scene_supervision([target, *relevant], grid, cube)


@dataclass
class TgpResult:
    grid: SparseGrid
    tokens: TokenSet
    probs: VoxelMask
    trace: PruneTrace
    scores: ScoreResult
    flops: int

    def __iter__(self):
        return iter((self.grid, self.tokens, self.probs, self.trace))


def tgp_block(grid, tokens, params, simplified=True, k_min=K_MIN, fps_k=FPS_K):
    """One pruning stage.

    simplified: token self-attention, dense voxel/text cross-attention, scores,
    prune; the attended features of the survivors are returned.
    original: scores from an FPS subsample, prune, then voxel self-attention
    and cross-attention on the survivors.
    """
    tokens = self_attention(tokens, params.token_attn)
    scores = _score(grid, tokens, params, use_fps=not simplified, fps_k=fps_k)
    flops = scores.flops
    if simplified:
        pruned, trace = binarize_and_prune(scores.attended, scores.probs, params.sigma, k_min)
    else:
        pruned, trace = binarize_and_prune(grid, scores.probs, params.sigma, k_min)
        if len(pruned):
            pruned = voxel_self_attention(pruned, params.voxel_attn)
            pruned = cross_attention(pruned, tokens, params.post_cross_attn)
        flops += _attn_flops(len(pruned), len(pruned), params.voxel_attn)
        flops += _attn_flops(len(pruned), tokens.w, params.post_cross_attn)
    return TgpResult(pruned, tokens, VoxelMask(scores.probs.data, len(grid)), trace, scores, flops)
