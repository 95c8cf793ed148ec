"""Toy text encoder and the attention blocks shared by pruning and completion."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, EmptyText, InvalidInput, ShapeError
from .sparse import SparseGrid

UNK = "<unk>"

COLORS = ("red", "green", "blue", "yellow", "purple", "orange", "white", "black", "gray", "brown")
CATEGORIES = ("chair", "table", "box", "cabinet", "lamp", "sofa", "bin", "shelf", "desk", "stool")
RELATION_WORDS = ("left", "right", "of", "behind", "in", "front", "nearest", "to")
FILLER_WORDS = ("the", "a", "that", "is", "next", "near", "small", "large", "tall", "short",
                "wide", "narrow", "object", "on", "floor", "room", "corner", "center", "far",
                "close", "above", "below", "between", "and", "with", "one", "other", "it",
                "this", "side")

DEFAULT_WORDS = (UNK,) + COLORS + CATEGORIES + RELATION_WORDS + FILLER_WORDS


class Vocabulary:
    """Dense word -> id map; id 0 is reserved for unknown words."""

    def __init__(self, words=DEFAULT_WORDS):
        words = list(words)
        if not words or words[0] != UNK:
            words = [UNK] + [w for w in words if w != UNK]
        if len(set(words)) != len(words):
            raise InvalidInput("duplicate vocabulary entries")
        self.words = words
        self.index = {w: i for i, w in enumerate(words)}

    def __len__(self):
        return len(self.words)

    def __contains__(self, word):
        return word in self.index

    def id(self, word):
        return self.index.get(word, 0)

    def ids(self, words):
        return [self.id(w) for w in words]

    def save(self, path):
        Path(path).write_text("\n".join(self.words) + "\n")

    @classmethod
    def load(cls, path):
        lines = Path(path).read_text().splitlines()
        return cls([ln.strip() for ln in lines if ln.strip()])


@dataclass
class TokenSet:
    feats: Tensor
    token_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.feats = ad.as_tensor(self.feats)
        if self.feats.ndim != 2 or self.feats.shape[0] < 1:
            raise EmptyText("a token set needs at least one token")

    @property
    def w(self):
        return self.feats.shape[0]

    @property
    def d(self):
        return self.feats.shape[1]


@dataclass
class AttentionParams:
    q: Tensor
    k: Tensor
    v: Tensor
    o: Tensor
    heads: int

    def __post_init__(self):
        dim = self.q.shape[1]
        if dim % self.heads:
            raise ConfigError(f"attention width {dim} not divisible by {self.heads} heads")


@dataclass
class MLPParams:
    layers: list  # [(w, b), ...]; ReLU between layers


def init_attention(store, prefix, query_dim, kv_dim, width, heads):
    if width % heads:
        raise ConfigError(f"attention width {width} not divisible by {heads} heads")
    return AttentionParams(
        q=store.get_or_add(f"{prefix}.q", (query_dim, width)),
        k=store.get_or_add(f"{prefix}.k", (kv_dim, width)),
        v=store.get_or_add(f"{prefix}.v", (kv_dim, width)),
        o=store.get_or_add(f"{prefix}.o", (width, query_dim)),
        heads=heads,
    )


def init_mlp(store, prefix, dims, zero_last=False):
    layers = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        last = i == len(dims) - 2
        w = store.get_or_add(f"{prefix}.w{i}", (a, b), init="zeros" if (last and zero_last) else "uniform")
        bias = store.get_or_add(f"{prefix}.b{i}", (b,), init="zeros")
        layers.append((w, bias))
    return MLPParams(layers)


def mlp(x, params):
    h = x
    for i, (w, b) in enumerate(params.layers):
        h = ad.linear(h, w, b)
        if i < len(params.layers) - 1:
            h = ad.relu(h)
    return h


def attend(queries, keys, params, return_weights=False):
    """Residual multi-head attention of ``queries`` (n x C) over ``keys`` (w x d)."""
    queries, keys = ad.as_tensor(queries), ad.as_tensor(keys)
    if queries.shape[1] != params.q.shape[0] or keys.shape[1] != params.k.shape[0]:
        raise ShapeError(f"attention expects widths ({params.q.shape[0]}, {params.k.shape[0]}), "
                         f"got ({queries.shape[1]}, {keys.shape[1]})")
    q = ad.matmul(queries, params.q)
    k = ad.matmul(keys, params.k)
    v = ad.matmul(keys, params.v)
    mixed, weights = ad.multihead_attention(q, k, v, params.heads, return_weights=True)
    out = ad.add(queries, ad.matmul(mixed, params.o))
    return (out, weights) if return_weights else out


def self_attention(tokens, params):
    return TokenSet(attend(tokens.feats, tokens.feats, params), list(tokens.token_ids))


def cross_attention(queries, tokens, params, return_weights=False):
    """Every voxel row attends over all tokens; coordinates are untouched."""
    feats = queries.feats if isinstance(queries, SparseGrid) else queries
    res = attend(feats, tokens.feats, params, return_weights=return_weights)
    if isinstance(queries, SparseGrid):
        if return_weights:
            return queries.with_feats(res[0]), res[1]
        return queries.with_feats(res)
    return res


def voxel_self_attention(grid, params):
    return grid.with_feats(attend(grid.feats, grid.feats, params))


def pooled_tokens(tokens):
    return ad.mean(tokens.feats, axis=0, keepdims=True)


def concat_fuse(grid, tokens):
    """Append the mean-pooled token vector to every voxel row (width C + d)."""
    pooled = ad.broadcast_rows(pooled_tokens(tokens), len(grid))
    return grid.with_feats(ad.concat([grid.feats, pooled], axis=1))


@dataclass
class TextEncoderParams:
    embed: Tensor
    pos: Tensor
    attn: AttentionParams

    @property
    def max_words(self):
        return self.pos.shape[0]


def init_text_encoder(store, vocab_size, width, heads, max_words, prefix="text"):
    return TextEncoderParams(
        embed=store.get_or_add(f"{prefix}.embed", (vocab_size, width), fan_in=1),
        pos=store.get_or_add(f"{prefix}.pos", (max_words, width), fan_in=1),
        attn=init_attention(store, f"{prefix}.attn", width, width, width, heads),
    )


def encode_text(description, vocab, params):
    """Embedding + positional rows followed by one self-attention layer."""
    words = list(description)
    if not words:
        raise EmptyText("empty description")
    if len(words) > params.max_words:
        raise InvalidInput(f"description has {len(words)} words, limit is {params.max_words}")
    ids = np.array(vocab.ids(words), dtype=np.int64)
    x = ad.add(ad.take_rows(params.embed, ids), params.pos[: len(words)])
    return self_attention(TokenSet(x, ids.tolist()), params.attn)
