"""Baseline and pruning models assembled from the sparse, text, pruning and completion blocks."""
from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cba import (
    completion_based_addition,
    full_addition,
    init_cba,
    pruning_aware_addition,
)
from .errors import ConfigError, NumericError
from .head import (
    assign_targets,
    diou_loss_tensor,
    grounding_head,
    init_head,
    select_box,
    sigmoid_focal_loss,
    total_loss,
)
from .params import AdamMoments, ParamStore, adam_step, backward
from .sparse import (
    SparseGrid,
    coarsen,
    generative_upsample,
    level_voxel_size,
    residual_block,
    voxelize,
)
from .text import (
    Vocabulary,
    concat_fuse,
    cross_attention,
    encode_text,
    init_attention,
    init_text_encoder,
    self_attention,
    voxel_self_attention,
)
from .tgp import build_scene_supervision, build_target_supervision, init_tgp, tgp_block

FUSION_MODES = ("concat", "attention", "tgp", "simplified_tgp")
ADDITION_MODES = ("full", "pruning_aware", "cba")
LR_SCHEDULES = ("constant", "cosine")
LR_FLOOR = 0.01


@dataclass
class ModelConfig:
    levels: int = 3
    channels: tuple = (32, 64, 128)
    base_voxel_size: float = 0.01
    sigma_sce: float = 0.7
    sigma_tar: float = 0.3
    tau: float = 0.15
    L: int = 7
    L_pos: int = 3
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    lambda4: float = 1.0
    fusion_mode: str = "simplified_tgp"
    addition_mode: str = "cba"
    cba_levels: tuple = (1,)
    k_min: int = 32
    fps_k: int = 512
    heads: int = 4
    d: int = 64
    head_hidden: int = 32
    max_words: int = 16
    submanifold: bool = True
    lr: float = 1e-3
    lr_schedule: str = "cosine"
    schedule_steps: int = 3000
    seed: int = 0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.cba_levels = tuple(sorted(int(c) for c in self.cba_levels))
        self.validate()

    def validate(self):
        if self.levels != 3:
            raise ConfigError("levels is fixed at 3")
        if len(self.channels) != 3:
            raise ConfigError("channels needs one width per level")
        for name in ("sigma_sce", "sigma_tar", "tau"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion_mode must be one of {FUSION_MODES}")
        if self.addition_mode not in ADDITION_MODES:
            raise ConfigError(f"addition_mode must be one of {ADDITION_MODES}")
        if not set(self.cba_levels) <= {1, 2}:
            raise ConfigError("cba_levels must be a subset of {1, 2}")
        if self.L % 2 == 0 or self.L_pos % 2 == 0:
            raise ConfigError("L and L_pos must be odd")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} not divisible by heads={self.heads}")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {LR_SCHEDULES}")
        if self.schedule_steps < 1:
            raise ConfigError("schedule_steps must be positive")

    def lr_at(self, step):
        """Learning rate for the update after ``step`` completed updates.

        ``cosine`` falls from ``lr`` to ``lr * LR_FLOOR`` over
        ``schedule_steps`` and stays there.
        """
        if self.lr_schedule == "constant":
            return self.lr
        frac = min(step, self.schedule_steps) / self.schedule_steps
        floor = self.lr * LR_FLOOR
        return floor + (self.lr - floor) * 0.5 * (1.0 + np.cos(np.pi * frac))

    @property
    def lambdas(self):
        return (self.lambda1, self.lambda2, self.lambda3, self.lambda4)

    @property
    def uses_tgp(self):
        return self.fusion_mode in ("tgp", "simplified_tgp")

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    # -- key=value files ---------------------------------------------------
    def to_text(self):
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        fields = {f.name: f for f in dataclasses.fields(cls)}
        defaults = cls()
        kw = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in fields:
                raise ConfigError(f"line {lineno}: unknown config key {key!r}")
            kw[key] = _parse_value(value, getattr(defaults, key), key)
        return cls(**kw)

    @classmethod
    def load(cls, path):
        return cls.from_text(Path(path).read_text())

    def save(self, path):
        Path(path).write_text(self.to_text())


def _parse_value(text, default, key):
    try:
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, tuple):
            return tuple(int(x) for x in text.split(",") if x.strip())
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r}") from exc


# -- trace --------------------------------------------------------------------

@dataclass
class StageRecord:
    name: str
    voxels: int
    flops: int
    ms: float


@dataclass
class ForwardTrace:
    counts: dict = field(default_factory=dict)  # e.g. {"V1": n, "UG1": n, "UP2": n, "U1": n}
    stages: list = field(default_factory=list)
    prune_traces: list = field(default_factory=list)
    completions: dict = field(default_factory=dict)

    def stage(self, name, voxels, flops, t0):
        self.stages.append(StageRecord(name, int(voxels), int(flops), (time.perf_counter() - t0) * 1e3))

    @property
    def attention_flops(self):
        return sum(s.flops for s in self.stages)

    @property
    def total_ms(self):
        return sum(s.ms for s in self.stages)


# -- model ----------------------------------------------------------------------

class Model:
    """Parameter views over a ``ParamStore`` for one configuration."""

    def __init__(self, config, store=None, vocab=None):
        self.config = config
        self.vocab = vocab or Vocabulary()
        self.store = store if store is not None else ParamStore(config.seed)
        c1, c2, c3 = config.channels
        d, h, s = config.d, config.heads, self.store
        self.blocks = []
        for i, (cin, cout) in enumerate(((6, c1), (c1, c2), (c2, c3)), start=1):
            self.blocks.append({
                "down_w": s.get_or_add(f"backbone.block{i}.down.w", (8, cin, cout), fan_in=8 * cin),
                "down_b": s.get_or_add(f"backbone.block{i}.down.b", (cout,), init="zeros"),
                "conv1_w": s.get_or_add(f"backbone.block{i}.conv1.w", (27, cout, cout), fan_in=27 * cout),
                "conv1_b": s.get_or_add(f"backbone.block{i}.conv1.b", (cout,), init="zeros"),
                "conv2_w": s.get_or_add(f"backbone.block{i}.conv2.w", (27, cout, cout), fan_in=27 * cout),
                "conv2_b": s.get_or_add(f"backbone.block{i}.conv2.b", (cout,), init="zeros"),
            })
        self.text = init_text_encoder(s, len(self.vocab), d, h, config.max_words)
        widths = {1: c1, 2: c2, 3: c3}
        self.fusion = {}
        self.up = {}
        for src in (3, 2):
            cin = widths[src]
            if config.uses_tgp:
                kind = "scene" if src == 3 else "target"
                sigma = config.sigma_sce if src == 3 else config.sigma_tar
                self.fusion[src] = init_tgp(s, f"tgp.level{src}", cin, d, d, h, sigma, kind,
                                            simplified=config.fusion_mode == "simplified_tgp")
                up_in = cin
            elif config.fusion_mode == "attention":
                self.fusion[src] = (
                    init_attention(s, f"attn.level{src}.voxel_attn", cin, cin, d, h),
                    init_attention(s, f"attn.level{src}.cross_attn", cin, d, d, h),
                )
                up_in = cin
            else:
                up_in = cin + d
            self.up[src - 1] = (
                s.get_or_add(f"up.level{src - 1}.w", (8, up_in, widths[src - 1]), fan_in=up_in),
                s.get_or_add(f"up.level{src - 1}.b", (widths[src - 1],), init="zeros"),
            )
        self.cba = {}
        if config.addition_mode == "cba":
            for lvl in config.cba_levels:
                self.cba[lvl] = init_cba(s, f"cba.level{lvl}", widths[lvl], d, d, h, config.tau)
        self.head = init_head(s, c1, d, config.head_hidden)

    # -- stages -----------------------------------------------------------------
    def backbone(self, points, trace=None):
        t0 = time.perf_counter()
        base = voxelize(points, self.config.base_voxel_size)
        factor = int(round(level_voxel_size(0) / self.config.base_voxel_size))
        x = coarsen(base, factor) if factor > 1 else base
        feats = []
        for params in self.blocks:
            x = residual_block(x, params, submanifold=self.config.submanifold)
            feats.append(x)
        if trace is not None:
            for lvl, g in enumerate(feats, start=1):
                trace.counts[f"V{lvl}"] = len(g)
            trace.stage("backbone", len(feats[0]), 0, t0)
        return feats

    def _fuse(self, u, tokens, src, trace, out):
        cfg = self.config
        t0 = time.perf_counter()
        if cfg.uses_tgp:
            res = tgp_block(u, tokens, self.fusion[src], simplified=cfg.fusion_mode == "simplified_tgp",
                            k_min=cfg.k_min, fps_k=cfg.fps_k)
            out.tgp[src] = (u, res)
            trace.prune_traces.append(res.trace)
            trace.counts[f"UP{src}"] = len(res.grid)
            trace.stage(f"fuse{src}", len(u), res.flops, t0)
            return res.grid, res.tokens
        if cfg.fusion_mode == "attention":
            va, ca = self.fusion[src]
            fused = cross_attention(voxel_self_attention(u, va), tokens, ca)
            flops = len(u) * len(u) * va.q.shape[1] + len(u) * tokens.w * ca.q.shape[1]
            trace.counts[f"UP{src}"] = len(fused)
            trace.stage(f"fuse{src}", len(u), flops, t0)
            return fused, tokens
        fused = concat_fuse(u, tokens)
        trace.counts[f"UP{src}"] = len(fused)
        trace.stage(f"fuse{src}", len(u), 0, t0)
        return fused, tokens

    def _add(self, ug, v, tokens, lvl, trace, out):
        cfg = self.config
        t0 = time.perf_counter()
        flops = 0
        if cfg.addition_mode == "full":
            u = full_addition(ug, v)
        elif cfg.addition_mode == "cba" and lvl in self.cba:
            res = completion_based_addition(ug, v, tokens, self.cba[lvl])
            out.cba[lvl] = (v, res)
            trace.completions[lvl] = res.completions
            flops = len(v) * tokens.w * self.cba[lvl].cross_attn.q.shape[1]
            u = res.grid
        else:
            u = pruning_aware_addition(ug, v)
        trace.counts[f"U{lvl}"] = len(u)
        trace.stage(f"add{lvl}", len(u), flops, t0)
        return u

    def forward(self, points, description):
        cfg = self.config
        trace = ForwardTrace()
        out = ForwardOutput(None, trace)
        v1, v2, v3 = self.backbone(points, trace)
        out.backbone = {1: v1, 2: v2, 3: v3}
        t0 = time.perf_counter()
        tokens = encode_text(description, self.vocab, self.text)
        trace.stage("text", 0, 0, t0)
        u = v3
        trace.counts["U3"] = len(u)
        for src in (3, 2):
            lvl = src - 1
            fused, tokens = self._fuse(u, tokens, src, trace, out)
            t0 = time.perf_counter()
            w, b = self.up[lvl]
            ug = generative_upsample(fused, w, b)
            trace.counts[f"UG{lvl}"] = len(ug)
            trace.stage(f"up{lvl}", len(ug), 0, t0)
            u = self._add(ug, out.backbone[lvl], tokens, lvl, trace, out)
            out.stage_coords[f"UG{lvl}"] = ug.coords
            out.stage_coords[f"U{lvl}"] = u.coords
        t0 = time.perf_counter()
        out.u1 = u
        out.prediction = grounding_head(u, tokens, self.head, submanifold=cfg.submanifold)
        trace.stage("head", len(u), 0, t0)
        return out

    # -- losses -----------------------------------------------------------------
    def loss(self, sample, out=None):
        """Total loss and per-group values for one ``GroundingSample``."""
        cfg = self.config
        if out is None:
            out = self.forward(sample.points, sample.description)
        boxes = sample.boxes
        target = boxes[sample.target_idx]
        relevant = [boxes[i] for i in sample.relevant_idxs]
        pruning = []
        for src, (grid_in, res) in sorted(out.tgp.items(), reverse=True):
            if src == 3:
                mask = build_scene_supervision(boxes, grid_in, cfg.L)
            else:
                mask = build_target_supervision(target, relevant, grid_in, cfg.L)
            labels = mask.values[res.scores.logit_index]
            pruning.append(sigmoid_focal_loss(res.scores.logits, labels))
        completion = []
        for lvl, (v, res) in sorted(out.cba.items()):
            labels = assign_targets(v.coords, v.voxel_size, target, cfg.L_pos)
            completion.append(sigmoid_focal_loss(res.target.logits, labels))
        pred = out.prediction
        labels = assign_targets(pred.coords, pred.voxel_size, target, cfg.L_pos)
        cls = sigmoid_focal_loss(pred.logits, labels)
        pos = np.flatnonzero(labels)
        if pos.size:
            centers, sizes = pred.decode(pos)
            bbox = ad.mean(diou_loss_tensor(centers, sizes, target))
        else:
            bbox = Tensor(np.array(0.0))
        total, parts = total_loss(pruning, completion, [cls], [bbox], cfg.lambdas)
        return total, parts, out


@dataclass
class ForwardOutput:
    prediction: object
    trace: ForwardTrace
    backbone: dict = field(default_factory=dict)
    tgp: dict = field(default_factory=dict)
    cba: dict = field(default_factory=dict)
    stage_coords: dict = field(default_factory=dict)
    u1: SparseGrid | None = None


# -- functional entry points ------------------------------------------------

def backbone(points, model):
    return model.backbone(points)


def forward_baseline(points, description, model):
    if model.config.fusion_mode != "concat":
        raise ConfigError("forward_baseline needs fusion_mode=concat")
    out = model.forward(points, description)
    return out.prediction, out.trace


def forward_tsp3d(points, description, model):
    if not model.config.uses_tgp:
        raise ConfigError("forward_tsp3d needs fusion_mode tgp or simplified_tgp")
    out = model.forward(points, description)
    return out.prediction, out.trace, out


def baseline_config(**kw):
    """Baseline: concatenation fusion with full-coordinate addition."""
    return ModelConfig(fusion_mode="concat", addition_mode="full", cba_levels=(), **kw)


def infer(points, description, model):
    with ad.no_grad():
        out = model.forward(points, description)
        box = select_box(out.prediction)
    return box, out.trace


@dataclass
class TrainState:
    moments: AdamMoments = field(default_factory=AdamMoments)
    step: int = 0
    history: list = field(default_factory=list)


@dataclass
class LossReport:
    total: float
    parts: dict
    step: int


def train_step(batch, model, state, lr=None):
    """Mean total loss over ``batch``, one backward pass, one Adam update."""
    if not batch:
        raise ConfigError("empty batch")
    lr = model.config.lr_at(state.step) if lr is None else lr
    total = Tensor(np.array(0.0))
    parts = {}
    for sample in batch:
        try:
            loss, p, _ = model.loss(sample)
        except NumericError as exc:
            raise NumericError(f"sample {getattr(sample, 'sample_id', '?')}: {exc}", node=exc.node) from exc
        total = ad.add(total, ad.mul(loss, 1.0 / len(batch)))
        for k, v in p.items():
            parts[k] = parts.get(k, 0.0) + v / len(batch)
    try:
        backward(total, model.store)
    except NumericError as exc:
        raise NumericError(f"batch at step {state.step}: {exc}", node=exc.node) from exc
    state.step += 1
    adam_step(model.store, model.store.grads(), lr=lr, t=state.step, moments=state.moments)
    report = LossReport(float(total.data), parts, state.step)
    state.history.append(report.total)
    return report


def train(model, samples, steps, batch_size=1, state=None, log_every=0, logger=None):
    """Cycle through ``samples`` in order for ``steps`` Adam updates.

    Cycling resumes from ``state.step``, so training in chunks with one state
    visits samples in the same order as a single long call.
    """
    state = state or TrainState()
    n = len(samples)
    for i in range(steps):
        start = (state.step * batch_size) % n
        batch = [samples[(start + j) % n] for j in range(batch_size)]
        report = train_step(batch, model, state)
        if logger is not None and log_every and (i + 1) % log_every == 0:
            logger.info("step %d loss %.5f %s", report.step, report.total,
                        " ".join(f"{k}={v:.4f}" for k, v in report.parts.items()))
    return state
