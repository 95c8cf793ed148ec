"""Accuracy evaluation, stage profiling and the ablation driver."""
from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from .. import autodiff as ad
from ..errors import ConfigError, InvalidInput
from ..head import iou3d
from ..pipeline import Model, ModelConfig, TrainState, infer, train

PROFILE_HEADER = ("config", "stage", "voxels", "flops", "ms")
ABLATION_HEADER = ("config", "acc25", "acc50", "ms")
TIMING_REPEATS = 5

# Ablation grid: pruning on/off crossed with completion on/off
TABLE_ROWS = {
    "a": {"fusion_mode": "concat", "addition_mode": "pruning_aware", "cba_levels": ()},
    "b": {"fusion_mode": "simplified_tgp", "addition_mode": "pruning_aware", "cba_levels": ()},
    "c": {"fusion_mode": "concat", "addition_mode": "cba", "cba_levels": (1,)},
    "d": {"fusion_mode": "simplified_tgp", "addition_mode": "cba", "cba_levels": (1,)},
}


@dataclass
class EvalReport:
    acc_at_25: float
    acc_at_50: float
    ious: list = field(default_factory=list)
    mean_ms: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.acc_at_50 <= self.acc_at_25 <= 1.0):
            raise InvalidInput(f"inconsistent accuracies {self.acc_at_25}, {self.acc_at_50}")

    @classmethod
    def from_ious(cls, ious, mean_ms=0.0):
        ious = [float(v) for v in ious]
        if not ious:
            return cls(0.0, 0.0, [], mean_ms)
        arr = np.asarray(ious)
        return cls(float((arr >= 0.25).mean()), float((arr >= 0.5).mean()), ious, mean_ms)


def _model_predictor(model):
    def predict(sample):
        box, _ = infer(sample.points, sample.description, model)
        return box
    return predict


def evaluate(dataset, model=None, predict=None):
    """Per-sample IoU against the target box, thresholded at 0.25 and 0.5.

    ``predict`` maps a sample to a ``Box3D`` and overrides ``model``; the timed
    span covers prediction only.
    """
    if predict is None:
        if model is None:
            raise ConfigError("evaluate needs a model or a predictor")
        predict = _model_predictor(model)
    ious, times = [], []
    for sample in dataset:
        t0 = time.perf_counter()
        box = predict(sample)
        times.append((time.perf_counter() - t0) * 1e3)
        ious.append(iou3d(box, sample.target))
    return EvalReport.from_ious(ious, float(np.mean(times)) if times else 0.0)


def forward_ms(model, sample, repeats=TIMING_REPEATS):
    """Median wall time of ``repeats`` inference passes, in milliseconds."""
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        infer(sample.points, sample.description, model)
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


@dataclass
class ProfileRow:
    config: str
    stage: str
    voxels: float
    flops: float
    ms: float


def profile(dataset, models, repeats=TIMING_REPEATS):
    """Mean voxel count, attention FLOPs and median-of-``repeats`` time per stage.

    ``models`` maps a config label to a ``Model``.  Rows come out in model
    order, then stage order of the forward pass.
    """
    if not models:
        raise ConfigError("profile needs at least one config")
    rows = []
    for label, model in models.items():
        per_stage = {}
        order = []
        for sample in dataset:
            runs = []
            for _ in range(repeats):
                with ad.no_grad():
                    out = model.forward(sample.points, sample.description)
                runs.append(out.trace.stages)
            for i, st in enumerate(runs[0]):
                if st.name not in per_stage:
                    per_stage[st.name] = ([], [], [])
                    order.append(st.name)
                v, f, t = per_stage[st.name]
                v.append(st.voxels)
                f.append(st.flops)
                t.append(statistics.median(r[i].ms for r in runs))
        for name in order:
            v, f, t = per_stage[name]
            rows.append(ProfileRow(label, name, float(np.mean(v)), float(np.mean(f)), float(np.mean(t))))
    return rows


def rows_to_csv(rows, header):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([getattr(r, h) for h in header])
    return buf.getvalue()


@dataclass
class AblationRow:
    config: str
    acc25: float
    acc50: float
    ms: float


def run_ablation(configs, train_set, eval_set, steps, seed=0, batch_size=1, min_steps=1):
    """Train every config from the same seed on ``train_set`` and evaluate on ``eval_set``.

    ``configs`` maps a label to a ``ModelConfig`` or to a dict of overrides
    applied to the default config.
    """
    if steps < min_steps:
        raise ConfigError(f"training budget {steps} below minimum {min_steps}")
    rows, models = [], {}
    for label, cfg in configs.items():
        if isinstance(cfg, dict):
            cfg = ModelConfig(**cfg)
        model = Model(cfg.replace(seed=seed))
        train(model, train_set, steps, batch_size=batch_size, state=TrainState())
        report = evaluate(eval_set, model)
        rows.append(AblationRow(label, report.acc_at_25, report.acc_at_50, report.mean_ms))
        models[label] = model
    return rows, models
