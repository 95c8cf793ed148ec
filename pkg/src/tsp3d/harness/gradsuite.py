"""Finite-difference check of every parameter tensor of the full model loss."""
from __future__ import annotations

from ..errors import GenerationError
from ..params import grad_check
from ..pipeline import Model, ModelConfig
from ..sparse import coarsen, voxelize
from .scenes import TINY_SPEC, generate_scene

MAX_VOXELS = 200


def tiny_scene(seed, max_voxels=MAX_VOXELS, tries=100):
    """First scene from ``seed`` onward whose 4 cm grid has at most ``max_voxels`` cells."""
    for s in range(seed, seed + tries):
        sample = generate_scene(s, TINY_SPEC)
        if len(coarsen(voxelize(sample.points), 4)) <= max_voxels:
            return sample
    raise GenerationError(f"no scene with <= {max_voxels} voxels in seeds {seed}..{seed + tries - 1}")


def gradient_suite(seed=1, config=None, eps=1e-5, max_entries=16):
    """Grad-check ``total_loss`` of one forward pass on a tiny scene.

    The check uses every parameter tensor the forward pass touches; tensors of
    unused branches are skipped.
    """
    config = config or ModelConfig(seed=seed)
    sample = tiny_scene(seed)
    model = Model(config)

    def fn():
        loss, _, _ = model.loss(sample)
        return loss

    return grad_check(fn, model.store, eps=eps, max_entries=max_entries, seed=seed), sample, model
