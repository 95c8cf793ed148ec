import numpy as np
import pytest

from tsp3d import autodiff as ad
from tsp3d.errors import ConfigError, EmptyScene
from tsp3d.harness.scenes import TINY_SPEC, SceneSpec, generate_scene
from tsp3d.pipeline import (
    Model,
    ModelConfig,
    TrainState,
    backbone,
    baseline_config,
    forward_baseline,
    forward_tsp3d,
    infer,
    train,
    train_step,
)

SMALL = SceneSpec(max_objects=3, extent=1.5, points_per_object=300, floor_density=300.0)
STAGES = ("V1", "V2", "V3", "U3", "UP3", "UG2", "U2", "UP2", "UG1", "U1")


def small_config(**kw):
    return ModelConfig(channels=(8, 12, 16), d=8, heads=2, head_hidden=8, **kw)


@pytest.fixture(scope="module")
def scene():
    return generate_scene(3, SMALL)


def test_config_defaults_and_text_round_trip(tmp_path):
    cfg = ModelConfig()
    assert (cfg.sigma_sce, cfg.sigma_tar, cfg.tau, cfg.L, cfg.L_pos) == (0.7, 0.3, 0.15, 7, 3)
    assert cfg.lambdas == (1.0, 1.0, 1.0, 1.0) and cfg.cba_levels == (1,)
    odd = cfg.replace(cba_levels=(1, 2), submanifold=False, fusion_mode="tgp", lr=3e-4)
    odd.save(tmp_path / "c.cfg")
    assert ModelConfig.load(tmp_path / "c.cfg") == odd
    assert ModelConfig.from_text("# comment\n\nsigma_sce = 0.5  # inline\n").sigma_sce == 0.5


@pytest.mark.parametrize("text", [
    "colour=red\n",
    "sigma_sce\n",
    "sigma_sce=high\n",
    "tau=1.5\n",
    "levels=4\n",
    "fusion_mode=gated\n",
    "cba_levels=3\n",
    "L=6\n",
    "d=10\nheads=4\n",
])
def test_config_rejects_bad_files(text):
    with pytest.raises(ConfigError):
        ModelConfig.from_text(text)


def test_backbone_counts_follow_parent_mapping(scene):
    v1, v2, v3 = backbone(scene.points, Model(small_config()))
    assert len(v1) >= len(v2) >= len(v3) > 0
    cells = np.floor(scene.points[:, :3] / 0.01).astype(np.int64) // 4
    for grid in (v1, v2, v3):
        cells = np.unique(cells // 2, axis=0)
        assert grid.coord_set() == {tuple(c) for c in cells}


def test_single_point_scene_has_one_voxel_per_level():
    model = Model(small_config())
    levels = backbone(np.array([[0.31, 0.52, 0.07, 0.2, 0.4, 0.6]]), model)
    assert [len(g) for g in levels] == [1, 1, 1]
    with pytest.raises(EmptyScene):
        backbone(np.zeros((0, 6)), model)


def _stage_sets(out):
    return {k: {tuple(c) for c in v} for k, v in out.stage_coords.items()}


@pytest.mark.parametrize("fusion", ["simplified_tgp", "tgp"])
def test_no_prune_limit_matches_baseline(scene, fusion):
    base = Model(baseline_config(channels=(8, 12, 16), d=8, heads=2, head_hidden=8)).forward(
        scene.points, scene.description)
    cfg = small_config(fusion_mode=fusion, sigma_sce=0.0, sigma_tar=0.0, tau=0.0)
    full = Model(cfg).forward(scene.points, scene.description)
    assert _stage_sets(full) == _stage_sets(base)
    for key in STAGES:
        assert full.trace.counts[key] == base.trace.counts[key]


def test_trace_contract(scene):
    pred, trace, out = forward_tsp3d(scene.points, scene.description, Model(small_config()))
    assert set(STAGES) <= set(trace.counts)
    assert all(v >= 0 for v in trace.counts.values())
    assert trace.counts["UP3"] <= trace.counts["U3"] and trace.counts["UP2"] <= trace.counts["U2"]
    assert [s.name for s in trace.stages] == ["backbone", "text", "fuse3", "up2", "add2",
                                              "fuse2", "up1", "add1", "head"]
    assert len(trace.prune_traces) == 2 and set(trace.completions) == {1}
    assert len(pred) == trace.counts["U1"] and set(out.tgp) == {3, 2}


def test_baseline_never_prunes(scene):
    pred, trace = forward_baseline(scene.points, scene.description, Model(baseline_config()))
    assert trace.counts["UP3"] == trace.counts["U3"] and trace.counts["UP2"] == trace.counts["U2"]
    assert trace.counts["U1"] >= trace.counts["V1"] and trace.attention_flops == 0
    with pytest.raises(ConfigError):
        forward_baseline(scene.points, scene.description, Model(small_config()))
    with pytest.raises(ConfigError):
        forward_tsp3d(scene.points, scene.description, Model(baseline_config()))


def test_zero_weight_head_is_neutral(scene):
    model = Model(baseline_config(channels=(8, 12, 16), d=8, heads=2, head_hidden=8))
    w1, _ = model.head.cls.mlp.layers[-1]
    w1.data[:] = 0
    pred, _ = forward_baseline(scene.points, scene.description, model)
    np.testing.assert_array_equal(pred.objectness, 0.5)


def test_zero_lambdas_leave_params_unchanged(scene):
    model = Model(small_config(lambda1=0, lambda2=0, lambda3=0, lambda4=0))
    before = {n: model.store[n].data.copy() for n in model.store}
    report = train_step([scene], model, TrainState())
    assert report.total == 0.0
    assert all(np.array_equal(model.store[n].data, before[n]) for n in model.store)


def test_batch_loss_is_mean_of_samples(scene):
    other = generate_scene(4, SMALL)
    cfg = small_config()
    losses = [train_step([s], Model(cfg), TrainState()).total for s in (scene, other)]
    both = train_step([scene, other], Model(cfg), TrainState()).total
    assert both == pytest.approx(np.mean(losses), rel=1e-12)
    with pytest.raises(ConfigError):
        train_step([], Model(cfg), TrainState())


def test_repeated_steps_reduce_loss():
    sample = generate_scene(2, TINY_SPEC)
    state = train(Model(small_config()), [sample], steps=201)
    assert state.history[200] < state.history[0]


def test_training_is_bit_reproducible(scene):
    runs = [train(Model(small_config(seed=5)), [scene], steps=5).history for _ in range(2)]
    assert runs[0] == runs[1]


def test_infer_is_deterministic(scene):
    model = Model(small_config())
    a, trace = infer(scene.points, scene.description, model)
    b, _ = infer(scene.points, scene.description, model)
    assert a == b
    assert len(trace.prune_traces) == 2 and trace.completions
    assert not any(p.grad.any() for _, p in model.store.items())


def test_attention_fusion_counts_flops(scene):
    model = Model(small_config(fusion_mode="attention", addition_mode="pruning_aware", cba_levels=()))
    out = model.forward(scene.points, scene.description)
    assert out.trace.attention_flops > 0 and not out.tgp and not out.cba
    with ad.no_grad():
        loss, parts, _ = model.loss(scene, out)
    assert parts["pruning"] == 0.0 and parts["completion"] == 0.0 and np.isfinite(float(loss.data))


def test_learning_rate_schedules():
    cfg = ModelConfig(lr=1e-3, schedule_steps=100)
    assert cfg.lr_at(0) == 1e-3
    assert cfg.lr_at(50) == pytest.approx(0.5 * (1e-3 + 1e-5))
    assert cfg.lr_at(100) == pytest.approx(1e-5) and cfg.lr_at(500) == cfg.lr_at(100)
    lrs = [cfg.lr_at(t) for t in range(101)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert cfg.replace(lr_schedule="constant").lr_at(90) == 1e-3
    with pytest.raises(ConfigError):
        cfg.replace(lr_schedule="step")


def test_chunked_training_matches_one_call():
    samples = [generate_scene(k, SMALL) for k in range(3)]
    whole = train(Model(small_config()), samples, steps=5)
    chunked = TrainState()
    model = Model(small_config())
    train(model, samples, steps=2, state=chunked)
    train(model, samples, steps=3, state=chunked)
    assert chunked.history == whole.history
