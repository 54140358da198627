"""Checkpoint round trips."""

import json

import numpy as np
import pytest

from corrflow.checkpoint import load_checkpoint, save_checkpoint
from corrflow.errors import MissingInputError, SchemaError
from corrflow.flow import IdentityNoise
from corrflow.inference import GripperStats
from corrflow.seeds import component_rng
from corrflow.training import TrainConfig, build_stack, train
from corrflow.world import default_world_spec, generate_demos


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    ds = generate_demos(default_world_spec()[:2], 2, root_seed=77)
    cfg = TrainConfig(steps=12, batch_size=8, hidden=16, encoder_features=22,
                      fusion_width=8, fusion_stage_width=4, val_fraction=0.0)
    stack = build_stack(ds, cfg, root_seed=77)
    train(stack, ds, cfg, root_seed=77)
    stats = GripperStats(gripper_dims=ds.layout.gripper_dims).fit(ds)
    path = tmp_path_factory.mktemp("ckpt") / "stack.ckpt"
    save_checkpoint(path, stack, gripper_stats=stats, config=cfg, root_seed=77)
    return stack, stats, cfg, path


def test_roundtrip_restores_arrays_exactly(trained):
    stack, stats, cfg, path = trained
    bundle = load_checkpoint(path)
    other = bundle.stack
    assert np.array_equal(other.normalizer.mu_, stack.normalizer.mu_)
    assert np.array_equal(other.normalizer.sigma_, stack.normalizer.sigma_)
    assert np.array_equal(other.covariance.sigma_, stack.covariance.sigma_)
    assert np.array_equal(other.covariance.chol_, stack.covariance.chol_)
    for name in stack.model.params:
        assert np.array_equal(other.model.params[name], stack.model.params[name])
    assert np.array_equal(other.stage_head.weight, stack.stage_head.weight)
    assert np.array_equal(other.encoder.proj, stack.encoder.proj)
    assert other.layout == stack.layout
    assert bundle.root_seed == 77
    assert bundle.config == cfg
    assert set(other.tasks) == set(stack.tasks)


def test_roundtrip_preserves_behavior(trained):
    stack, stats, cfg, path = trained
    bundle = load_checkpoint(path)
    obs = np.linspace(-1.0, 1.0, 10)
    a = stack.context_for(obs, 0, 1)
    b = bundle.stack.context_for(obs, 0, 1)
    assert np.array_equal(a, b)
    eps = stack.noise.sample(component_rng(0, "noise"))
    eps2 = bundle.stack.noise.sample(component_rng(0, "noise"))
    assert np.array_equal(eps, eps2)
    v1 = stack.model.predict(eps, 0.5, a[None])
    v2 = bundle.stack.model.predict(eps2, 0.5, b[None])
    assert np.array_equal(v1, v2)


def test_gripper_stats_roundtrip(trained):
    stack, stats, cfg, path = trained
    loaded = load_checkpoint(path).gripper_stats
    assert loaded.gripper_dims == stats.gripper_dims
    assert np.array_equal(loaded.closed_threshold_, stats.closed_threshold_)
    assert np.array_equal(loaded.open_value_, stats.open_value_)
    assert set(loaded.table_) == set(stats.table_)
    for key in stats.table_:
        assert np.array_equal(loaded.table_[key], stats.table_[key])


def test_identity_noise_kind_roundtrip(tmp_path):
    ds = generate_demos(default_world_spec()[:1], 2, root_seed=5)
    cfg = TrainConfig(steps=1, hidden=8, encoder_features=6, fusion_width=8,
                      fusion_stage_width=4, noise="identity", val_fraction=0.0)
    stack = build_stack(ds, cfg, root_seed=5)
    path = tmp_path / "id.ckpt"
    save_checkpoint(path, stack)
    bundle = load_checkpoint(path)
    assert isinstance(bundle.stack.noise, IdentityNoise)
    assert bundle.config is None and bundle.gripper_stats is None


def test_missing_and_malformed_files(tmp_path, trained):
    with pytest.raises(MissingInputError):
        load_checkpoint(tmp_path / "absent.ckpt")
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not json\n")
    with pytest.raises(SchemaError):
        load_checkpoint(bad)
    wrong = tmp_path / "wrong.ckpt"
    wrong.write_bytes(json.dumps({"format": "other"}).encode() + b"\n")
    with pytest.raises(SchemaError):
        load_checkpoint(wrong)
    _, _, _, path = trained
    data = path.read_bytes()
    truncated = tmp_path / "trunc.ckpt"
    truncated.write_bytes(data[:-16])
    with pytest.raises(SchemaError):
        load_checkpoint(truncated)


def test_engine_builds_from_bundle(trained):
    stack, stats, cfg, path = trained
    bundle = load_checkpoint(path)
    eng = bundle.build_engine()
    assert eng.gripper_stats is not None
    task = default_world_spec()[0]
    eng.begin_episode(task, component_rng(3, "rollout", 0))
    plan = eng.plan(np.zeros(10))
    assert np.all(np.isfinite(plan))
