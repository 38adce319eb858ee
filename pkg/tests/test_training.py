import math

import numpy as np
import pytest

from resnext_mtl.container import ContainerError
from resnext_mtl.data import AugmentPolicy, build_dataset, load_tables
from resnext_mtl.model import CLASSIFICATION, REGRESSION, ExtractorConfig, StageConfig, TaskSpec, build_model
from resnext_mtl.nn import Rng
from resnext_mtl.synth import SynthConfig, write_csvs
from resnext_mtl.training import (
    AdamState,
    Trainer,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    load_checkpoint,
    lr_at,
    pretrain_single_task,
    save_checkpoint,
    train,
    train_joint,
)

SMALL = ExtractorConfig(
    in_features=8, stem_channels=8, stages=(StageConfig(1, 8, 2),), cardinality=2, bottleneck_width=2
)
TASKS = (
    TaskSpec("direction", CLASSIFICATION, adapter_dim=4),
    TaskSpec("log_return", REGRESSION, alpha=50.0, adapter_dim=4),
)


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    write_csvs(SynthConfig(n_days=700, window=8, seed=1), d)
    prices, macro = load_tables(d / "prices.csv", d / "macro.csv")
    return build_dataset(prices, macro, TASKS, window=8, slack=2)


def cfg(**kw):
    base = dict(batch_size=32, pretrain_epochs=1, joint_epochs=2, augment=AugmentPolicy(crop_slack=2), seed=3)
    base.update(kw)
    return TrainConfig(**base)


def fresh(seed=3):
    return build_model(SMALL, TASKS, Rng(seed))


def same_params(a, b):
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


# -- optimiser and schedule -------------------------------------------------


def test_adam_first_step_example():
    p = {"w": np.array([1.0])}
    st = AdamState.zeros(p)
    adam_step(p, {"w": np.array([2.0])}, st, 1e-3)
    assert p["w"][0] == pytest.approx(1.0 - 1e-3 * 2.0 / (2.0 + 1e-8), abs=1e-15)
    assert st.t == 1


def test_adam_zero_grad_is_noop():
    p = {"w": np.array([0.3, -2.0])}
    st = AdamState.zeros(p)
    adam_step(p, {"w": np.zeros(2)}, st, 1e-2)
    assert p["w"].tolist() == [0.3, -2.0]


def test_adam_first_step_is_lr_sign(gen):
    g = gen.standard_normal(50) * 10
    p = {"w": np.zeros(50)}
    adam_step(p, {"w": g}, AdamState.zeros(p), 1e-3)
    np.testing.assert_allclose(p["w"], -1e-3 * np.sign(g), rtol=1e-6)


def test_adam_key_mismatch():
    p = {"w": np.zeros(2)}
    with pytest.raises(KeyError):
        adam_step(p, {"v": np.zeros(2)}, AdamState.zeros(p), 1e-3)


def test_lr_schedule_examples():
    c = TrainConfig()
    assert lr_at(0, c) == 1e-3
    assert lr_at(9, c) == 1e-3
    assert lr_at(10, c) == 5e-4
    assert lr_at(25, c) == pytest.approx(2.5e-4, abs=1e-18)
    with pytest.raises(ValueError):
        lr_at(-1, c)


@pytest.mark.parametrize("kw", [dict(base_lr=0), dict(decay_factor=1.5), dict(batch_size=0), dict(joint_epochs=-1)])
def test_train_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


# -- phases -------------------------------------------------------------------


def test_pretrain_isolates_other_task(small_data):
    net = fresh()
    init = {k: v.copy() for k, v in net.params.items()}
    pretrain_single_task(net, small_data, "direction", cfg())
    for k in net.task_param_names("log_return"):
        assert np.array_equal(net.params[k], init[k]), k
    assert not np.array_equal(net.params["stem.w"], init["stem.w"])
    assert not np.array_equal(net.params["task.direction.head.w"], init["task.direction.head.w"])


def test_zero_epochs_leave_net_unchanged(small_data):
    net = fresh()
    init = {k: v.copy() for k, v in net.params.items()}
    pretrain_single_task(net, small_data, "direction", cfg(pretrain_epochs=0))
    train_joint(net, small_data, cfg(joint_epochs=0))
    assert same_params(net.params, init)


def test_masked_task_inert_during_joint(small_data):
    net = fresh()
    init = {k: v.copy() for k, v in net.params.items()}
    train_joint(net, small_data, cfg(alphas={"direction": 1.0, "log_return": 0.0}))
    for k in net.task_param_names("log_return"):
        assert np.array_equal(net.params[k], init[k])


def test_joint_with_onehot_alpha_equals_single_task(small_data):
    a, b = fresh(), fresh()
    _, log_a = train_joint(a, small_data, cfg(joint_epochs=2, alphas={"direction": 1.0, "log_return": 0.0}))
    _, log_b = pretrain_single_task(b, small_data, "direction", cfg(pretrain_epochs=2))
    assert same_params(a.params, b.params)
    assert [e["train_loss"] for e in log_a] == [e["train_loss"] for e in log_b]


def test_same_seed_same_run(small_data):
    a, b = fresh(), fresh()
    _, la = train(a, small_data, cfg())
    _, lb = train(b, small_data, cfg())
    assert same_params(a.params, b.params) and la == lb
    c = fresh()
    train(c, small_data, cfg(seed=4))
    assert not same_params(a.params, c.params)


def test_history_shape(small_data):
    _, hist = train(fresh(), small_data, cfg())
    assert [(e["phase"], e["task"], e["epoch"]) for e in hist] == [
        ("pretrain", "direction", 0),
        ("pretrain", "log_return", 0),
        ("joint", None, 0),
        ("joint", None, 1),
    ]
    assert all(math.isfinite(e["train_loss"]) and "val_loss" in e for e in hist)


def test_training_loss_falls_on_planted_signal(small_data):
    _, hist = pretrain_single_task(fresh(), small_data, "direction", cfg(pretrain_epochs=6, batch_size=16))
    assert hist[-1]["train_loss"] < hist[0]["train_loss"]


def test_divergence_guard(small_data):
    net = fresh()
    net.params["task.log_return.head.b"][...] = np.inf
    with pytest.raises(TrainingDiverged, match="epoch 0 batch 0"):
        train_joint(net, small_data, cfg())


def test_crop_slack_must_fit_dataset(small_data):
    with pytest.raises(ValueError, match="crop_slack"):
        Trainer(fresh(), small_data, cfg(augment=AugmentPolicy(crop_slack=5)))


# -- checkpoints ---------------------------------------------------------------


def test_checkpoint_roundtrip(small_data, tmp_path):
    tr = Trainer(fresh(), small_data, cfg())
    tr.run(max_epochs=3)
    ck = tr.checkpoint({"seed": 3})
    save_checkpoint(tmp_path / "c.gcmt", ck)
    back = load_checkpoint(tmp_path / "c.gcmt")
    assert same_params(back.params, ck.params)
    assert same_params(back.adam.m, ck.adam.m) and same_params(back.adam.v, ck.adam.v)
    assert (back.phase_idx, back.epoch, back.adam.t) == (ck.phase_idx, ck.epoch, ck.adam.t)
    assert back.rng_state == ck.rng_state and back.history == ck.history and back.meta == {"seed": 3}


@pytest.mark.parametrize("split_at", [1, 2, 3])
def test_resume_equals_uninterrupted(small_data, tmp_path, split_at):
    full = Trainer(fresh(), small_data, cfg())
    full.run()
    part = Trainer(fresh(), small_data, cfg())
    part.run(max_epochs=split_at)
    save_checkpoint(tmp_path / "c.gcmt", part.checkpoint())
    resumed = Trainer.resume(load_checkpoint(tmp_path / "c.gcmt"), small_data)
    resumed.run()
    assert same_params(resumed.net.params, full.net.params)
    assert resumed.history == full.history
    save_checkpoint(tmp_path / "a.gcmt", full.checkpoint())
    save_checkpoint(tmp_path / "b.gcmt", resumed.checkpoint())
    assert (tmp_path / "a.gcmt").read_bytes() == (tmp_path / "b.gcmt").read_bytes()


def test_corrupted_checkpoint_rejected(small_data, tmp_path):
    tr = Trainer(fresh(), small_data, cfg())
    save_checkpoint(tmp_path / "c.gcmt", tr.checkpoint())
    raw = bytearray((tmp_path / "c.gcmt").read_bytes())
    raw[len(raw) // 2] ^= 0x01
    (tmp_path / "bad.gcmt").write_bytes(bytes(raw))
    with pytest.raises(ContainerError, match="checksum"):
        load_checkpoint(tmp_path / "bad.gcmt")
    (tmp_path / "short.gcmt").write_bytes(bytes(raw[:20]))
    with pytest.raises(ContainerError):
        load_checkpoint(tmp_path / "short.gcmt")
