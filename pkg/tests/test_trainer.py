from __future__ import annotations

import csv

import numpy as np
import pytest

from spherefm.datasets import SphereDataset, VMFComponent, default_means, gen_vmf_mixture
from spherefm.errors import ConfigError, EmptyDataset
from spherefm.trainer import (
    METHOD_BETA2,
    METHOD_EMA_DECAY,
    METHOD_LR,
    TrainConfig,
    TrainState,
    adamw_update,
    clip_grad_norm,
    load_training_checkpoint,
    next_batch,
    run_training,
)
from spherefm.velocitynet import NetSpec, load_checkpoint

SMALL = NetSpec(1, 3, hidden=(16, 16), time_feat_dim=8)


def _data(n=200, seed=0):
    comps = [VMFComponent(m, 20.0, 0.5) for m in default_means(2, 3)]
    return gen_vmf_mixture(n, 1, 3, np.sqrt(3.0), comps, seed)


def _params_bytes(path):
    net, _, extra = load_checkpoint(path)
    return net.params.tobytes() + net.ema_params.tobytes() + extra["adam_m"].tobytes() + extra["adam_v"].tobytes()


def test_method_defaults():
    cfg = TrainConfig()
    assert (cfg.lr, cfg.beta2, cfg.ema_decay) == (METHOD_LR, METHOD_BETA2, METHOD_EMA_DECAY) == (2e-4, 0.95, 0.9999)


def test_config_validation():
    for kw in ({"lr": 0.0}, {"beta2": 1.0}, {"batch_size": 0}, {"ema_decay": 1.5}):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)


def test_adamw_quadratic_converges():
    # minimise (p - 3)^2 from p = 0 with a 1-parameter stub
    cfg = TrainConfig(lr=0.05)
    p = np.zeros(1)
    state = TrainState.fresh(1, 0)
    losses = []
    for _ in range(200):
        losses.append(float((p[0] - 3.0) ** 2))
        adamw_update(p, 2.0 * (p - 3.0), state, cfg)
        state.step += 1
    final = float((p[0] - 3.0) ** 2)
    assert final < 1e-3 * losses[0]
    assert np.mean(losses[100:]) < np.mean(losses[:100])


def test_first_adam_step_is_lr_times_sign():
    cfg = TrainConfig(lr=0.1, eps=0.0)
    p = np.array([1.0, -2.0])
    state = TrainState.fresh(2, 0)
    adamw_update(p, np.array([0.3, -5.0]), state, cfg)
    np.testing.assert_allclose(p, [0.9, -1.9], rtol=1e-15)


def test_weight_decay_is_decoupled():
    cfg = TrainConfig(lr=0.1, weight_decay=0.5, eps=1e-300)
    p = np.array([2.0])
    state = TrainState.fresh(1, 0)
    adamw_update(p, np.array([0.0]), state, cfg)
    assert p[0] == pytest.approx(2.0 * (1 - 0.05))


def test_clip_zero_means_disabled():
    g = np.array([3.0, 4.0])
    out, norm = clip_grad_norm(g, 0)
    np.testing.assert_array_equal(out, g)
    assert norm == 5.0
    out, _ = clip_grad_norm(g, 1.0)
    np.testing.assert_allclose(out, [0.6, 0.8])
    out, _ = clip_grad_norm(g, None)
    np.testing.assert_array_equal(out, g)


def test_next_batch_covers_epoch_once():
    ds = _data(10)
    state = TrainState.fresh(1, 0)
    cfg = TrainConfig(batch_size=4)
    seen = np.concatenate([next_batch(ds, state, cfg) for _ in range(5)])
    assert sorted(seen[:10].tolist()) == list(range(10))
    assert state.epoch == 2 and state.cursor == 0


def test_empty_dataset(tmp_path):
    ds = SphereDataset(np.zeros((0, 1, 3)), np.zeros(0, np.int32), 1.0, 1)
    with pytest.raises(EmptyDataset):
        run_training(ds, TrainConfig(total_steps=1), tmp_path)
    assert not (tmp_path / "loss.csv").exists()


def test_dims_mismatch(tmp_path):
    with pytest.raises(ConfigError):
        run_training(_data(), TrainConfig(total_steps=1), tmp_path, NetSpec(2, 3))


def test_deterministic_and_finite_losses(tmp_path):
    cfg = TrainConfig(total_steps=60, batch_size=32, lr=1e-3, checkpoint_every=0, log_every=10)
    a = run_training(_data(), cfg, tmp_path / "a", SMALL)
    b = run_training(_data(), cfg, tmp_path / "b", SMALL)
    assert a.checkpoint.read_bytes() == b.checkpoint.read_bytes()
    with open(a.loss_csv) as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["step"]) for r in rows] == list(range(10, 61, 10))
    assert all(np.isfinite(float(r["loss"])) for r in rows)
    assert np.mean(a.losses[-20:]) < np.mean(a.losses[:20])


def test_resume_is_bit_exact(tmp_path):
    ds = _data(100)
    full_cfg = TrainConfig(total_steps=40, batch_size=24, lr=1e-3, checkpoint_every=15, log_every=5)
    full = run_training(ds, full_cfg, tmp_path / "full", SMALL)
    # stop at 30 (mid-epoch), then resume to 40
    part = run_training(ds, TrainConfig(**{**full_cfg.__dict__, "total_steps": 30}), tmp_path / "part", SMALL)
    resumed = run_training(ds, full_cfg, tmp_path / "part", resume=part.checkpoint)
    assert _params_bytes(resumed.checkpoint) == _params_bytes(full.checkpoint)
    net, state, meta = load_training_checkpoint(resumed.checkpoint)
    assert state.step == 40 and meta["step"] == 40
    # intermediate checkpoint from the full run resumes identically too
    again = run_training(ds, full_cfg, tmp_path / "again", resume=tmp_path / "full" / "checkpoint_00000015.sfm")
    assert _params_bytes(again.checkpoint) == _params_bytes(full.checkpoint)
