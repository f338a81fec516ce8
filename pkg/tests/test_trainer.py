import math
import os

import numpy as np
import pandas as pd
import pytest

from src.data import generate_synthetic, stack_batch
from src.exceptions import ConfigError, ConfigMismatchError, DataError, NumericError
from src.model import ModelConfig, build_model
from src.tensor import Tensor, make_rng
from src.trainer import (
    AdamW,
    AdamWState,
    TrainConfig,
    Trainer,
    adamw_step,
    clip_grad_norm,
    evaluate,
    load_model,
)


def reference_adamw(theta, curvature, cfg, steps):
    """Scalar AdamW on f = sum(a_i theta_i^2) / 2"""
    theta = list(theta)
    m = [0.0] * len(theta)
    v = [0.0] * len(theta)
    b1, b2 = cfg.betas
    for t in range(1, steps + 1):
        for i, a in enumerate(curvature):
            g = a * theta[i]
            theta[i] -= cfg.lr * cfg.weight_decay * theta[i]
            m[i] = b1 * m[i] + (1 - b1) * g
            v[i] = b2 * v[i] + (1 - b2) * g * g
            m_hat = m[i] / (1 - b1 ** t)
            v_hat = v[i] / (1 - b2 ** t)
            theta[i] -= cfg.lr * m_hat / (math.sqrt(v_hat) + cfg.eps)
    return theta


def test_adamw_matches_scalar_reference():
    cfg = TrainConfig(lr=1e-2, weight_decay=1e-2)
    curvature = np.array([1.0, 3.0, 0.5])
    theta = np.array([1.0, -2.0, 0.5])
    state = AdamWState()
    for _ in range(100):
        adamw_step({"theta": theta}, {"theta": curvature * theta}, state, cfg)
    assert state.step == 100
    np.testing.assert_allclose(theta, reference_adamw([1.0, -2.0, 0.5], curvature, cfg, 100), atol=1e-6)


def test_first_step_moves_by_learning_rate():
    cfg = TrainConfig(lr=1e-4, weight_decay=0.0)
    theta = np.array([1.0])
    adamw_step({"t": theta}, {"t": theta.copy()}, AdamWState(), cfg)
    assert 1.0 - theta[0] == pytest.approx(1e-4, rel=1e-6)


def test_zero_gradient_only_decays():
    cfg = TrainConfig(lr=0.1, weight_decay=0.5)
    theta = np.array([2.0])
    state = AdamWState()
    for _ in range(3):
        adamw_step({"t": theta}, {"t": None}, state, cfg)
    assert theta[0] == pytest.approx(2.0 * (1 - 0.05) ** 3)


def test_zero_gradient_without_decay_leaves_parameters():
    theta = np.array([1.5, -0.5])
    adamw_step({"t": theta}, {"t": np.zeros(2)}, AdamWState(), TrainConfig(weight_decay=0.0))
    np.testing.assert_array_equal(theta, [1.5, -0.5])


def test_non_finite_gradient_names_the_parameter():
    with pytest.raises(NumericError, match="decoder.weight"):
        adamw_step({"decoder.weight": np.ones(2)}, {"decoder.weight": np.array([1.0, np.nan])}, AdamWState(), TrainConfig())


def test_moments_follow_parameter_dtype():
    theta = np.ones(3, dtype=np.float32)
    state = AdamWState()
    adamw_step({"p": theta}, {"p": np.ones(3, dtype=np.float32)}, state, TrainConfig())
    assert theta.dtype == state.m["p"].dtype == state.v["p"].dtype == np.float32


def test_clip_grad_norm_rescales_to_max_norm():
    a = Tensor(np.zeros(2), requires_grad=True)
    b = Tensor(np.zeros(1), requires_grad=True)
    a.grad = np.array([3.0, 0.0])
    b.grad = np.array([4.0])
    assert clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
    assert math.sqrt(np.sum(a.grad ** 2) + np.sum(b.grad ** 2)) == pytest.approx(1.0, rel=1e-5)
    assert clip_grad_norm([a, b], 10.0) == pytest.approx(1.0, rel=1e-5)


@pytest.mark.parametrize(
    "overrides,key",
    [({"lr": 0.0}, "lr"), ({"batch_size": 0}, "batch_size"), ({"betas": (0.9, 1.0)}, "betas"), ({"grad_clip": -1.0}, "grad_clip")],
)
def test_train_config_validation(overrides, key):
    with pytest.raises(ConfigError) as err:
        TrainConfig(**overrides).validate()
    assert err.value.key == key


def test_train_config_dict_roundtrip():
    cfg = TrainConfig(epochs=5, betas=(0.8, 0.99))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"momentum": 0.9})


def test_recipe_defaults():
    cfg = TrainConfig()
    assert (cfg.lr, cfg.weight_decay, cfg.batch_size, cfg.epochs, cfg.grad_clip) == (1e-4, 1e-4, 8, 200, 5.0)


def _trainer(micro_config, run_dir=None, **overrides):
    values = dict(lr=1e-3, epochs=2, batch_size=4, seed=0, prefetch=1)
    values.update(overrides)
    return Trainer(build_model(micro_config, seed=0), TrainConfig(**values), run_dir=run_dir, progress=False)


def test_fit_records_one_history_row_per_epoch(micro_config, synthetic_samples, tmp_path):
    trainer = _trainer(micro_config, run_dir=str(tmp_path))
    before = trainer.model.state_dict()
    history = trainer.fit(synthetic_samples, synthetic_samples[:2])
    assert [row["epoch"] for row in history] == [1, 2]
    assert all(np.isfinite(row["loss"]) for row in history)
    assert 0.0 <= history[-1]["val_dsc"] <= 1.0
    assert trainer.step == 4
    after = trainer.model.state_dict()
    assert any(not np.array_equal(before[k], after[k]) for k in before)
    assert {"last.ckpt", "best.ckpt", "history.csv"} <= set(os.listdir(tmp_path))
    frame = pd.read_csv(tmp_path / "history.csv")
    assert list(frame.columns) == ["epoch", "loss", "val_dsc", "val_iou", "val_se", "val_sp", "val_acc"]


def test_training_is_deterministic(micro_config, synthetic_samples):
    a = _trainer(micro_config)
    b = _trainer(micro_config)
    a.fit(synthetic_samples)
    b.fit(synthetic_samples)
    assert a.step_losses == b.step_losses
    sa, sb = a.model.state_dict(), b.model.state_dict()
    assert all(np.array_equal(sa[k], sb[k]) for k in sa)


def test_prefetching_matches_synchronous_batches(micro_config, synthetic_samples):
    sync = _trainer(micro_config, epochs=1)
    ahead = _trainer(micro_config, epochs=1, deterministic=False, prefetch=2)
    sync.fit(synthetic_samples)
    ahead.fit(synthetic_samples)
    assert sync.step_losses == ahead.step_losses


def test_mid_epoch_resume_reproduces_uninterrupted_run(micro_config, synthetic_samples, tmp_path):
    straight = _trainer(micro_config)
    straight.fit(synthetic_samples)

    first = _trainer(micro_config)
    first.fit(synthetic_samples, max_steps=1)
    assert first.batch_cursor == 1 and first.epoch == 0
    path = str(tmp_path / "mid.ckpt")
    first.save_checkpoint(path)

    resumed = _trainer(micro_config)
    resumed.load_checkpoint(path)
    resumed.fit(synthetic_samples)

    assert resumed.step == straight.step
    assert resumed.step_losses == straight.step_losses
    sa, sb = straight.model.state_dict(), resumed.model.state_dict()
    assert all(np.array_equal(sa[k], sb[k]) for k in sa)
    assert [r["loss"] for r in resumed.history] == [r["loss"] for r in straight.history]


@pytest.mark.parametrize("stop", [1, 3])
def test_resume_with_prefetch_reproduces_uninterrupted_run(micro_config, synthetic_samples, tmp_path, stop):
    overrides = dict(deterministic=False, prefetch=2, batch_size=2)
    straight = _trainer(micro_config, **overrides)
    straight.fit(synthetic_samples)

    first = _trainer(micro_config, **overrides)
    first.fit(synthetic_samples, max_steps=stop)
    assert first.batch_cursor > 0
    path = str(tmp_path / "ahead.ckpt")
    first.save_checkpoint(path)

    resumed = _trainer(micro_config, **overrides)
    resumed.load_checkpoint(path)
    resumed.fit(synthetic_samples)

    assert resumed.step_losses == straight.step_losses
    sa, sb = straight.model.state_dict(), resumed.model.state_dict()
    assert all(np.array_equal(sa[k], sb[k]) for k in sa)

    # continuing in-process after the stop follows the same trajectory
    first.fit(synthetic_samples)
    assert first.step_losses == straight.step_losses


def test_resume_into_other_architecture_is_rejected(micro_config, synthetic_samples, tmp_path):
    trainer = _trainer(micro_config, epochs=1)
    trainer.fit(synthetic_samples, max_steps=1)
    path = str(tmp_path / "m.ckpt")
    trainer.save_checkpoint(path)
    other_cfg = ModelConfig.from_dict(dict(micro_config.to_dict(), embed_dim=12))
    other = Trainer(build_model(other_cfg, seed=0), TrainConfig(), progress=False)
    with pytest.raises(ConfigMismatchError):
        other.load_checkpoint(path)


def test_non_finite_loss_aborts(micro_config, synthetic_samples):
    trainer = _trainer(micro_config)
    trainer.model.head.classifier.bias.data[:] = np.nan
    with pytest.raises(NumericError):
        trainer.fit(synthetic_samples)


def test_empty_training_set_raises(micro_config):
    with pytest.raises(DataError):
        _trainer(micro_config).fit([])


def test_evaluate_reports_every_image_without_training(micro_config, synthetic_samples):
    model = build_model(micro_config, seed=0)
    before = model.state_dict()
    result = evaluate(model, synthetic_samples, batch_size=3)
    assert result.ids == [s.id for s in synthetic_samples]
    assert len(result.reports) == len(synthetic_samples)
    assert set(result.summary) >= {"dsc", "iou", "se", "sp", "acc", "dsc_std"}
    assert list(result.frame()["id"])[-2:] == ["mean", "std"]
    after = model.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_load_model_restores_predictions(micro_config, synthetic_samples, tmp_path):
    trainer = _trainer(micro_config, epochs=1)
    trainer.fit(synthetic_samples)
    path = str(tmp_path / "final.ckpt")
    trainer.save_checkpoint(path)
    restored = load_model(path, micro_config.to_dict())
    a = evaluate(trainer.model, synthetic_samples[:2]).summary
    b = evaluate(restored, synthetic_samples[:2]).summary
    assert a == b


def test_optimizer_wraps_named_parameters(micro_config):
    model = build_model(micro_config, seed=0)
    optimizer = AdamW(model.named_parameters(), TrainConfig())
    assert set(optimizer.params) == set(model.state_dict())


@pytest.mark.slow
def test_tiny_profile_overfits_synthetic_lesions():
    samples = generate_synthetic(8, 64, make_rng(0))
    model = build_model(ModelConfig.from_profile("tiny"), seed=0)
    untrained = evaluate(model, samples).summary["dsc"]
    trainer = Trainer(model, TrainConfig(lr=1e-3, epochs=200, batch_size=8, seed=0), progress=False)
    trainer.fit(samples)
    assert trainer.step == 200
    trained = evaluate(model, samples).summary["dsc"]
    assert untrained < 0.7
    assert trained >= 0.95
    losses = np.asarray(trainer.step_losses)
    # consecutive 20-step windows from step 50 on, the last one ending at the final step
    windows = [losses[start : start + 20].mean() for start in range(50, len(losses) - 20, 20)]
    windows.append(losses[-20:].mean())
    assert len(windows) >= 7
    assert all(later <= earlier for earlier, later in zip(windows, windows[1:])), windows


def test_loss_falls_when_overfitting_one_sample(micro_config, synthetic_samples):
    trainer = _trainer(micro_config, lr=3e-3)
    images, masks = stack_batch(synthetic_samples[:1])
    losses = [trainer.train_step(images, masks) for _ in range(15)]
    assert losses[-1] < losses[0]
