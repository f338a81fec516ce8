"""
Fast structural checks run by the `selftest` command
"""
import logging
import os
import tempfile
from typing import Callable, Dict, List, Tuple

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .deform_conv import DeformConv2d
from .functional import conv2d
from .gradcheck import check_gradients
from .metrics import compute_metrics
from .model import ModelConfig, build_model
from .swin import WindowAttention, window_partition, window_reverse
from .tensor import Tensor, default_dtype, make_rng, no_grad
from .trainer import AdamWState, TrainConfig, adamw_step

logger = logging.getLogger(__name__)

MICRO_CONFIG = dict(input_size=32, embed_dim=8, heads=(1, 1, 2, 2), window=4, profile="custom")


def _check(condition: bool, message: str) -> None:
    if not condition:
        raise AssertionError(message)


def check_window_roundtrip() -> None:
    x = Tensor(make_rng(0).normal(size=(2, 8, 8, 3)))
    back = window_reverse(window_partition(x, 4), 4, 8, 8)
    _check(np.array_equal(back.data, x.data), "window_reverse(window_partition(x)) != x")


def check_attention_rows() -> None:
    rng = make_rng(1)
    with default_dtype(np.float64), no_grad():
        attn = WindowAttention(8, 2, 4, rng)
        _, weights = attn(Tensor(rng.normal(size=(3, 16, 8))), return_attention=True)
    _check(np.abs(weights.data.sum(axis=-1) - 1.0).max() < 1e-6, "attention rows do not sum to 1")


def check_deform_zero_offsets() -> None:
    rng = make_rng(2)
    with default_dtype(np.float64), no_grad():
        layer = DeformConv2d(4, 5, rng)
        x = Tensor(rng.normal(size=(1, 4, 8, 8)))
        diff = np.abs(layer(x).data - layer.as_plain_conv(x).data).max()
    _check(diff < 1e-5, f"zero-offset deformable conv differs from conv by {diff:.2e}")


def check_conv_gradients() -> None:
    rng = make_rng(3)
    with default_dtype(np.float64):
        x = Tensor(rng.normal(size=(1, 2, 5, 5)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
        report = check_gradients(lambda: (conv2d(x, w, padding=1) ** 2).sum(), [x, w], ["x", "weight"])
    _check(report.passed, f"conv2d gradient error {report.max_error:.2e} at {report.worst()}")


def check_metrics_conventions() -> None:
    empty = np.zeros((4, 4))
    report = compute_metrics(empty, empty)
    _check(report.dsc == report.iou == report.se == 1.0, "empty prediction on empty truth must score 1")
    rng = make_rng(4)
    for _ in range(20):
        r = compute_metrics(rng.random((8, 8)), rng.integers(0, 2, (8, 8)))
        _check(r.dsc >= r.iou, "DSC below IoU")


def check_model_shapes() -> None:
    cfg = ModelConfig.from_profile(**MICRO_CONFIG)
    model = build_model(cfg, seed=0)
    with no_grad():
        out = model(Tensor(make_rng(5).random((1, 3, 32, 32)).astype(np.float32)))
    _check(out.shape == (1, 1, 32, 32), f"model output shape {out.shape}")
    _check(bool(((out.data > 0) & (out.data < 1)).all()), "probabilities outside (0, 1)")


def check_checkpoint_roundtrip() -> None:
    params = {"w": make_rng(6).normal(size=(3, 4)).astype(np.float32)}
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "check.ckpt")
        save_checkpoint(Checkpoint(params=params, model_config={"embed_dim": 8}), path)
        loaded = load_checkpoint(path)
    _check(np.array_equal(loaded.params["w"], params["w"]), "checkpoint roundtrip changed parameters")


def check_adamw_step() -> None:
    theta = np.array([1.0])
    cfg = TrainConfig(lr=1e-3, weight_decay=0.0)
    adamw_step({"theta": theta}, {"theta": theta.copy()}, AdamWState(), cfg)
    _check(abs((1.0 - theta[0]) - cfg.lr) < 1e-6, f"first AdamW step moved theta by {1.0 - theta[0]}")


CHECKS: List[Tuple[str, Callable[[], None]]] = [
    ("window partition roundtrip", check_window_roundtrip),
    ("attention rows sum to one", check_attention_rows),
    ("deformable conv with zero offsets", check_deform_zero_offsets),
    ("conv2d gradients", check_conv_gradients),
    ("metric conventions", check_metrics_conventions),
    ("model output shape", check_model_shapes),
    ("checkpoint roundtrip", check_checkpoint_roundtrip),
    ("AdamW first step", check_adamw_step),
]


def run_selftest() -> Dict[str, bool]:
    """Run every check; returns name -> passed"""
    results = {}
    for name, check in CHECKS:
        try:
            check()
            results[name] = True
            logger.info(f"PASS  {name}")
        except Exception as e:
            results[name] = False
            logger.error(f"FAIL  {name}: {e}")
    logger.info(f"{sum(results.values())}/{len(results)} checks passed")
    return results
