"""
AdamW training loop, evaluation and checkpoint round-trips
"""
import logging
import math
import os
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from .checkpoint import Checkpoint, check_model_config, load_checkpoint, save_checkpoint
from .data import SegmentationSample, apply_augmentation, draw_augmentation, stack_batch
from .exceptions import ConfigError, DataError, NumericError
from .layers import Module, Parameter
from .metrics import METRIC_NAMES, MetricsReport, aggregate, compute_metrics, metrics_frame, total_loss
from .model import ScaleFusionNet
from .tensor import Tensor, get_tape, make_rng, no_grad, restore_rng, rng_state

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ["epoch", "loss"] + [f"val_{m}" for m in METRIC_NAMES]


@dataclass
class TrainConfig:
    """Optimisation recipe; defaults follow the published training setup"""

    lr: float = 1e-4
    weight_decay: float = 1e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 200
    batch_size: int = 8
    seed: int = 0
    deterministic: bool = True
    grad_clip: Optional[float] = 5.0
    max_steps: Optional[int] = None
    prefetch: int = 2

    def validate(self) -> "TrainConfig":
        if not self.lr > 0:
            raise ConfigError("lr", f"must be > 0, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay", f"must be >= 0, got {self.weight_decay}")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigError("betas", f"expected two values in [0, 1), got {self.betas}")
        if not self.eps > 0:
            raise ConfigError("eps", f"must be > 0, got {self.eps}")
        if self.epochs < 1:
            raise ConfigError("epochs", f"must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError("batch_size", f"must be >= 1, got {self.batch_size}")
        if not 0 <= self.seed < 2 ** 63:
            raise ConfigError("seed", f"must be a non-negative 64-bit integer, got {self.seed}")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError("grad_clip", f"must be > 0 or unset, got {self.grad_clip}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps", f"must be >= 1 or unset, got {self.max_steps}")
        if self.prefetch < 1:
            raise ConfigError("prefetch", f"must be >= 1, got {self.prefetch}")
        return self

    def to_dict(self) -> Dict[str, Any]:
        values = asdict(self)
        values["betas"] = list(self.betas)
        return values

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(unknown[0], "unknown training configuration key")
        values = dict(values)
        if "betas" in values:
            values["betas"] = tuple(float(b) for b in values["betas"])
        return cls(**values)


# Optimisation


@dataclass
class AdamWState:
    """Step count and first / second moments keyed by parameter path"""

    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: Dict[str, np.ndarray], grads: Dict[str, Optional[np.ndarray]], state: AdamWState, cfg: TrainConfig
) -> None:
    """
    One AdamW update, in place

    Weight decay is decoupled: theta <- theta - lr * wd * theta is applied
    before the bias-corrected Adam step. A missing gradient counts as zero.
    Moments are kept in each parameter's dtype.

    Raises:
        NumericError: A gradient is not finite; the message names its path
    """
    for name, grad in grads.items():
        if grad is not None and not np.isfinite(grad).all():
            raise NumericError("non-finite gradient", path=name)

    state.step += 1
    beta1, beta2 = cfg.betas
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step

    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(param)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(param)
            v = np.zeros_like(param)

        param -= cfg.lr * cfg.weight_decay * param
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        param -= cfg.lr * (m / correction1) / (np.sqrt(v / correction2) + cfg.eps)

        state.m[name] = m.astype(param.dtype, copy=False)
        state.v[name] = v.astype(param.dtype, copy=False)


class AdamW:
    """
    AdamW over named parameters

    Args:
        named_params: (path, parameter) pairs, e.g. model.named_parameters()
        cfg: Training configuration providing lr, weight decay, betas and eps
    """

    def __init__(self, named_params: Sequence[Tuple[str, Parameter]], cfg: TrainConfig):
        self.params = dict(named_params)
        self.cfg = cfg
        self.state = AdamWState()
        logger.debug(f"AdamW over {len(self.params)} tensors: lr={cfg.lr}, wd={cfg.weight_decay}, betas={cfg.betas}")

    def step(self) -> None:
        adamw_step(
            {name: p.data for name, p in self.params.items()},
            {name: p.grad for name, p in self.params.items()},
            self.state,
            self.cfg,
        )

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """
    Rescale gradients so their global L2 norm is at most max_norm

    Returns:
        The norm before clipping
    """
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * p.grad.dtype.type(scale)
    return total


# Evaluation


@dataclass
class Evaluation:
    """Per-image reports in input order and their mean / std summary"""

    ids: List[str]
    reports: List[MetricsReport]
    summary: Dict[str, float]

    def frame(self) -> pd.DataFrame:
        return metrics_frame(self.ids, self.reports)


def _model_dtype(model: Module):
    return model.parameters()[0].dtype


def predict_probabilities(model: ScaleFusionNet, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Foreground probabilities (B, 1, H, W) for channel-first images, without recording a tape"""
    dtype = _model_dtype(model)
    outputs = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            batch = Tensor(np.ascontiguousarray(images[start : start + batch_size], dtype=dtype))
            outputs.append(model(batch).data)
    return np.concatenate(outputs, axis=0)


def evaluate(
    model: ScaleFusionNet, samples: Sequence[SegmentationSample], batch_size: int = 8, threshold: float = 0.5
) -> Evaluation:
    """
    Per-image metrics and their mean / std over the set; parameters are untouched

    Args:
        model: Model to score
        samples: Samples already sized for the model
        batch_size: Images per forward pass
        threshold: Binarization threshold for the predictions
    """
    reports = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        images, masks = stack_batch(chunk)
        probs = predict_probabilities(model, images, batch_size)
        reports.extend(compute_metrics(p[0], m[0], threshold) for p, m in zip(probs, masks))
    summary = aggregate(reports)
    if summary:
        logger.info(
            f"Evaluated {len(reports)} images: DSC {summary['dsc']:.4f} IoU {summary['iou']:.4f} "
            f"SE {summary['se']:.4f} SP {summary['sp']:.4f} ACC {summary['acc']:.4f}"
        )
    return Evaluation([s.id for s in samples], reports, summary)


# Training


class Trainer:
    """
    Owns the optimiser, the training RNG stream and the resume cursor

    The training stream is seeded with seed + 1 so it is independent of the
    stream used to initialise the model.

    Args:
        model: Model to train in place
        cfg: Training configuration
        run_dir: Directory for checkpoints and the history CSV, optional
        progress: Show tqdm progress bars
    """

    def __init__(self, model: ScaleFusionNet, cfg: TrainConfig, run_dir: Optional[str] = None, progress: bool = True):
        self.model = model
        self.cfg = cfg.validate()
        self.run_dir = run_dir
        self.progress = progress
        self.optimizer = AdamW(model.named_parameters(), cfg)
        self.rng = make_rng(cfg.seed + 1)
        self.epoch = 0
        self.batch_cursor = 0
        self.permutation: Optional[List[int]] = None
        self.history: List[Dict[str, float]] = []
        self.step_losses: List[float] = []
        self.best_dsc = -1.0
        self._epoch_losses: List[float] = []
        self._consumed_rng_state: Optional[Dict[str, Any]] = None

    @property
    def step(self) -> int:
        return self.optimizer.state.step

    def train_step(self, images: np.ndarray, masks: np.ndarray) -> float:
        """Forward, BCE + IoU loss, backward, clip, AdamW update; returns the loss"""
        get_tape().reset()
        dtype = _model_dtype(self.model)
        probs = self.model(Tensor(images.astype(dtype, copy=False)))
        loss = total_loss(probs, masks)
        value = loss.item()
        if not math.isfinite(value):
            get_tape().reset()
            raise NumericError(f"non-finite loss {value} at step {self.step}, epoch {self.epoch}")
        loss.backward()
        if self.cfg.grad_clip is not None:
            norm = clip_grad_norm(self.model.parameters(), self.cfg.grad_clip)
            logger.debug(f"step {self.step}: loss {value:.5f}, grad norm {norm:.4f}")
        self.optimizer.step()
        self.optimizer.zero_grad()
        self.step_losses.append(value)
        return value

    def _prepare(self, samples: Sequence[SegmentationSample], indices: Sequence[int], params) -> Tuple[np.ndarray, np.ndarray]:
        batch = [
            SegmentationSample(samples[i].id, apply_augmentation(samples[i].image, p), apply_augmentation(samples[i].mask, p))
            for i, p in zip(indices, params)
        ]
        return stack_batch(batch)

    def _batches(self, samples: Sequence[SegmentationSample], start: int) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        """
        Batches of the current permutation from batch index start

        Augmentation parameters are always drawn here, in order, from the
        trainer RNG. Outside deterministic mode the arrays are assembled on a
        worker thread, up to cfg.prefetch batches ahead, so the RNG runs ahead
        of training. The state right after each yielded batch's draws is kept
        in _consumed_rng_state; a mid-epoch checkpoint stores that one.
        """
        bs = self.cfg.batch_size
        n_batches = math.ceil(len(samples) / bs)

        def draw(b: int):
            indices = self.permutation[b * bs : (b + 1) * bs]
            params = [draw_augmentation(self.rng) for _ in indices]
            return indices, params, rng_state(self.rng)

        if self.cfg.deterministic:
            for b in range(start, n_batches):
                indices, params, state = draw(b)
                self._consumed_rng_state = state
                yield self._prepare(samples, indices, params)
            return

        with ThreadPoolExecutor(max_workers=1) as executor:
            pending = deque()

            def take():
                future, state = pending.popleft()
                batch = future.result()
                self._consumed_rng_state = state
                return batch

            for b in range(start, n_batches):
                indices, params, state = draw(b)
                pending.append((executor.submit(self._prepare, samples, indices, params), state))
                if len(pending) > self.cfg.prefetch:
                    yield take()
            while pending:
                yield take()

    def fit(
        self,
        train_samples: Sequence[SegmentationSample],
        val_samples: Optional[Sequence[SegmentationSample]] = None,
        max_steps: Optional[int] = None,
    ) -> List[Dict[str, float]]:
        """
        Train until cfg.epochs epochs (or max_steps optimiser steps) are done

        Each epoch draws a fresh permutation, augments every sample, and after
        the last batch records the mean loss and validation metrics. Training
        resumes from the stored epoch and batch cursor.

        Returns:
            The per-epoch history rows
        """
        if not train_samples:
            raise DataError("training set is empty")
        max_steps = max_steps if max_steps is not None else self.cfg.max_steps
        n = len(train_samples)
        n_batches = math.ceil(n / self.cfg.batch_size)
        logger.info(
            f"Training on {n} samples: {self.cfg.epochs} epochs x {n_batches} batches "
            f"(lr={self.cfg.lr}, wd={self.cfg.weight_decay}, batch={self.cfg.batch_size})"
        )

        while self.epoch < self.cfg.epochs:
            if self.permutation is None:
                self.permutation = [int(i) for i in self.rng.permutation(n)]
                self.batch_cursor = 0
                self._epoch_losses = []

            batches = self._batches(train_samples, self.batch_cursor)
            bar = tqdm(
                batches,
                total=n_batches,
                initial=self.batch_cursor,
                desc=f"epoch {self.epoch + 1}/{self.cfg.epochs}",
                leave=False,
                disable=not self.progress,
            )
            for images, masks in bar:
                loss = self.train_step(images, masks)
                self._epoch_losses.append(loss)
                self.batch_cursor += 1
                bar.set_postfix(loss=f"{loss:.4f}")
                if max_steps is not None and self.step >= max_steps and self.batch_cursor < n_batches:
                    bar.close()
                    batches.close()
                    # rewind past batches drawn ahead but never trained on
                    self.rng = restore_rng(self._consumed_rng_state)
                    logger.info(f"Stopping at step {self.step} (max_steps) inside epoch {self.epoch + 1}")
                    self._save_checkpoints(None)
                    return self.history

            self._finish_epoch(val_samples)
            if max_steps is not None and self.step >= max_steps:
                logger.info(f"Stopping at step {self.step} (max_steps)")
                break

        self.write_history()
        return self.history

    def _finish_epoch(self, val_samples: Optional[Sequence[SegmentationSample]]) -> None:
        row: Dict[str, float] = {"epoch": self.epoch + 1, "loss": float(np.mean(self._epoch_losses))}
        val_dsc = None
        if val_samples:
            summary = evaluate(self.model, val_samples, self.cfg.batch_size).summary
            for m in METRIC_NAMES:
                row[f"val_{m}"] = summary[m]
            val_dsc = summary["dsc"]
        else:
            for m in METRIC_NAMES:
                row[f"val_{m}"] = float("nan")
        self.history.append(row)
        logger.info(
            f"epoch {row['epoch']}/{self.cfg.epochs}: loss {row['loss']:.5f}"
            + (f", val DSC {val_dsc:.4f}" if val_dsc is not None else "")
        )

        self.epoch += 1
        self.permutation = None
        self.batch_cursor = 0
        self._epoch_losses = []
        self._save_checkpoints(val_dsc)

    def _save_checkpoints(self, val_dsc: Optional[float]) -> None:
        if not self.run_dir:
            return
        self.save_checkpoint(os.path.join(self.run_dir, "last.ckpt"))
        if val_dsc is not None and val_dsc > self.best_dsc:
            self.best_dsc = val_dsc
            self.save_checkpoint(os.path.join(self.run_dir, "best.ckpt"))
            logger.info(f"New best validation DSC {val_dsc:.4f}")

    def write_history(self, path: Optional[str] = None) -> Optional[pd.DataFrame]:
        path = path or (os.path.join(self.run_dir, "history.csv") if self.run_dir else None)
        if path is None:
            return None
        frame = pd.DataFrame(self.history, columns=HISTORY_COLUMNS)
        frame.to_csv(path, index=False)
        logger.info(f"Wrote training history to {path}")
        return frame

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            params=self.model.state_dict(),
            model_config=self.model.cfg.to_dict(),
            train_config=self.cfg.to_dict(),
            adam_m=dict(self.optimizer.state.m),
            adam_v=dict(self.optimizer.state.v),
            step=self.step,
            epoch=self.epoch,
            batch_cursor=self.batch_cursor,
            permutation=self.permutation,
            rng_state=rng_state(self.rng),
            extra={
                "history": self.history,
                "step_losses": self.step_losses,
                "epoch_losses": self._epoch_losses,
                "best_dsc": self.best_dsc,
            },
        )

    def save_checkpoint(self, path: str) -> str:
        return save_checkpoint(self.checkpoint(), path)

    def load_checkpoint(self, path: str) -> None:
        """
        Restore parameters, optimiser moments, RNG and cursor from a file

        Raises:
            ConfigMismatchError: The file was written for another architecture
        """
        ckpt = load_checkpoint(path)
        check_model_config(ckpt, self.model.cfg.to_dict())
        self.model.load_state_dict(ckpt.params)
        self.optimizer.state = AdamWState(ckpt.step, dict(ckpt.adam_m), dict(ckpt.adam_v))
        if ckpt.rng_state is not None:
            self.rng = restore_rng(ckpt.rng_state)
        self.epoch = ckpt.epoch
        self.batch_cursor = ckpt.batch_cursor
        self.permutation = ckpt.permutation
        self.history = list(ckpt.extra.get("history", []))
        self.step_losses = list(ckpt.extra.get("step_losses", []))
        self._epoch_losses = list(ckpt.extra.get("epoch_losses", []))
        self.best_dsc = ckpt.extra.get("best_dsc", -1.0)
        logger.info(f"Resumed from {path} at step {self.step}, epoch {self.epoch + 1}, batch {self.batch_cursor}")


def load_model(path: str, expected_config: Optional[Dict[str, Any]] = None) -> ScaleFusionNet:
    """Rebuild a model from a checkpoint, optionally checking it against a configuration"""
    from .model import ModelConfig

    ckpt = load_checkpoint(path)
    if expected_config is not None:
        check_model_config(ckpt, expected_config)
    model = ScaleFusionNet(ModelConfig.from_dict(ckpt.model_config), make_rng(0))
    model.load_state_dict(ckpt.params)
    return model
