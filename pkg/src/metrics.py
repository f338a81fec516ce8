"""
Segmentation metrics and training losses
"""
import logging
from dataclasses import asdict, dataclass
from typing import Dict, Sequence, Union

import numpy as np
import pandas as pd

from .exceptions import DataError, ShapeError
from .tensor import Tensor, as_tensor, clip, log

logger = logging.getLogger(__name__)

METRIC_NAMES = ("dsc", "iou", "se", "sp", "acc")
PROB_EPS = 1e-7
IOU_SMOOTH = 1.0

ArrayOrTensor = Union[np.ndarray, Tensor]


@dataclass
class MetricsReport:
    """Scores of one image at a fixed threshold, with the confusion counts they came from"""

    dsc: float
    iou: float
    se: float
    sp: float
    acc: float
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


def _numpy(x: ArrayOrTensor) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _ratio(numerator: int, denominator: int) -> float:
    # 0/0 means both masks agree on absence
    return 1.0 if denominator == 0 else numerator / denominator


def compute_metrics(pred_prob: ArrayOrTensor, truth: ArrayOrTensor, threshold: float = 0.5) -> MetricsReport:
    """
    Binarize a probability map and score it against a binary mask

    Args:
        pred_prob: Foreground probabilities
        truth: Ground truth with values in {0, 1}, same shape
        threshold: Pixels with probability >= threshold count as foreground

    Returns:
        MetricsReport with DSC, IoU, sensitivity, specificity, accuracy and
        the confusion counts. DSC, IoU and SE are 1 when both masks are empty.
    """
    pred = _numpy(pred_prob)
    truth = _numpy(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} and truth {truth.shape} differ")
    if not np.isin(truth, (0, 1)).all():
        raise DataError("ground-truth mask must only contain 0 and 1")

    pred_fg = pred >= threshold
    truth_fg = truth.astype(bool)
    tp = int(np.count_nonzero(pred_fg & truth_fg))
    fp = int(np.count_nonzero(pred_fg & ~truth_fg))
    fn = int(np.count_nonzero(~pred_fg & truth_fg))
    tn = int(truth.size - tp - fp - fn)

    return MetricsReport(
        dsc=_ratio(2 * tp, 2 * tp + fp + fn),
        iou=_ratio(tp, tp + fp + fn),
        se=_ratio(tp, tp + fn),
        sp=_ratio(tn, tn + fp),
        acc=(tp + tn) / truth.size,
        tp=tp,
        fp=fp,
        fn=fn,
        tn=tn,
    )


def bce_loss(pred_prob: Tensor, truth: ArrayOrTensor) -> Tensor:
    """Mean binary cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7]"""
    p = clip(pred_prob, PROB_EPS, 1.0 - PROB_EPS)
    y = as_tensor(_numpy(truth), like=p)
    if y.shape != p.shape:
        raise ShapeError(f"prediction {p.shape} and truth {y.shape} differ")
    return -(y * log(p) + (1.0 - y) * log(1.0 - p)).mean()


def soft_iou_loss(pred_prob: Tensor, truth: ArrayOrTensor) -> Tensor:
    """
    1 - (sum(p y) + 1) / (sum(p) + sum(y) - sum(p y) + 1)

    Computed per image (first axis) and averaged over the batch.
    """
    y = as_tensor(_numpy(truth), like=pred_prob)
    if y.shape != pred_prob.shape:
        raise ShapeError(f"prediction {pred_prob.shape} and truth {y.shape} differ")
    axes = tuple(range(1, pred_prob.ndim)) or None
    inter = (pred_prob * y).sum(axis=axes)
    union = pred_prob.sum(axis=axes) + y.sum(axis=axes) - inter
    return (1.0 - (inter + IOU_SMOOTH) / (union + IOU_SMOOTH)).mean()


def total_loss(pred_prob: Tensor, truth: ArrayOrTensor) -> Tensor:
    """
    Training objective: BCE plus soft IoU, each averaged over the batch

    Args:
        pred_prob: Foreground probabilities (B, 1, H, W) on the tape
        truth: Binary mask of the same shape

    Returns:
        Scalar loss tensor

    Raises:
        ShapeError: pred_prob and truth differ in shape
    """
    return bce_loss(pred_prob, truth) + soft_iou_loss(pred_prob, truth)


def metrics_frame(ids: Sequence[str], reports: Sequence[MetricsReport]) -> pd.DataFrame:
    """
    One row per image plus 'mean' and 'std' rows over the metric columns

    Args:
        ids: Sample ids, one per report
        reports: Per-image reports
    """
    frame = pd.DataFrame([r.to_dict() for r in reports])
    frame.insert(0, "id", list(ids))
    metrics = frame[list(METRIC_NAMES)]
    summary = pd.DataFrame([metrics.mean(), metrics.std(ddof=0)])
    summary.insert(0, "id", ["mean", "std"])
    return pd.concat([frame, summary], ignore_index=True)


def aggregate(reports: Sequence[MetricsReport]) -> Dict[str, float]:
    """Per-image metrics averaged across the set, plus their standard deviation"""
    if not reports:
        return {}
    values = np.array([[getattr(r, m) for m in METRIC_NAMES] for r in reports], dtype=np.float64)
    means = values.mean(axis=0)
    stds = values.std(axis=0)
    out: Dict[str, float] = {}
    for i, name in enumerate(METRIC_NAMES):
        out[name] = float(means[i])
        out[f"{name}_std"] = float(stds[i])
    return out


def write_metrics_csv(path: str, ids: Sequence[str], reports: Sequence[MetricsReport]) -> pd.DataFrame:
    """
    Write the per-image report with its mean and std rows

    Returns:
        The frame that was written
    """
    frame = metrics_frame(ids, reports)
    frame.to_csv(path, index=False)
    logger.info(f"Wrote metrics for {len(reports)} images to {path}")
    return frame
