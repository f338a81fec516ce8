"""
Mask, overlay and feature-map image writers
"""
import logging
import os
from typing import Tuple

import numpy as np
from PIL import Image

from .exceptions import ConfigError, ShapeError

logger = logging.getLogger(__name__)

# Yellow: predicted and true. Red: missed lesion. Green: false alarm.
TP_COLOR = (255, 255, 0)
FN_COLOR = (255, 0, 0)
FP_COLOR = (0, 255, 0)


def _to_uint8_rgb(image: np.ndarray) -> np.ndarray:
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected an HxWx3 image, got {image.shape}")
    if image.dtype == np.uint8:
        return image.astype(np.float64)
    return np.clip(image, 0.0, 1.0).astype(np.float64) * 255.0


def render_overlay(image: np.ndarray, pred: np.ndarray, truth: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """
    Blend prediction / ground-truth agreement colours onto an image

    Args:
        image: HxWx3 image, uint8 or float in [0, 1]
        pred: Binary prediction (H, W)
        truth: Binary ground truth (H, W)
        alpha: Colour opacity in [0, 1]

    Returns:
        uint8 RGB array (H, W, 3)
    """
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError("alpha", f"must be in [0, 1], got {alpha}")
    base = _to_uint8_rgb(image)
    if pred.shape != base.shape[:2] or truth.shape != base.shape[:2]:
        raise ShapeError(f"masks {pred.shape} / {truth.shape} do not match image {base.shape[:2]}")

    pred, truth = pred.astype(bool), truth.astype(bool)
    out = base.copy()
    for region, color in ((pred & truth, TP_COLOR), (truth & ~pred, FN_COLOR), (pred & ~truth, FP_COLOR)):
        out[region] = (1.0 - alpha) * base[region] + alpha * np.asarray(color, dtype=np.float64)
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


def resize_probability(prob: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a (H, W) probability map to (height, width)"""
    height, width = size
    if prob.shape == (height, width):
        return prob.astype(np.float32)
    img = Image.fromarray(prob.astype(np.float32))
    return np.asarray(img.resize((width, height), Image.Resampling.BILINEAR), dtype=np.float32)


def write_mask_png(path: str, mask: np.ndarray) -> None:
    """8-bit grayscale PNG, 0 for background and 255 for lesion"""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    Image.fromarray(mask.astype(bool).astype(np.uint8) * 255).save(path)


def write_rgb_png(path: str, rgb: np.ndarray) -> None:
    """
    Save an RGB array as PNG, creating parent directories as needed

    Args:
        path: Destination file
        rgb: (H, W, 3) array with values in 0..255; it is cast to uint8
    """
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    Image.fromarray(rgb.astype(np.uint8)).save(path)


def feature_heatmap(feature: np.ndarray) -> np.ndarray:
    """Channel mean of a (C, H, W) map, min-max scaled to uint8"""
    if feature.ndim != 3:
        raise ShapeError(f"expected a (C, H, W) feature map, got {feature.shape}")
    mean = feature.mean(axis=0)
    span = float(mean.max() - mean.min())
    scaled = (mean - mean.min()) / span if span > 0 else np.zeros_like(mean)
    return np.round(scaled * 255.0).astype(np.uint8)


def write_feature_heatmap(path: str, feature: np.ndarray) -> None:
    """Save feature_heatmap(feature) as an 8-bit grayscale PNG"""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    Image.fromarray(feature_heatmap(feature)).save(path)
    logger.debug(f"Feature heat map written to {path}")
