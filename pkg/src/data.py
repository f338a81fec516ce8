"""
Dataset ingestion, augmentation, splitting and synthetic lesion generation
"""
import logging
import os
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError

from .exceptions import ConfigError, DataError
from .tensor import make_rng
from .utils import list_image_files, sanitize_filename

logger = logging.getLogger(__name__)

MASK_SUFFIX = "_segmentation"
MASK_THRESHOLD = 127


@dataclass
class SegmentationSample:
    """RGB image in [0, 1] (H, W, 3) with its binary mask (H, W)"""

    id: str
    image: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise DataError(f"{self.id}: image must be HxWx3, got {self.image.shape}")
        if self.mask.shape != self.image.shape[:2]:
            raise DataError(f"{self.id}: mask {self.mask.shape} does not match image {self.image.shape[:2]}")
        if not np.isin(self.mask, (0, 1)).all():
            raise DataError(f"{self.id}: mask must be binary")


@dataclass
class FoldSplit:
    """Fold index per sample id; fold k is validation, the rest train"""

    fold_count: int
    assignments: Dict[str, int]
    seed: int

    def fold(self, k: int) -> List[str]:
        return sorted(i for i, f in self.assignments.items() if f == k)

    def train_ids(self, k: int) -> List[str]:
        return sorted(i for i, f in self.assignments.items() if f != k)


# Loading


def find_mask(mask_dir: Path, stem: str) -> Optional[Path]:
    """Mask file for an image stem: '<stem>.<ext>' or '<stem>_segmentation.<ext>'"""
    for name in (stem, stem + MASK_SUFFIX):
        for ext in ("png", "bmp", "gif", "jpg", "jpeg", "tif"):
            candidate = mask_dir / f"{name}.{ext}"
            if candidate.is_file():
                return candidate
    return None


def _open(path: Path, mode: str) -> Image.Image:
    try:
        with Image.open(path) as img:
            img.load()
            converted = img.convert(mode)
    except (OSError, UnidentifiedImageError) as e:
        raise DataError(f"cannot decode {path}: {e}") from e
    if converted.width == 0 or converted.height == 0:
        raise DataError(f"{path} has a zero dimension")
    return converted


def read_image(path: Path, target_size: Optional[int] = None) -> Tuple[np.ndarray, Tuple[int, int]]:
    """
    Decode an RGB image, bilinear-resized to target_size x target_size

    Returns:
        Float32 array in [0, 1] and the original (height, width)
    """
    img = _open(path, "RGB")
    original = (img.height, img.width)
    if target_size is not None and img.size != (target_size, target_size):
        img = img.resize((target_size, target_size), Image.Resampling.BILINEAR)
    return np.asarray(img, dtype=np.float32) / 255.0, original


def read_mask(path: Path, target_size: Optional[int] = None) -> np.ndarray:
    """Decode a mask, nearest-resize it and threshold at 127 into {0, 1}"""
    img = _open(path, "L")
    if target_size is not None and img.size != (target_size, target_size):
        img = img.resize((target_size, target_size), Image.Resampling.NEAREST)
    return (np.asarray(img) > MASK_THRESHOLD).astype(np.uint8)


def _load_pair(image_path: Path, mask_path: Path, target_size: Optional[int]) -> SegmentationSample:
    image, _ = read_image(image_path, target_size)
    mask = read_mask(mask_path, target_size)
    if target_size is None and mask.shape != image.shape[:2]:
        raise DataError(f"{mask_path}: mask size {mask.shape} differs from image size {image.shape[:2]}")
    return SegmentationSample(image_path.stem, image, mask)


def load_pairs(
    image_dir: str, mask_dir: str, target_size: Optional[int] = 256, max_workers: int = 4
) -> List[SegmentationSample]:
    """
    Load every image with its mask, matched by file stem

    Args:
        image_dir: Directory of PNG/JPEG images
        mask_dir: Directory of masks named '<stem>' or '<stem>_segmentation'
        target_size: Square side to resize to, or None to keep the original size
        max_workers: Decoding threads

    Returns:
        Samples sorted by id
    """
    image_dir, mask_dir = Path(image_dir), Path(mask_dir)
    if not image_dir.is_dir():
        raise DataError(f"image directory {image_dir} does not exist")
    if not mask_dir.is_dir():
        raise DataError(f"mask directory {mask_dir} does not exist")
    images = list_image_files(str(image_dir))
    if not images:
        raise DataError(f"no images found in {image_dir}")

    jobs = []
    for image_path in images:
        mask_path = find_mask(mask_dir, image_path.stem)
        if mask_path is None:
            raise DataError(f"no mask for {image_path.name} in {mask_dir}")
        jobs.append((image_path, mask_path))

    samples: List[SegmentationSample] = []
    with ThreadPoolExecutor(max_workers=max(1, max_workers)) as executor:
        futures = {executor.submit(_load_pair, img, msk, target_size): img for img, msk in jobs}
        for future in as_completed(futures):
            samples.append(future.result())

    samples.sort(key=lambda s: s.id)
    logger.info(f"Loaded {len(samples)} image/mask pairs from {image_dir}")
    return samples


def save_pairs(samples: Sequence[SegmentationSample], image_dir: str, mask_dir: str) -> None:
    """Write samples as '<id>.png' images and '<id>_segmentation.png' masks (0/255)"""
    os.makedirs(image_dir, exist_ok=True)
    os.makedirs(mask_dir, exist_ok=True)
    for sample in samples:
        name = sanitize_filename(sample.id)
        rgb = np.clip(np.round(sample.image * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(rgb).save(os.path.join(image_dir, f"{name}.png"))
        Image.fromarray(sample.mask.astype(np.uint8) * 255).save(
            os.path.join(mask_dir, f"{name}{MASK_SUFFIX}.png")
        )
    logger.info(f"Wrote {len(samples)} samples to {image_dir} and {mask_dir}")


def stack_batch(samples: Sequence[SegmentationSample], dtype=np.float32) -> Tuple[np.ndarray, np.ndarray]:
    """Images (B, 3, H, W) and masks (B, 1, H, W) ready for the model"""
    images = np.stack([s.image for s in samples]).transpose(0, 3, 1, 2).astype(dtype)
    masks = np.stack([s.mask for s in samples])[:, None].astype(dtype)
    return np.ascontiguousarray(images), masks


# Augmentation


@dataclass(frozen=True)
class AugmentParams:
    rotations: int = 0
    hflip: bool = False
    vflip: bool = False


def draw_augmentation(rng: np.random.Generator) -> AugmentParams:
    """k * 90 degree rotation with k uniform in 0..3, then independent flips with p = 0.5"""
    return AugmentParams(int(rng.integers(0, 4)), bool(rng.random() < 0.5), bool(rng.random() < 0.5))


def apply_augmentation(array: np.ndarray, params: AugmentParams) -> np.ndarray:
    """Apply one sampled transform to an (H, W) or (H, W, C) array"""
    out = np.rot90(array, params.rotations, axes=(0, 1))
    if params.hflip:
        out = out[:, ::-1]
    if params.vflip:
        out = out[::-1]
    return np.ascontiguousarray(out)


def augment(sample: SegmentationSample, rng: np.random.Generator) -> SegmentationSample:
    """
    Draw one transform and apply it to image and mask alike

    Args:
        sample: Square sample; image (H, W, C) and mask (H, W)
        rng: Generator the parameters are drawn from

    Returns:
        New sample with the same id

    Raises:
        DataError: The sample is not square
    """
    h, w = sample.mask.shape
    if h != w:
        raise DataError(f"{sample.id}: right-angle rotation needs a square sample, got {h}x{w}")
    params = draw_augmentation(rng)
    return SegmentationSample(sample.id, apply_augmentation(sample.image, params), apply_augmentation(sample.mask, params))


# Synthetic lesions


def _ellipse(size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = rng.uniform(0.25, 0.75, size=2) * size
    ry, rx = rng.uniform(0.08, 0.3, size=2) * size
    angle = rng.uniform(0.0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = (dx * np.cos(angle) + dy * np.sin(angle)) / rx
    v = (-dx * np.sin(angle) + dy * np.cos(angle)) / ry
    return u * u + v * v <= 1.0


def generate_synthetic(count: int, size: int, rng: np.random.Generator) -> List[SegmentationSample]:
    """
    Dermoscopy-like samples: smooth gradient background with noise and a
    darker, softly textured lesion made of 1-3 ellipses

    The mask is the exact ellipse union and covers 5% to 60% of the image.
    """
    if size < 16:
        raise ConfigError("size", f"synthetic samples need size >= 16, got {size}")
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    samples = []
    for index in range(count):
        while True:
            mask = np.zeros((size, size), dtype=bool)
            for _ in range(int(rng.integers(1, 4))):
                mask |= _ellipse(size, rng)
            if 0.05 <= mask.mean() <= 0.6:
                break

        base = rng.uniform(0.6, 0.85, size=3)
        theta = rng.uniform(0.0, 2 * np.pi)
        ramp = (xx * np.cos(theta) + yy * np.sin(theta))
        ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-8) - 0.5
        background = base + 0.1 * ramp[..., None]

        lesion_color = base * rng.uniform(0.25, 0.45)
        freq = rng.uniform(2.0, 6.0, size=2)
        texture = 0.04 * np.sin(2 * np.pi * (freq[0] * xx + freq[1] * yy))[..., None]
        image = np.where(mask[..., None], lesion_color + texture, background)
        image = image + rng.normal(0.0, 0.03, size=image.shape)
        samples.append(
            SegmentationSample(f"synth_{index:04d}", np.clip(image, 0.0, 1.0).astype(np.float32), mask.astype(np.uint8))
        )
    logger.debug(f"Generated {count} synthetic samples of size {size}")
    return samples


# Splits


def kfold_split(ids: Sequence[str], folds: int = 5, seed: int = 0) -> FoldSplit:
    """Sort ids, shuffle with the seed, then deal them round-robin into folds"""
    ordered = sorted(ids)
    if folds < 2:
        raise ConfigError("folds", f"need at least 2 folds, got {folds}")
    if len(ordered) < folds:
        raise DataError(f"{len(ordered)} ids cannot fill {folds} folds")
    perm = make_rng(seed).permutation(len(ordered))
    assignments = {ordered[j]: position % folds for position, j in enumerate(perm)}
    return FoldSplit(folds, assignments, seed)


def ratio_split(
    ids: Sequence[str], ratios: Tuple[int, int, int] = (8, 1, 1), seed: int = 0
) -> Tuple[List[str], List[str], List[str]]:
    """Random train / validation / test split by integer ratios (8:1:1 by default)"""
    ordered = sorted(ids)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or sum(ratios) == 0:
        raise ConfigError("ratios", f"expected three non-negative integers, got {ratios}")
    perm = [ordered[j] for j in make_rng(seed).permutation(len(ordered))]
    total = sum(ratios)
    n_train = len(ordered) * ratios[0] // total
    n_val = len(ordered) * ratios[1] // total
    return sorted(perm[:n_train]), sorted(perm[n_train : n_train + n_val]), sorted(perm[n_train + n_val :])


def fixed_split(ids: Sequence[str], n_train: int = 900, seed: Optional[int] = None) -> Tuple[List[str], List[str]]:
    """First n_train ids (sorted, or shuffled when a seed is given) train, the rest validate"""
    ordered = sorted(ids)
    if not 0 < n_train < len(ordered):
        raise DataError(f"cannot take {n_train} training ids out of {len(ordered)}")
    if seed is not None:
        ordered = [ordered[j] for j in make_rng(seed).permutation(len(ordered))]
    return sorted(ordered[:n_train]), sorted(ordered[n_train:])
