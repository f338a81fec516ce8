"""
ScaleFusionNet assembly: Swin encoder, CATM skip refinement, AFB decoder and
segmentation head.
"""
import logging
from dataclasses import asdict, dataclass, fields, replace
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from .afb import AFB
from .catm import CATM, SpatialAttention, catm_forward
from .exceptions import ConfigError, ShapeError
from .functional import gelu, sigmoid
from .layers import Conv2d, ConvTranspose2d, Module
from .swin import PatchEmbed, PatchMerging, SwinStage, to_feature_map
from .tensor import Tensor, concat, make_rng

logger = logging.getLogger(__name__)

REPORTED_PARAMS_M = 67.91
NUM_LEVELS = 4

PROFILES: Dict[str, Dict[str, Any]] = {
    "paper": {"input_size": 256, "embed_dim": 96, "depths": (2, 2, 6, 2), "heads": (3, 6, 12, 24), "window": 8},
    "tiny": {"input_size": 64, "embed_dim": 24, "depths": (2, 2, 6, 2), "heads": (1, 2, 4, 8), "window": 8},
}

FeatureHook = Callable[[str, Tensor], None]


@dataclass
class ModelConfig:
    """Architecture hyperparameters; defaults are the paper profile"""

    input_size: int = 256
    patch_size: int = 4
    embed_dim: int = 96
    depths: Tuple[int, ...] = (2, 2, 6, 2)
    heads: Tuple[int, ...] = (3, 6, 12, 24)
    window: int = 8
    mlp_ratio: float = 4.0
    use_catm: bool = True
    use_afb: bool = True
    out_channels: int = 1
    profile: str = "paper"

    @classmethod
    def from_profile(cls, profile: str, **overrides) -> "ModelConfig":
        if profile not in PROFILES and profile != "custom":
            raise ConfigError("profile", f"unknown profile '{profile}', expected tiny, paper or custom")
        values = dict(PROFILES.get(profile, {}))
        values.update(overrides)
        return cls(profile=profile, **values)

    @property
    def dims(self) -> Tuple[int, ...]:
        return tuple(self.embed_dim * 2 ** i for i in range(NUM_LEVELS))

    @property
    def resolutions(self) -> Tuple[int, ...]:
        base = self.input_size // self.patch_size
        return tuple(base // 2 ** i for i in range(NUM_LEVELS))

    def validate(self) -> "ModelConfig":
        if self.patch_size < 1:
            raise ConfigError("patch_size", f"must be >= 1, got {self.patch_size}")
        if self.input_size < 1 or self.input_size % (self.patch_size * 2 ** (NUM_LEVELS - 1)):
            raise ConfigError(
                "input_size", f"{self.input_size} is not divisible by patch_size * 8 = {self.patch_size * 8}"
            )
        if self.embed_dim < 4 or self.embed_dim % 4:
            raise ConfigError("embed_dim", f"must be a positive multiple of 4, got {self.embed_dim}")
        if len(self.depths) != NUM_LEVELS or any(d < 1 for d in self.depths):
            raise ConfigError("depths", f"expected {NUM_LEVELS} positive stage depths, got {self.depths}")
        if len(self.heads) != NUM_LEVELS or any(h < 1 for h in self.heads):
            raise ConfigError("heads", f"expected {NUM_LEVELS} positive head counts, got {self.heads}")
        for level, (dim, heads) in enumerate(zip(self.dims, self.heads)):
            if dim % heads:
                raise ConfigError("heads", f"stage {level} width {dim} is not divisible by {heads} heads")
        if self.window < 1:
            raise ConfigError("window", f"must be >= 1, got {self.window}")
        for level, side in enumerate(self.resolutions):
            if self.window < side and side % self.window:
                raise ConfigError("window", f"{self.window} does not divide stage {level} side {side}")
        if self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio", f"must be positive, got {self.mlp_ratio}")
        if self.out_channels != 1:
            raise ConfigError("out_channels", "only binary segmentation (1 channel) is supported")
        return self

    def to_dict(self) -> Dict[str, Any]:
        values = asdict(self)
        values["depths"] = list(self.depths)
        values["heads"] = list(self.heads)
        return values

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(unknown[0], "unknown model configuration key")
        values = dict(values)
        for key in ("depths", "heads"):
            if key in values:
                values[key] = tuple(int(v) for v in values[key])
        return cls(**values)


def ablation_configs(base: ModelConfig) -> Dict[str, ModelConfig]:
    """
    Structural ablation wirings

    method0 is the hybrid baseline, method1 adds CATM, full adds AFB on top.
    method2_afb_only is the alternative reading of the second method (AFB
    without CATM).
    """
    return {
        "method0": replace(base, use_catm=False, use_afb=False),
        "method1": replace(base, use_catm=True, use_afb=False),
        "method2_afb_only": replace(base, use_catm=False, use_afb=True),
        "full": replace(base, use_catm=True, use_afb=True),
    }


class SwinEncoder(Module):
    """Patch embedding then four Swin stages with patch merging in between"""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        dims, sides = cfg.dims, cfg.resolutions
        self.patch_embed = PatchEmbed(3, cfg.embed_dim, cfg.patch_size, rng)
        for level in range(NUM_LEVELS):
            stage = SwinStage(
                dims[level], cfg.depths[level], cfg.heads[level], cfg.window, (sides[level], sides[level]), rng, cfg.mlp_ratio
            )
            setattr(self, f"stage{level}", stage)
            if level < NUM_LEVELS - 1:
                setattr(self, f"merge{level}", PatchMerging(dims[level], rng))

    def forward(self, image: Tensor, hook: Optional[FeatureHook] = None) -> List[Tensor]:
        x = self.patch_embed(image)
        if hook:
            hook("patch_embed", to_feature_map(x))
        pyramid = []
        for level in range(NUM_LEVELS):
            x = getattr(self, f"stage{level}")(x)
            pyramid.append(to_feature_map(x))
            if hook:
                hook(f"encoder.stage{level}", pyramid[-1])
            if level < NUM_LEVELS - 1:
                x = getattr(self, f"merge{level}")(x)
        return pyramid


class SegmentationHead(Module):
    """Two stride-2 transposed convolutions around a 3x3 conv, then a 1x1 to the logit channel"""

    def __init__(self, dim: int, out_channels: int, rng: np.random.Generator):
        self.up1 = ConvTranspose2d(dim, dim // 2, 2, rng, stride=2)
        self.conv = Conv2d(dim // 2, dim // 2, 3, rng, padding=1)
        self.up2 = ConvTranspose2d(dim // 2, dim // 4, 2, rng, stride=2)
        self.classifier = Conv2d(dim // 4, out_channels, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        x = gelu(self.conv(self.up1(x)))
        return self.classifier(self.up2(x))


class ScaleFusionNet(Module):
    """
    Encoder-decoder segmentation network

    Args:
        cfg: Validated model configuration
        rng: Generator consumed by every initialiser, in construction order
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        dims, sides, heads = cfg.dims, cfg.resolutions, cfg.heads
        self.shared_sa = SpatialAttention(rng) if cfg.use_catm else None
        self.encoder = SwinEncoder(cfg, rng)
        self.afb3 = self._fusion_block(3, rng)
        for level in range(NUM_LEVELS - 2, -1, -1):
            setattr(self, f"up{level}", ConvTranspose2d(dims[level + 1], dims[level], 2, rng, stride=2))
            if cfg.use_catm:
                resolution = (sides[level], sides[level])
                catm = CATM(dims[level], heads[level], cfg.window, resolution, self.shared_sa, rng, cfg.mlp_ratio)
                setattr(self, f"catm{level}", catm)
            setattr(self, f"reduce{level}", Conv2d(2 * dims[level], dims[level], 1, rng))
            setattr(self, f"afb{level}", self._fusion_block(level, rng))
        self.head = SegmentationHead(dims[0], cfg.out_channels, rng)
        self._hook: Optional[FeatureHook] = None

    def _fusion_block(self, level: int, rng: np.random.Generator) -> Module:
        cfg = self.cfg
        dim, side = cfg.dims[level], cfg.resolutions[level]
        if not cfg.use_afb:
            return Conv2d(dim, dim, 3, rng, padding=1)
        return AFB(dim, level, cfg.heads[level], cfg.window, (side, side), rng, cfg.mlp_ratio)

    def set_feature_hook(self, hook: Optional[FeatureHook]) -> None:
        """Register a callback receiving (name, feature map) for every named intermediate"""
        self._hook = hook

    def _emit(self, name: str, x: Tensor) -> None:
        if self._hook is not None:
            self._hook(name, x)

    def encode(self, image: Tensor) -> List[Tensor]:
        size = self.cfg.input_size
        if image.ndim != 4 or image.shape[1:] != (3, size, size):
            raise ShapeError(f"expected images of shape (B, 3, {size}, {size}), got {image.shape}")
        return self.encoder(image, self._hook)

    def decode(self, pyramid: List[Tensor]) -> Tensor:
        """Logits (B, 1, input, input) from the four encoder levels"""
        if len(pyramid) != NUM_LEVELS:
            raise ShapeError(f"decoder needs {NUM_LEVELS} pyramid levels, got {len(pyramid)}")
        x = self.afb3(pyramid[3])
        self._emit("decoder.afb3", x)
        for level in range(NUM_LEVELS - 2, -1, -1):
            x = getattr(self, f"up{level}")(x)
            self._emit(f"decoder.up{level}", x)
            skip = catm_forward(getattr(self, f"catm{level}", None), pyramid[level], x)
            if self.cfg.use_catm:
                self._emit(f"decoder.catm{level}", skip)
            x = getattr(self, f"reduce{level}")(concat([skip, x], axis=1))
            x = getattr(self, f"afb{level}")(x)
            self._emit(f"decoder.afb{level}", x)
        return self.head(x)

    def logits(self, image: Tensor) -> Tensor:
        return self.decode(self.encode(image))

    def forward(self, image: Tensor) -> Tensor:
        """Foreground probability (B, 1, input, input)"""
        return sigmoid(self.logits(image))


def count_params(model: Module) -> int:
    """
    Number of trainable scalars in a model

    Args:
        model: Any Module; a parameter shared by several submodules counts once

    Returns:
        Sum of the parameter sizes
    """
    return model.num_parameters()


def build_model(cfg: ModelConfig, seed: int = 0, rng: Optional[np.random.Generator] = None) -> ScaleFusionNet:
    """
    Construct and initialise a ScaleFusionNet

    Args:
        cfg: Model configuration, validated here
        seed: Seed for a fresh PCG64 generator when rng is not given
        rng: Generator to draw the initial weights from

    Returns:
        The model, with its parameter count logged against the reported 67.91M
    """
    cfg.validate()
    model = ScaleFusionNet(cfg, rng if rng is not None else make_rng(seed))
    total = count_params(model)
    delta = total / 1e6 - REPORTED_PARAMS_M
    logger.info(
        f"Built ScaleFusionNet ({cfg.profile}, catm={cfg.use_catm}, afb={cfg.use_afb}): "
        f"{total:,} parameters ({total / 1e6:.2f}M, {delta:+.2f}M vs reported {REPORTED_PARAMS_M}M)"
    )
    return model
