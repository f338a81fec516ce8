"""
Adaptive Fusion Block: resolution-aware Swin branch, deformable branch and
identity, concatenated in the order [identity, swin, deform] and reduced by a
1x1 convolution.
"""
import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .deform_conv import DeformConv2d
from .exceptions import ConfigError, ShapeError
from .layers import Conv2d, Module
from .swin import SwinStage, to_feature_map, to_tokens
from .tensor import Tensor, concat

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AfbLevelPolicy:
    level: int
    swin_stages_used: Optional[int]
    embed_dim_reduction: int


_POLICIES = {
    0: AfbLevelPolicy(0, 2, 1),
    1: AfbLevelPolicy(1, 3, 1),
    2: AfbLevelPolicy(2, 4, 2),
    3: AfbLevelPolicy(3, None, 1),
}


def resolution_policy(level: int) -> AfbLevelPolicy:
    """
    How deep the Swin branch runs at a decoder level

    Level 0 uses two stages, level 1 three, level 2 four at half width, and
    level 3 replaces the branch by a 3x3 convolution. A stage is a pair of
    blocks (plain window, then shifted window).
    """
    if level not in _POLICIES:
        raise ConfigError("level", f"AFB level must be 0..3, got {level}")
    return _POLICIES[level]


class AFB(Module):
    """
    Three parallel branches fused by concatenation and a 1x1 convolution

    Args:
        dim: Channels in and out
        level: Decoder level 0..3
        heads: Attention heads at full width
        window: Swin window size
        resolution: (H, W) of the input map
        rng: Generator for initialisation
    """

    def __init__(
        self,
        dim: int,
        level: int,
        heads: int,
        window: int,
        resolution: Tuple[int, int],
        rng: np.random.Generator,
        mlp_ratio: float = 4.0,
    ):
        self.policy = resolution_policy(level)
        self.dim = dim
        if self.policy.swin_stages_used is None:
            self.swin_conv = Conv2d(dim, dim, 3, rng, padding=1)
        else:
            reduction = self.policy.embed_dim_reduction
            inner = dim // reduction
            inner_heads = max(heads // reduction, 1)
            if inner % inner_heads:
                inner_heads = 1
            if reduction > 1:
                self.reduce = Conv2d(dim, inner, 1, rng)
            depth = 2 * self.policy.swin_stages_used
            self.swin = SwinStage(inner, depth, inner_heads, window, resolution, rng, mlp_ratio)
            if reduction > 1:
                self.expand = Conv2d(inner, dim, 1, rng)
        self.deform = DeformConv2d(dim, dim, rng)
        self.fuse = Conv2d(3 * dim, dim, 1, rng)
        logger.debug(f"AFB level {level}: {dim} channels, swin stages {self.policy.swin_stages_used}")

    def swin_branch(self, x: Tensor) -> Tensor:
        if self.policy.swin_stages_used is None:
            return self.swin_conv(x)
        if self.policy.embed_dim_reduction > 1:
            x = self.reduce(x)
        x = to_feature_map(self.swin(to_tokens(x)))
        if self.policy.embed_dim_reduction > 1:
            x = self.expand(x)
        return x

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.dim:
            raise ShapeError(f"AFB expects {self.dim} channels, got {x.shape[1]}")
        return self.fuse(concat([x, self.swin_branch(x), self.deform(x)], axis=1))


def afb_forward(afb: Module, x: Tensor) -> Tensor:
    """Run a fusion block (or the plain conv block standing in for it); output shape == input shape"""
    return afb(x)
