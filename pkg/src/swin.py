"""
Swin-Transformer building blocks

Token maps inside this module are channel-last (B, H, W, C). Encoder, CATM and
AFB convert to and from channel-first feature maps at their boundaries with
to_tokens / to_feature_map.
"""
import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .exceptions import ConfigError, ShapeError
from .functional import gelu, softmax
from .layers import Conv2d, LayerNorm, Linear, Module, Parameter, trunc_normal
from .tensor import Tensor, concat, getitem, reshape, roll, transpose

logger = logging.getLogger(__name__)

MASK_VALUE = -100.0


@dataclass
class SwinBlockConfig:
    """Width, heads, window side and cyclic shift (0 for a plain window block)"""

    dim: int
    heads: int
    window: int
    shift: int = 0
    mlp_ratio: float = 4.0

    def validate(self) -> None:
        if self.window < 1:
            raise ConfigError("window", f"must be >= 1, got {self.window}")
        if self.heads < 1 or self.dim % self.heads != 0:
            raise ConfigError("heads", f"dim {self.dim} is not divisible by {self.heads} heads")
        if self.shift not in (0, self.window // 2):
            raise ConfigError("shift", f"must be 0 or window/2 ({self.window // 2}), got {self.shift}")

    def fitted(self, resolution: Tuple[int, int]) -> "SwinBlockConfig":
        """
        Adapt the window to a token grid

        A window at least as large as the grid is clamped to the grid side and
        the shift is dropped. Otherwise the window must divide both sides.
        """
        h, w = resolution
        if self.window >= min(h, w):
            if h != w:
                raise ConfigError("window", f"clamping needs a square grid, got {h}x{w}")
            return SwinBlockConfig(self.dim, self.heads, h, 0, self.mlp_ratio)
        if h % self.window or w % self.window:
            raise ConfigError("window", f"{self.window} does not divide the {h}x{w} token grid")
        return self


def to_tokens(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, H, W, C)"""
    return transpose(x, (0, 2, 3, 1))


def to_feature_map(x: Tensor) -> Tensor:
    """(B, H, W, C) -> (B, C, H, W)"""
    return transpose(x, (0, 3, 1, 2))


def window_partition(x: Tensor, window: int) -> Tensor:
    """
    Split (B, H, W, C) into non-overlapping windows

    Returns:
        (B * nW, window * window, C), windows ordered row-major within each image
    """
    b, h, w, c = x.shape
    if h % window or w % window:
        raise ShapeError(f"window_partition: {h}x{w} is not divisible by window {window}")
    x = reshape(x, (b, h // window, window, w // window, window, c))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    return reshape(x, (-1, window * window, c))


def window_reverse(windows: Tensor, window: int, h: int, w: int) -> Tensor:
    """Inverse of window_partition"""
    c = windows.shape[-1]
    b = windows.shape[0] // ((h // window) * (w // window))
    x = reshape(windows, (b, h // window, w // window, window, window, c))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    return reshape(x, (b, h, w, c))


def relative_position_index(window: int) -> np.ndarray:
    """
    Lookup from a (query, key) pair inside a window to a bias-table row

    Returns:
        Integer array (window^2, window^2) with values < (2 * window - 1)^2
    """
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij")).reshape(2, -1)
    relative = (coords[:, :, None] - coords[:, None, :]).transpose(1, 2, 0)
    relative = relative + (window - 1)
    return relative[:, :, 0] * (2 * window - 1) + relative[:, :, 1]


def shifted_window_mask(h: int, w: int, window: int, shift: int) -> np.ndarray:
    """
    Additive attention mask for cyclically shifted windows

    Tokens that came from different regions before the shift get -100.

    Returns:
        (nW, window^2, window^2) array of 0 / -100
    """
    n_windows = (h // window) * (w // window)
    if shift == 0:
        return np.zeros((n_windows, window * window, window * window))
    region = np.zeros((h, w))
    label = 0
    for rows in (slice(0, -window), slice(-window, -shift), slice(-shift, None)):
        for cols in (slice(0, -window), slice(-window, -shift), slice(-shift, None)):
            region[rows, cols] = label
            label += 1
    windows = region.reshape(h // window, window, w // window, window).transpose(0, 2, 1, 3)
    windows = windows.reshape(n_windows, window * window)
    differs = windows[:, None, :] != windows[:, :, None]
    return np.where(differs, MASK_VALUE, 0.0)


class RelativePositionBias(Module):
    """Learned bias table indexed by the relative offset of query and key"""

    def __init__(self, window: int, heads: int, rng: np.random.Generator):
        self.table = Parameter(trunc_normal(rng, ((2 * window - 1) ** 2, heads)))
        self._index = relative_position_index(window)
        self._window = window

    def forward(self) -> Tensor:
        n = self._window * self._window
        bias = getitem(self.table, self._index.reshape(-1))
        return transpose(reshape(bias, (n, n, -1)), (2, 0, 1))


class WindowAttention(Module):
    """
    Multi-head self-attention inside each window with relative position bias

    Args:
        dim: Token width
        heads: Number of heads
        window: Window side
        rng: Generator for initialisation
    """

    def __init__(self, dim: int, heads: int, window: int, rng: np.random.Generator):
        self.qkv = Linear(dim, 3 * dim, rng)
        self.relative_bias = RelativePositionBias(window, heads, rng)
        self.proj = Linear(dim, dim, rng)
        self.heads = heads
        self.window = window
        self.scale = (dim // heads) ** -0.5

    def forward(self, x: Tensor, mask: Optional[np.ndarray] = None, return_attention: bool = False):
        bw, n, c = x.shape
        if n != self.window * self.window:
            raise ShapeError(f"window attention expects {self.window ** 2} tokens per window, got {n}")
        head_dim = c // self.heads
        qkv = transpose(reshape(self.qkv(x), (bw, n, 3, self.heads, head_dim)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]

        attn = (q * self.scale) @ transpose(k, (0, 1, 3, 2))
        attn = attn + self.relative_bias()
        if mask is not None:
            n_windows = mask.shape[0]
            if mask.shape[1:] != (n, n) or bw % n_windows:
                raise ShapeError(f"attention mask {mask.shape} does not fit {bw} windows of {n} tokens")
            attn = reshape(attn, (bw // n_windows, n_windows, self.heads, n, n))
            attn = attn + Tensor(mask[None, :, None].astype(attn.dtype))
            attn = reshape(attn, (bw, self.heads, n, n))
        attn = softmax(attn, axis=-1)

        out = reshape(transpose(attn @ v, (0, 2, 1, 3)), (bw, n, c))
        out = self.proj(out)
        return (out, attn) if return_attention else out


class Mlp(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class SwinBlock(Module):
    """
    x + (S)W-MSA(LN(x)), then + MLP(LN(.)) on a fixed (H, W) token grid

    Args:
        cfg: Block configuration; the window is fitted to the grid
        resolution: (H, W) of the token grid
        rng: Generator for initialisation
    """

    def __init__(self, cfg: SwinBlockConfig, resolution: Tuple[int, int], rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg.fitted(resolution)
        self.resolution = tuple(resolution)
        self.norm1 = LayerNorm(cfg.dim)
        self.attn = WindowAttention(cfg.dim, cfg.heads, self.cfg.window, rng)
        self.norm2 = LayerNorm(cfg.dim)
        self.mlp = Mlp(cfg.dim, int(cfg.dim * cfg.mlp_ratio), rng)
        self._mask = (
            shifted_window_mask(resolution[0], resolution[1], self.cfg.window, self.cfg.shift) if self.cfg.shift else None
        )

    def forward(self, x: Tensor) -> Tensor:
        b, h, w, c = x.shape
        if (h, w) != self.resolution or c != self.cfg.dim:
            raise ShapeError(f"swin block built for {self.resolution}x{self.cfg.dim}, got {h}x{w}x{c}")
        window, shift = self.cfg.window, self.cfg.shift

        y = self.norm1(x)
        if shift:
            y = roll(y, (-shift, -shift), (1, 2))
        y = window_reverse(self.attn(window_partition(y, window), self._mask), window, h, w)
        if shift:
            y = roll(y, (shift, shift), (1, 2))
        x = x + y
        return x + self.mlp(self.norm2(x))


def swin_block(x: Tensor, block: SwinBlock) -> Tensor:
    """Apply a SwinBlock to a channel-first feature map"""
    return to_feature_map(block(to_tokens(x)))


class SwinStage(Module):
    """Blocks alternating plain and shifted windows at one resolution"""

    def __init__(
        self,
        dim: int,
        depth: int,
        heads: int,
        window: int,
        resolution: Tuple[int, int],
        rng: np.random.Generator,
        mlp_ratio: float = 4.0,
    ):
        for i in range(depth):
            shift = window // 2 if i % 2 else 0
            setattr(self, f"block{i}", SwinBlock(SwinBlockConfig(dim, heads, window, shift, mlp_ratio), resolution, rng))
        self.depth = depth

    def forward(self, x: Tensor) -> Tensor:
        for i in range(self.depth):
            x = getattr(self, f"block{i}")(x)
        return x


class PatchEmbed(Module):
    """Strided patch convolution followed by layer norm; returns (B, H/p, W/p, C) tokens"""

    def __init__(self, in_channels: int, embed_dim: int, patch_size: int, rng: np.random.Generator):
        self.proj = Conv2d(in_channels, embed_dim, patch_size, rng, stride=patch_size)
        self.norm = LayerNorm(embed_dim)
        self.patch_size = patch_size

    def forward(self, image: Tensor) -> Tensor:
        h, w = image.shape[-2:]
        if h % self.patch_size or w % self.patch_size:
            raise ShapeError(f"patch_embed: {h}x{w} is not divisible by patch size {self.patch_size}")
        return self.norm(to_tokens(self.proj(image)))


class PatchMerging(Module):
    """2x2 neighbourhood concat (4C), layer norm, linear to 2C without bias"""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.norm = LayerNorm(4 * dim)
        self.reduction = Linear(4 * dim, 2 * dim, rng, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[1:3]
        if h % 2 or w % 2:
            raise ShapeError(f"patch_merge needs even spatial dims, got {h}x{w}")
        parts = [x[:, 0::2, 0::2], x[:, 1::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 1::2]]
        return self.reduction(self.norm(concat(parts, axis=-1)))
