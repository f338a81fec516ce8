"""
Cross-Attention Transformer Module for skip connections

A Swin block turns decoder features into queries, keys and values. Cross
attention fuses them with the encoder skip (skip projections are added to the
decoder keys and values, the result is added back onto the skip and layer
normalised). A single spatial-attention gate, shared by every stage, refines
the fused map.
"""
import logging
from typing import Optional, Tuple

import numpy as np

from .exceptions import ConfigError, ShapeError
from .functional import bilinear_resize, sigmoid, softmax
from .layers import Conv2d, LayerNorm, Linear, Module
from .swin import SwinBlock, SwinBlockConfig, to_feature_map, to_tokens
from .tensor import Tensor, concat, reshape, transpose

logger = logging.getLogger(__name__)


class SpatialAttention(Module):
    """
    Channel-agnostic spatial gate: [mean_c, max_c] -> 7x7 conv -> sigmoid

    One instance is shared by all CATM stages regardless of their width.
    """

    def __init__(self, rng: np.random.Generator, kernel_size: int = 7):
        self.conv = Conv2d(2, 1, kernel_size, rng, padding=kernel_size // 2)

    def gate(self, x: Tensor) -> Tensor:
        pooled = concat([x.mean(axis=1, keepdims=True), x.max(axis=1, keepdims=True)], axis=1)
        return sigmoid(self.conv(pooled))

    def forward(self, x: Tensor) -> Tensor:
        return x * self.gate(x)


def shared_spatial_attention(x: Tensor, shared_sa: SpatialAttention) -> Tensor:
    """x gated by the shared module; gradients land in the one shared conv"""
    return shared_sa(x)


class CATM(Module):
    """
    Skip refinement at one decoder level

    Args:
        dim: Channels of the skip and decoder maps
        heads: Attention heads, shared by the Swin block and the cross attention
        window: Swin window size
        resolution: (H, W) of the skip map
        shared_sa: The model-wide SpatialAttention instance
        rng: Generator for initialisation

    out_proj starts at zero, so a fresh module returns SharedSA(LayerNorm(skip)).
    """

    def __init__(
        self,
        dim: int,
        heads: int,
        window: int,
        resolution: Tuple[int, int],
        shared_sa: SpatialAttention,
        rng: np.random.Generator,
        mlp_ratio: float = 4.0,
    ):
        if dim % heads:
            raise ConfigError("heads", f"CATM width {dim} is not divisible by {heads} heads")
        self.swin = SwinBlock(SwinBlockConfig(dim, heads, window, 0, mlp_ratio), resolution, rng)
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.ks = Linear(dim, dim, rng)
        self.vs = Linear(dim, dim, rng)
        self.out_proj = Linear(dim, dim, rng, zero_init=True)
        self.norm = LayerNorm(dim)
        self.shared_sa = shared_sa
        self.dim = dim
        self.heads = heads

    def derive_qkv(self, x_decoder: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
        """(B, C, H, W) decoder map -> three (B, H*W, C) token tensors"""
        if x_decoder.shape[1] != self.dim:
            raise ShapeError(f"CATM expects {self.dim} decoder channels, got {x_decoder.shape[1]}")
        b, c, h, w = x_decoder.shape
        tokens = reshape(self.swin(to_tokens(x_decoder)), (b, h * w, c))
        return self.q(tokens), self.k(tokens), self.v(tokens)

    def _split_heads(self, x: Tensor) -> Tensor:
        b, n, c = x.shape
        return transpose(reshape(x, (b, n, self.heads, c // self.heads)), (0, 2, 1, 3))

    def caf_fuse(self, x_skip: Tensor, q: Tensor, k: Tensor, v: Tensor, return_attention: bool = False):
        """
        Cross-attention fusion of decoder Q/K/V with the skip map

        Returns:
            LayerNorm(skip + out_proj(attention)) as (B, C, H, W), and the
            attention weights (B, heads, N, N) when return_attention is set
        """
        b, c, h, w = x_skip.shape
        n = h * w
        if q.shape != (b, n, c) or k.shape != q.shape or v.shape != q.shape:
            raise ShapeError(f"CAF: Q/K/V {q.shape} do not align with skip tokens {(b, n, c)}")
        skip = reshape(to_tokens(x_skip), (b, n, c))
        keys = self._split_heads(k + self.ks(skip))
        values = self._split_heads(v + self.vs(skip))
        queries = self._split_heads(q)

        scale = (c // self.heads) ** -0.5
        attn = softmax((queries * scale) @ transpose(keys, (0, 1, 3, 2)), axis=-1)
        fused = reshape(transpose(attn @ values, (0, 2, 1, 3)), (b, n, c))
        out = self.norm(skip + self.out_proj(fused))
        out = to_feature_map(reshape(out, (b, h, w, c)))
        return (out, attn) if return_attention else out

    def forward(self, x_skip: Tensor, x_decoder: Tensor) -> Tensor:
        if x_decoder.shape[-2:] != x_skip.shape[-2:]:
            x_decoder = bilinear_resize(x_decoder, *x_skip.shape[-2:])
        q, k, v = self.derive_qkv(x_decoder)
        return self.shared_sa(self.caf_fuse(x_skip, q, k, v))


def catm_forward(catm: Optional[CATM], x_skip: Tensor, x_decoder: Tensor) -> Tensor:
    """Refine a skip map; with the module switched off the skip passes through unchanged"""
    if catm is None:
        return x_skip
    return catm(x_skip, x_decoder)
