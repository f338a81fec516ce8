"""
Deformable convolution (v1): every kernel tap samples the input at its regular
grid position plus a learned fractional offset, using bilinear interpolation.

Offsets are laid out (B, 2 * kh * kw, Ho, Wo) with channel 2k holding the row
offset and channel 2k + 1 the column offset of tap k = ki * kw + kj. One offset
group is shared by all input channels. Samples outside the map contribute 0.
"""
import logging
from typing import List, Optional, Tuple

import numpy as np

from .exceptions import ShapeError
from .functional import conv2d
from .layers import Conv2d, Module, Parameter, kaiming_uniform
from .tensor import Tensor, _result, as_tensor

logger = logging.getLogger(__name__)

Corner = Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]


def _corners(h: int, w: int, py: np.ndarray, px: np.ndarray) -> List[Corner]:
    """
    The four lattice neighbours of each sampling position

    Returns:
        (row, col, weight, dweight/dy, dweight/dx) per corner, with row and col
        clipped into range and the weights zeroed where the corner is outside
    """
    y0 = np.floor(py)
    x0 = np.floor(px)
    fy = py - y0
    fx = px - x0
    corners = []
    for dy, wy, sy in ((0, 1.0 - fy, -1.0), (1, fy, 1.0)):
        for dx, wx, sx in ((0, 1.0 - fx, -1.0), (1, fx, 1.0)):
            rows = (y0 + dy).astype(np.int64)
            cols = (x0 + dx).astype(np.int64)
            inside = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
            corners.append(
                (
                    np.clip(rows, 0, h - 1),
                    np.clip(cols, 0, w - 1),
                    wy * wx * inside,
                    sy * wx * inside,
                    wy * sx * inside,
                )
            )
    return corners


def bilinear_sample(x: Tensor, py: Tensor, px: Tensor, b: int, c: int) -> Tensor:
    """
    Sample channel c of image b at fractional positions (py, px)

    Args:
        x: Feature map (B, C, H, W)
        py: Row positions, any shape
        px: Column positions, same shape as py
        b: Batch index
        c: Channel index

    Returns:
        Interpolated values shaped like py; gradients reach x, py and px
    """
    x, py, px = as_tensor(x), as_tensor(py, like=x), as_tensor(px, like=x)
    if py.shape != px.shape:
        raise ShapeError(f"bilinear_sample: py {py.shape} and px {px.shape} differ")
    plane = x.data[b, c]
    h, w = plane.shape
    corners = _corners(h, w, py.data, px.data)
    values = [plane[r, q] for r, q, _, _, _ in corners]
    out = sum(v * cw for v, (_, _, cw, _, _) in zip(values, corners))

    def backward(g):
        gx = None
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            for r, q, cw, _, _ in corners:
                np.add.at(gx[b, c], (r, q), g * cw)
        gy = sum(v * dwy for v, (_, _, _, dwy, _) in zip(values, corners)) * g
        gxp = sum(v * dwx for v, (_, _, _, _, dwx) in zip(values, corners)) * g
        return gx, gy, gxp

    return _result(np.asarray(out, dtype=x.dtype), (x, py, px), "bilinear_sample", backward)


def predict_offsets(x: Tensor, offset_conv: Conv2d, kernel_size: int = 3) -> Tensor:
    """Offset field from a plain convolution that must emit 2 * k * k channels"""
    expected = 2 * kernel_size * kernel_size
    if offset_conv.out_channels != expected:
        raise ShapeError(f"offset conv emits {offset_conv.out_channels} channels, expected {expected}")
    return offset_conv(x)


def deform_conv2d(
    x: Tensor, offsets: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0
) -> Tensor:
    """
    Convolution whose taps sample at grid position + offset

    Args:
        x: Input (B, Cin, H, W)
        offsets: (B, 2 * kh * kw, Ho, Wo)
        weight: (Cout, Cin, kh, kw)
        bias: Optional (Cout,)

    Returns:
        (B, Cout, Ho, Wo), identical to conv2d when offsets are zero
    """
    x = as_tensor(x)
    cout, cin, kh, kw = weight.shape
    bsz, _, h, w = x.shape
    if x.shape[1] != cin:
        raise ShapeError(f"deform_conv2d: input has {x.shape[1]} channels, weight expects {cin}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    taps = kh * kw
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"deform_conv2d: input {h}x{w} too small for kernel {kh}x{kw}")
    if offsets.shape != (bsz, 2 * taps, ho, wo):
        raise ShapeError(f"deform_conv2d: offsets {offsets.shape} != expected {(bsz, 2 * taps, ho, wo)}")

    ki, kj = np.divmod(np.arange(taps), kw)
    base_y = (np.arange(ho)[None, :, None] * stride - padding + ki[:, None, None]).astype(x.dtype)
    base_x = (np.arange(wo)[None, None, :] * stride - padding + kj[:, None, None]).astype(x.dtype)
    py = base_y[None] + offsets.data[:, 0::2]
    px = base_x[None] + offsets.data[:, 1::2]

    channels_last = x.data.transpose(0, 2, 3, 1)
    batch = np.arange(bsz)[:, None, None, None]
    corners = _corners(h, w, py, px)
    values = [channels_last[batch, r, q] for r, q, _, _, _ in corners]
    sampled = sum(v * cw[..., None] for v, (_, _, cw, _, _) in zip(values, corners))

    cols = sampled.transpose(0, 2, 3, 4, 1).reshape(bsz * ho * wo, cin * taps)
    w_mat = weight.data.reshape(cout, -1)
    out = (cols @ w_mat.T).reshape(bsz, ho, wo, cout).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    inputs = (x, offsets, weight) if bias is None else (x, offsets, weight, bias)

    def backward(g):
        g_mat = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gsampled = (g_mat @ w_mat).reshape(bsz, ho, wo, cin, taps).transpose(0, 4, 1, 2, 3)

        gx = None
        if x.requires_grad:
            gx_last = np.zeros_like(channels_last)
            for r, q, cw, _, _ in corners:
                np.add.at(gx_last, (np.broadcast_to(batch, r.shape), r, q), gsampled * cw[..., None])
            gx = gx_last.transpose(0, 3, 1, 2)

        goff = None
        if offsets.requires_grad:
            goff = np.zeros_like(offsets.data)
            goff[:, 0::2] = sum((v * gsampled).sum(-1) * dwy for v, (_, _, _, dwy, _) in zip(values, corners))
            goff[:, 1::2] = sum((v * gsampled).sum(-1) * dwx for v, (_, _, _, _, dwx) in zip(values, corners))

        gw = (g_mat.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        if bias is None:
            return gx, goff, gw
        return gx, goff, gw, g.sum(axis=(0, 2, 3))

    return _result(np.ascontiguousarray(out), inputs, "deform_conv2d", backward)


class DeformConv2d(Module):
    """
    Offset predictor (3x3, pad 1, zero init) feeding a deformable convolution

    Args:
        in_channels: Input channels
        out_channels: Output channels
        rng: Generator for the Kaiming-uniform kernel
        kernel_size: Side of the deformable kernel
    """

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator, kernel_size: int = 3):
        self.offset = Conv2d(in_channels, 2 * kernel_size * kernel_size, 3, rng, padding=1, zero_init=True)
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        self.weight = Parameter(kaiming_uniform(rng, shape, in_channels * kernel_size * kernel_size))
        self.bias = Parameter(np.zeros(out_channels))
        self.kernel_size = kernel_size
        self.padding = kernel_size // 2

    def forward(self, x: Tensor) -> Tensor:
        offsets = predict_offsets(x, self.offset, self.kernel_size)
        return deform_conv2d(x, offsets, self.weight, self.bias, stride=1, padding=self.padding)

    def as_plain_conv(self, x: Tensor) -> Tensor:
        """Same kernel applied without offsets"""
        return conv2d(x, self.weight, self.bias, 1, self.padding)
