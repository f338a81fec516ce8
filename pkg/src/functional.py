"""
Layer operations with fused backward rules: convolution, transposed
convolution, layer normalization, activations and bilinear resizing.

Feature maps are channel-first (B, C, H, W). Padding is zero padding.
"""
import logging
import math
from functools import lru_cache
from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ShapeError
from .tensor import Tensor, _result, as_tensor, matmul, reshape, transpose

logger = logging.getLogger(__name__)

GELU_COEF = 0.044715
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def _out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> Tuple[np.ndarray, int, int]:
    """
    Unfold (B, C, H, W) into patches shaped (B, Ho, Wo, C, kh, kw)

    Returns:
        The patch array and the output spatial size
    """
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (x.shape[2] - kh) // stride + 1
    wo = (x.shape[3] - kw) // stride + 1
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return windows.transpose(0, 2, 3, 1, 4, 5), ho, wo


def col2im(cols: np.ndarray, shape: Tuple[int, int, int, int], stride: int, padding: int) -> np.ndarray:
    """Adjoint of im2col: scatter-add (B, Ho, Wo, C, kh, kw) patches back into (B, C, H, W)"""
    b, c, h, w = shape
    _, ho, wo, _, kh, kw = cols.shape
    out = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    patches = cols.transpose(0, 3, 4, 5, 1, 2)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += patches[:, :, i, j]
    if padding:
        out = out[:, :, padding : padding + h, padding : padding + w]
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """
    2-D cross-correlation

    Args:
        x: Input (B, Cin, H, W)
        weight: Kernel (Cout, Cin, kh, kw)
        bias: Optional (Cout,)
        stride: Step between output positions
        padding: Zero padding on every side

    Returns:
        (B, Cout, Ho, Wo) with Ho = floor((H + 2p - kh) / s) + 1
    """
    x = as_tensor(x)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    cout, cin, kh, kw = weight.shape
    if x.shape[1] != cin:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, weight expects {cin}")
    ho = _out_size(x.shape[2], kh, stride, padding)
    wo = _out_size(x.shape[3], kw, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: input {x.shape[2:]} too small for kernel {(kh, kw)} with padding {padding}")

    patches, ho, wo = im2col(x.data, kh, kw, stride, padding)
    b = x.shape[0]
    cols = patches.reshape(b * ho * wo, cin * kh * kw)
    w_mat = weight.data.reshape(cout, -1)
    out = (cols @ w_mat.T).reshape(b, ho, wo, cout).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g_mat = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gx = None
        if x.requires_grad:
            gcols = (g_mat @ w_mat).reshape(b, ho, wo, cin, kh, kw)
            gx = col2im(gcols, x.shape, stride, padding)
        gw = (g_mat.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _result(np.ascontiguousarray(out), inputs, "conv2d", backward)


def transposed_conv2d(
    x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0
) -> Tensor:
    """
    Transposed convolution, the exact adjoint of conv2d with the same weight array

    Args:
        x: Input (B, Cin, H, W)
        weight: Kernel (Cin, Cout, kh, kw)
        bias: Optional (Cout,)

    Returns:
        (B, Cout, (H - 1) s - 2p + kh, (W - 1) s - 2p + kw)
    """
    x = as_tensor(x)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"transposed_conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    cin, cout, kh, kw = weight.shape
    if x.shape[1] != cin:
        raise ShapeError(f"transposed_conv2d: input has {x.shape[1]} channels, weight expects {cin}")
    b, _, h, w = x.shape
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (w - 1) * stride - 2 * padding + kw
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"transposed_conv2d: output size ({ho}, {wo}) is empty")

    x_mat = x.data.transpose(0, 2, 3, 1).reshape(-1, cin)
    w_mat = weight.data.reshape(cin, -1)
    cols = (x_mat @ w_mat).reshape(b, h, w, cout, kh, kw)
    out = col2im(cols, (b, cout, ho, wo), stride, padding)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gpatches, _, _ = im2col(g, kh, kw, stride, padding)
        g_mat = gpatches.reshape(b * h * w, cout * kh * kw)
        gx = (g_mat @ w_mat.T).reshape(b, h, w, cin).transpose(0, 3, 1, 2) if x.requires_grad else None
        gw = (x_mat.T @ g_mat).reshape(weight.shape) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _result(out, inputs, "transposed_conv2d", backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x @ weight.T + bias over the last axis; weight is (out, in)"""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input features {x.shape[-1]} != weight input {weight.shape[1]}")
    lead = x.shape[:-1]
    out = matmul(reshape(x, (-1, x.shape[-1])), transpose(weight))
    if bias is not None:
        out = out + bias
    return reshape(out, lead + (weight.shape[0],))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """
    Normalize over the last axis, then apply the affine (gamma, beta)

    Constant inputs map to beta since the variance term is guarded by eps.
    """
    x = as_tensor(x)
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(f"layer_norm: last axis {n} does not match gamma {gamma.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = inv_std / n * (
                n * dxhat - dxhat.sum(axis=-1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
            )
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out.astype(x.dtype, copy=False), (x, gamma, beta), "layer_norm", backward)


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _result(out, (x,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))"""
    x = as_tensor(x)
    d = x.data
    t = np.tanh(_SQRT_2_OVER_PI * (d + GELU_COEF * d ** 3))
    out = 0.5 * d * (1.0 + t)

    def backward(g):
        du = _SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * d * d)
        return (g * (0.5 * (1.0 + t) + 0.5 * d * (1.0 - t * t) * du),)

    return _result(out, (x,), "gelu", backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), "softmax", backward)


def activation(kind: str, x: Tensor, axis: int = -1) -> Tensor:
    """Dispatch gelu, sigmoid or softmax (over axis)"""
    if kind == "gelu":
        return gelu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "softmax":
        return softmax(x, axis)
    raise ValueError(f"unknown activation '{kind}'")


@lru_cache(maxsize=64)
def _interp_matrix(in_size: int, out_size: int) -> np.ndarray:
    scale = in_size / out_size
    src = np.maximum((np.arange(out_size) + 0.5) * scale - 0.5, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), in_size - 1)
    i1 = np.minimum(i0 + 1, in_size - 1)
    frac = src - i0
    matrix = np.zeros((out_size, in_size))
    rows = np.arange(out_size)
    np.add.at(matrix, (rows, i0), 1.0 - frac)
    np.add.at(matrix, (rows, i1), frac)
    matrix.setflags(write=False)
    return matrix


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """
    Bilinear resize of (B, C, H, W) with the align_corners=False convention

    Source coordinate for output index d is (d + 0.5) * in / out - 0.5, clamped
    below at 0; neighbours past the last row or column reuse the edge.
    """
    x = as_tensor(x)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize: output size ({out_h}, {out_w}) must be positive")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x
    ah = _interp_matrix(h, out_h).astype(x.dtype)
    aw = _interp_matrix(w, out_w).astype(x.dtype)
    out = ah @ x.data @ aw.T
    return _result(out, (x,), "bilinear_resize", lambda g: (ah.T @ g @ aw,))
