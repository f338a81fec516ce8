"""
Parameter containers and the standard layers built on them
"""
import logging
from typing import Any, Dict, Iterator, List, Optional, Set, Tuple

import numpy as np

from .exceptions import CheckpointError
from .functional import conv2d, layer_norm, linear, transposed_conv2d
from .tensor import Tensor, get_default_dtype

logger = logging.getLogger(__name__)


class Parameter(Tensor):
    """Trainable leaf tensor, stored in the default dtype"""

    def __init__(self, data: Any, name: Optional[str] = None):
        super().__init__(data, requires_grad=True, dtype=get_default_dtype(), name=name)


def trunc_normal(rng: np.random.Generator, shape: Tuple[int, ...], std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until every value lies within two standard deviations"""
    values = rng.normal(0.0, std, size=shape)
    outside = np.abs(values) > 2 * std
    while outside.any():
        values[outside] = rng.normal(0.0, std, size=int(outside.sum()))
        outside = np.abs(values) > 2 * std
    return values


def kaiming_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    """Kaiming-uniform with a = sqrt(5), i.e. U(-1/sqrt(fan_in), 1/sqrt(fan_in))"""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """
    Base class for everything holding parameters

    Parameters and child modules are discovered from instance attributes in
    assignment order, giving dotted paths such as
    "encoder.stage0.block1.attn.qkv.weight". Attributes starting with an
    underscore are ignored. A parameter reachable through several paths is
    reported once, under the first path.
    """

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _walk(self, prefix: str, seen: Set[int]) -> Iterator[Tuple[str, Any]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            path = f"{prefix}.{name}" if prefix else name
            if isinstance(value, Parameter):
                if id(value) not in seen:
                    seen.add(id(value))
                    yield path, value
            elif isinstance(value, Module):
                if id(value) not in seen:
                    seen.add(id(value))
                    yield path, value
                    yield from value._walk(path, seen)

    def named_parameters(self) -> List[Tuple[str, Parameter]]:
        return [(path, v) for path, v in self._walk("", set()) if isinstance(v, Parameter)]

    def named_modules(self) -> List[Tuple[str, "Module"]]:
        return [(path, v) for path, v in self._walk("", set()) if isinstance(v, Module)]

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {path: p.data.copy() for path, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        """
        Copy arrays into the parameters, keeping each parameter's dtype

        Args:
            state: Mapping of parameter path to array
        """
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise CheckpointError(f"parameter set differs: missing {missing[:5]}, unexpected {unexpected[:5]}")
        for path, p in params.items():
            value = np.asarray(state[path])
            if value.shape != p.shape:
                raise CheckpointError(f"{path}: stored shape {value.shape} != parameter shape {p.shape}")
            p.data = value.astype(p.dtype, copy=True)
            p.grad = None

    def to_dtype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self


class Linear(Module):
    """
    Affine map over the last axis

    Args:
        in_features: Input width
        out_features: Output width
        rng: Generator for the truncated-normal (std 0.02) weight init
        bias: Whether to add a zero-initialised bias
        zero_init: Start with an all-zero weight
    """

    def __init__(
        self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True, zero_init: bool = False
    ):
        shape = (out_features, in_features)
        self.weight = Parameter(np.zeros(shape) if zero_init else trunc_normal(rng, shape))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class Conv2d(Module):
    """Square-kernel convolution with Kaiming-uniform weights and zero bias"""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
        bias: bool = True,
        zero_init: bool = False,
    ):
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Parameter(np.zeros(shape) if zero_init else kaiming_uniform(rng, shape, fan_in))
        self.bias = Parameter(np.zeros(out_channels)) if bias else None
        self.stride = stride
        self.padding = padding

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    """Transposed convolution; weight layout (Cin, Cout, k, k)"""

    def __init__(
        self, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator, stride: int = 1
    ):
        shape = (in_channels, out_channels, kernel_size, kernel_size)
        self.weight = Parameter(kaiming_uniform(rng, shape, out_channels * kernel_size * kernel_size))
        self.bias = Parameter(np.zeros(out_channels))
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        return transposed_conv2d(x, self.weight, self.bias, self.stride)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.weight, self.bias, self.eps)
