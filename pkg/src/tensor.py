"""
Dense tensor with reverse-mode automatic differentiation

Every differentiable operation records a node on the active GradientTape. A
node keeps its input tensors and a backward rule that maps the gradient of its
output to one gradient per input. Node ids grow monotonically across the
process, so sorting the nodes reachable from a loss by descending id is a valid
reverse topological order.

Tape policy: backward() consumes the nodes it traverses (their backward rules
are released) and resets the tape. Calling backward again through a consumed
node raises GradientError. Pass retain_graph=True to keep the graph alive.
Leaf gradients accumulate until zero_grad().
"""
import itertools
import logging
import threading
from contextlib import contextmanager
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import GradientError, NumericError, ShapeError

logger = logging.getLogger(__name__)

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
Axes = Optional[Union[int, Sequence[int]]]

_NODE_IDS = itertools.count()


class TapeNode:
    """One recorded operation: inputs plus the rule that propagates gradients to them"""

    __slots__ = ("id", "op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: Tuple["Tensor", ...], backward_fn: BackwardFn):
        self.id = next(_NODE_IDS)
        self.op = op
        self.inputs = inputs
        self.backward_fn: Optional[BackwardFn] = backward_fn

    @property
    def consumed(self) -> bool:
        return self.backward_fn is None

    def release(self) -> None:
        self.backward_fn = None
        self.inputs = ()

    def __repr__(self) -> str:
        return f"TapeNode(id={self.id}, op={self.op}, consumed={self.consumed})"


class GradientTape:
    """Ordered record of the operations of one forward pass"""

    def __init__(self):
        self.nodes: List[TapeNode] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: Tuple["Tensor", ...], backward_fn: BackwardFn) -> TapeNode:
        node = TapeNode(op, inputs, backward_fn)
        self.nodes.append(node)
        return node

    def reset(self) -> None:
        """Forget every recorded node. Tensors built earlier keep their own node references."""
        self.nodes = []

    def backward(self, loss: "Tensor", retain_graph: bool = False) -> None:
        """
        Propagate d(loss)/d(leaf) into the .grad of every requires_grad leaf

        Args:
            loss: Scalar tensor produced on this tape
            retain_graph: Keep backward rules so the graph can be differentiated again
        """
        if not isinstance(loss, Tensor):
            raise GradientError(f"backward expects a Tensor, got {type(loss).__name__}")
        if loss.data.size != 1:
            raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise GradientError("loss is detached: nothing it depends on requires grad")

        seed = np.ones_like(loss.data)
        if loss._node is None:
            loss._accumulate(seed)
            return

        order = _reachable(loss._node)
        grads: Dict[int, np.ndarray] = {loss._node.id: seed}
        for node in order:
            grad = grads.pop(node.id, None)
            if grad is None:
                continue
            input_grads = node.backward_fn(grad)
            for inp, inp_grad in zip(node.inputs, input_grads):
                if inp_grad is None or not inp.requires_grad:
                    continue
                if inp._node is None:
                    inp._accumulate(inp_grad)
                elif inp._node.id in grads:
                    grads[inp._node.id] = grads[inp._node.id] + inp_grad
                else:
                    grads[inp._node.id] = inp_grad

        if not retain_graph:
            for node in order:
                node.release()
            self.reset()


def _reachable(root: TapeNode) -> List[TapeNode]:
    seen: Dict[int, TapeNode] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node.id in seen:
            continue
        if node.consumed:
            raise GradientError(
                f"graph through '{node.op}' was already consumed by a previous backward; "
                "rerun the forward pass or use retain_graph=True"
            )
        seen[node.id] = node
        for inp in node.inputs:
            if inp._node is not None and inp._node.id not in seen:
                stack.append(inp._node)
    return sorted(seen.values(), key=lambda n: n.id, reverse=True)


class _State(threading.local):
    def __init__(self):
        self.dtype = np.float32
        self.grad_enabled = True
        self.tape = GradientTape()


_state = _State()


def get_default_dtype() -> type:
    return _state.dtype


@contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily change the dtype new tensors and parameters are created with"""
    previous = _state.dtype
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = previous


def is_grad_enabled() -> bool:
    return _state.grad_enabled


@contextmanager
def no_grad() -> Iterator[None]:
    """Run operations without recording them on the tape"""
    previous = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


def get_tape() -> GradientTape:
    """The calling thread's tape"""
    return _state.tape


def make_rng(seed: int) -> np.random.Generator:
    """
    Create the generator that is threaded through every stochastic operation

    The algorithm is numpy's PCG64 (128-bit LCG state, 64-bit XSL-RR output)
    seeded from an unsigned 64-bit integer.
    """
    if not 0 <= int(seed) < 2 ** 64:
        raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
    return np.random.Generator(np.random.PCG64(int(seed)))


def rng_state(rng: np.random.Generator) -> Dict[str, Any]:
    """
    Snapshot of a generator's position, JSON-serialisable

    Returns:
        A fresh dict; later draws from rng do not change it
    """
    return rng.bit_generator.state


def restore_rng(state: Dict[str, Any]) -> np.random.Generator:
    """
    New generator continuing exactly where rng_state was taken

    Args:
        state: Dict returned by rng_state, possibly after a JSON round trip

    Returns:
        A PCG64 generator whose next draws match the original's
    """
    bit_generator = np.random.PCG64()
    bit_generator.state = state
    return np.random.Generator(bit_generator)


class Tensor:
    """
    N-dimensional float array participating in the gradient tape

    Args:
        data: Anything numpy can turn into an array
        requires_grad: Whether gradients should be accumulated into .grad
        dtype: Storage dtype; defaults to the array's float dtype or the default dtype
        name: Optional label used in error messages
    """

    __array_priority__ = 1000

    def __init__(self, data: Any, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
                dtype = data.dtype
            else:
                dtype = _state.dtype
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[TapeNode] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def tape_node(self) -> Optional[TapeNode]:
        return self._node

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, retain_graph: bool = False) -> None:
        get_tape().backward(self, retain_graph=retain_graph)

    def _accumulate(self, grad: np.ndarray) -> None:
        if grad.shape != self.data.shape:
            raise GradientError(f"gradient shape {grad.shape} does not match tensor shape {self.data.shape}")
        grad = np.asarray(grad, dtype=self.data.dtype)
        self.grad = grad.copy() if self.grad is None else self.grad + grad

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # Operators

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    # Methods

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def sum(self, axis: Axes = None, keepdims: bool = False) -> "Tensor":
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis: Axes = None, keepdims: bool = False) -> "Tensor":
        return reduce("mean", self, axis, keepdims)

    def max(self, axis: Axes = None, keepdims: bool = False) -> "Tensor":
        return reduce("max", self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def clip(self, low: float, high: float) -> "Tensor":
        return clip(self, low, high)


def _result(data: np.ndarray, inputs: Sequence[Tensor], op: str, backward_fn: BackwardFn) -> Tensor:
    data = np.asarray(data)
    out = Tensor(data, dtype=data.dtype)
    if _state.grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = _state.tape.record(op, tuple(inputs), backward_fn)
    return out


def as_tensor(value: Any, like: Optional[Tensor] = None) -> Tensor:
    """Wrap a constant, in like's dtype when given; tensors pass through unchanged"""
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else _state.dtype
    return Tensor(np.asarray(value, dtype=dtype), dtype=dtype)


def _pair(a: Any, b: Any) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    if isinstance(b, Tensor):
        return as_tensor(a, like=b), b
    return as_tensor(a), as_tensor(b)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> Tuple[int, ...]:
    try:
        return tuple(np.broadcast_shapes(a.shape, b.shape))
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the shape of the operand"""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# Elementwise


def add(a: Any, b: Any) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), "add", backward)


def sub(a: Any, b: Any) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), "sub", backward)


def mul(a: Any, b: Any) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), "mul", backward)


def div(a: Any, b: Any) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "div")
    if np.any(b.data == 0):
        raise NumericError("div: division by exact zero")

    def backward(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data / b.data, (a, b), "div", backward)


def neg(a: Any) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), "neg", lambda g: (-g,))


def exp(a: Any) -> Tensor:
    """Elementwise e**a. Overflows to inf above ~88 in float32; callers keep arguments bounded."""
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), "exp", lambda g: (g * out,))


def log(a: Any) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericError("log: argument must be strictly positive")
    return _result(np.log(a.data), (a,), "log", lambda g: (g / a.data,))


def power(a: Any, exponent: Any) -> Tensor:
    if isinstance(exponent, Tensor):
        a, exponent = _pair(a, exponent)
        _check_broadcast(a, exponent, "pow")
        out = np.power(a.data, exponent.data)

        def backward_tensor(g):
            ga = unbroadcast(g * exponent.data * np.power(a.data, exponent.data - 1), a.shape) if a.requires_grad else None
            gb = None
            if exponent.requires_grad:
                safe = np.where(a.data > 0, a.data, 1)
                gb = unbroadcast(g * out * np.log(safe), exponent.shape)
            return ga, gb

        return _result(out, (a, exponent), "pow", backward_tensor)

    a = as_tensor(a)
    p = float(exponent)
    out = np.power(a.data, a.data.dtype.type(p))

    def backward(g):
        return (g * p * np.power(a.data, a.data.dtype.type(p - 1)),)

    return _result(out, (a,), "pow", backward)


_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div, "pow": power}
_UNARY = {"exp": exp, "log": log, "neg": neg}


def elementwise(kind: str, a: Any, b: Any = None) -> Tensor:
    """Dispatch one of add, sub, mul, div, exp, log, neg, pow"""
    if kind in _BINARY:
        if b is None:
            raise ValueError(f"elementwise '{kind}' needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        return _UNARY[kind](a)
    raise ValueError(f"unknown elementwise kind '{kind}'")


def clip(a: Tensor, low: float, high: float) -> Tensor:
    """Clamp values; gradient flows only where the input was inside [low, high]"""
    a = as_tensor(a)
    out = np.clip(a.data, low, high)
    inside = (a.data >= low) & (a.data <= high)
    return _result(out, (a,), "clip", lambda g: (g * inside,))


# Contraction


def matmul(a: Any, b: Any) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands with at least 2 dims, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch dimensions are not broadcastable: {a.shape} @ {b.shape}") from None

    def backward(g):
        ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _result(np.matmul(a.data, b.data), (a, b), "matmul", backward)


# Reductions


def _normalize_axes(axes: Axes, ndim: int, op: str) -> Tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, (int, np.integer)):
        axes = (int(axes),)
    axes = tuple(axes)
    if not axes:
        raise ShapeError(f"{op}: empty axis list")
    normalized = []
    for axis in axes:
        if not -ndim <= axis < ndim:
            raise ShapeError(f"{op}: axis {axis} out of range for a {ndim}-d tensor")
        normalized.append(axis % ndim)
    if len(set(normalized)) != len(normalized):
        raise ShapeError(f"{op}: repeated axis in {axes}")
    return tuple(sorted(normalized))


def reduce(kind: str, x: Any, axes: Axes = None, keepdims: bool = False) -> Tensor:
    """
    Reduce over the given axes

    Args:
        kind: 'sum', 'mean' or 'max'
        x: Input tensor
        axes: An axis, a sequence of axes, or None for all
        keepdims: Keep reduced axes with length 1

    Returns:
        Reduced tensor. Mean spreads 1/n of the gradient to every element;
        max routes it to the first maximal element only.
    """
    x = as_tensor(x)
    axes = _normalize_axes(axes, x.ndim, kind)

    def expand(g):
        return g if keepdims or not axes else np.expand_dims(g, axes)

    if kind == "sum":
        out = np.sum(x.data, axis=axes, keepdims=keepdims)
        return _result(out, (x,), "sum", lambda g: (np.broadcast_to(expand(g), x.shape),))

    if kind == "mean":
        count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
        out = np.mean(x.data, axis=axes, keepdims=keepdims)
        return _result(out, (x,), "mean", lambda g: (np.broadcast_to(expand(g) / count, x.shape),))

    if kind == "max":
        out = np.max(x.data, axis=axes, keepdims=keepdims)

        def backward(g):
            return (_first_max_mask(x.data, axes) * expand(g),)

        return _result(out, (x,), "max", backward)

    raise ValueError(f"unknown reduction '{kind}'")


def _first_max_mask(data: np.ndarray, axes: Tuple[int, ...]) -> np.ndarray:
    if not axes:
        return np.ones_like(data)
    k = len(axes)
    moved = np.moveaxis(data, axes, tuple(range(-k, 0)))
    flat = moved.reshape(moved.shape[: moved.ndim - k] + (-1,))
    index = np.argmax(flat, axis=-1)
    mask = np.zeros_like(flat)
    np.put_along_axis(mask, index[..., None], 1, axis=-1)
    return np.moveaxis(mask.reshape(moved.shape), tuple(range(-k, 0)), axes)


def sum(x: Any, axis: Axes = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return reduce("sum", x, axis, keepdims)


def mean(x: Any, axis: Axes = None, keepdims: bool = False) -> Tensor:
    return reduce("mean", x, axis, keepdims)


def amax(x: Any, axis: Axes = None, keepdims: bool = False) -> Tensor:
    return reduce("max", x, axis, keepdims)


# Shape manipulation


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} into {tuple(shape)}") from None
    return _result(out, (x,), "reshape", lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ShapeError(f"invalid permutation {axes} for a {x.ndim}-d tensor")
    inverse = tuple(np.argsort([a % x.ndim for a in axes]))
    return _result(np.transpose(x.data, axes), (x,), "transpose", lambda g: (np.transpose(g, inverse),))


def swapaxes(x: Tensor, axis1: int, axis2: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[axis1], axes[axis2] = axes[axis2], axes[axis1]
    return transpose(x, axes)


def _is_basic_index(index: Any) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis for i in items)


def getitem(x: Tensor, index: Any) -> Tensor:
    """Basic slicing or integer-array indexing; repeated indices accumulate in backward"""
    x = as_tensor(x)
    if isinstance(index, Tensor):
        index = index.data.astype(np.int64)
    out = np.array(x.data[index])
    basic = _is_basic_index(index)

    def backward(g):
        grad = np.zeros_like(x.data)
        if basic:
            grad[index] = g
        else:
            np.add.at(grad, index, g)
        return (grad,)

    return _result(out, (x,), "getitem", backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """
    Join tensors along an existing axis

    Raises:
        ShapeError: The list is empty or the other axes disagree
    """
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[d] != tensors[0].shape[d] for d in range(ndim) if d != axis):
            raise ShapeError(f"concat: shape {t.shape} incompatible with {tensors[0].shape} along axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat", backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = []
    for t in tensors:
        ax = axis % (t.ndim + 1)
        expanded.append(reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]))
    return concat(expanded, axis=axis)


def pad(x: Tensor, pad_width: Sequence[Tuple[int, int]]) -> Tensor:
    """Zero padding; pad_width has one (before, after) pair per axis"""
    x = as_tensor(x)
    pad_width = [tuple(int(v) for v in p) for p in pad_width]
    if len(pad_width) != x.ndim or any(v < 0 for p in pad_width for v in p):
        raise ShapeError(f"pad: invalid pad width {pad_width} for shape {x.shape}")
    crop = tuple(slice(before, before + size) for (before, _), size in zip(pad_width, x.shape))
    return _result(np.pad(x.data, pad_width), (x,), "pad", lambda g: (g[crop],))


def roll(x: Tensor, shifts: Sequence[int], axes: Sequence[int]) -> Tensor:
    """Cyclic shift along axes"""
    x = as_tensor(x)
    shifts = tuple(int(s) for s in shifts)
    axes = tuple(int(a) for a in axes)
    back = tuple(-s for s in shifts)
    return _result(np.roll(x.data, shifts, axis=axes), (x,), "roll", lambda g: (np.roll(g, back, axis=axes),))


def zeros(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=_state.dtype), requires_grad=requires_grad)


def ones(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(tuple(shape), dtype=_state.dtype), requires_grad=requires_grad)
