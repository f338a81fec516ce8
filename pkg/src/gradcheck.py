"""
Finite-difference gradient verification
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence

import numpy as np

from .tensor import Tensor, get_tape, no_grad

logger = logging.getLogger(__name__)


def finite_difference_grad(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """
    Central-difference estimate of d f(x) / d x

    Args:
        f: Deterministic function returning a scalar tensor
        x: Point of evaluation; its data is perturbed in place and restored
        h: Step size

    Returns:
        Array shaped like x with (f(x + h e_i) - f(x - h e_i)) / 2h per element
    """
    if not x.data.flags.c_contiguous:
        x.data = np.ascontiguousarray(x.data)
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            f_plus = float(np.sum(f(x).data, dtype=np.float64))
            flat[i] = original - h
            f_minus = float(np.sum(f(x).data, dtype=np.float64))
            flat[i] = original
            grad.reshape(-1)[i] = (f_plus - f_minus) / (2 * h)
    return grad.astype(x.dtype)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-based relative error ||a - n|| / (||a|| + ||n||); 0 when both vanish"""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


@dataclass
class GradCheckReport:
    """Per-input relative errors of one gradient check"""

    errors: Dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-6

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def worst(self) -> Optional[str]:
        if not self.errors:
            return None
        return max(self.errors, key=self.errors.get)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    names: Optional[Sequence[str]] = None,
    h: float = 1e-5,
    tolerance: float = 1e-6,
) -> GradCheckReport:
    """
    Compare backward() against central differences for every tensor in inputs

    Args:
        loss_fn: Closure computing a scalar loss from the captured inputs
        inputs: Tensors (requires_grad) to differentiate with respect to
        names: Labels for the report, defaults to input positions
        h: Finite-difference step
        tolerance: Threshold used by report.passed

    Returns:
        GradCheckReport keyed by input name
    """
    names = list(names) if names is not None else [f"input{i}" for i in range(len(inputs))]
    for t in inputs:
        t.zero_grad()
    get_tape().reset()
    loss_fn().backward()

    report = GradCheckReport(tolerance=tolerance)
    for name, t in zip(names, inputs):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = finite_difference_grad(lambda _x: loss_fn(), t, h)
        report.errors[name] = relative_error(analytic, numeric)
        logger.debug(f"gradcheck {name}: rel. error {report.errors[name]:.3e}")

    if not report.passed:
        logger.warning(f"gradient check failed at {report.worst()} with error {report.max_error:.3e}")
    return report
