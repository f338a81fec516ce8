import threading

import numpy as np
import pytest

from src.exceptions import GradientError, NumericError, ShapeError
from src.gradcheck import check_gradients, finite_difference_grad, relative_error
from src.tensor import (
    Tensor,
    concat,
    default_dtype,
    get_default_dtype,
    get_tape,
    getitem,
    is_grad_enabled,
    make_rng,
    matmul,
    no_grad,
    pad,
    restore_rng,
    rng_state,
    roll,
    stack,
)


def test_broadcast_add_mul_gradients():
    a = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    b = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    ((a + b) * b).sum().backward()
    np.testing.assert_allclose(a.grad, np.tile([1.0, 2.0, 3.0], (2, 1)))
    # d/db sum((a + b) b) = sum over rows of (a + 2b)
    np.testing.assert_allclose(b.grad, a.data.sum(axis=0) + 4 * b.data)


def test_composite_expression_passes_gradcheck(rng, float64):
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    c = Tensor(rng.uniform(0.5, 2.0, size=(3, 2)), requires_grad=True)

    def loss():
        z = (a @ b).exp() / c + (c ** 2.5).log() - a.mean(axis=1, keepdims=True)
        return (z * z).sum()

    report = check_gradients(loss, [a, b, c], ["a", "b", "c"])
    assert report.passed, report.errors


def test_shape_ops_pass_gradcheck(rng, float64):
    x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    y = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)

    def loss():
        z = concat([x, y], axis=1).transpose(0, 2, 1).reshape(2, -1)
        z = pad(z, [(1, 0), (0, 2)])
        z = roll(z, (1,), (1,))
        z = z * stack([x.sum(axis=(1, 2)), y.max(axis=(1, 2))], axis=0).sum()
        return (z[:, 3:] ** 2).sum()

    report = check_gradients(loss, [x, y])
    assert report.passed, report.errors


def test_integer_index_accumulates_repeated_entries():
    x = Tensor(np.arange(4.0), requires_grad=True)
    getitem(x, np.array([0, 0, 2])).sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, 0.0, 1.0, 0.0])


def test_max_routes_gradient_to_first_maximum():
    x = Tensor(np.array([[1.0, 3.0, 3.0]]), requires_grad=True)
    x.max(axis=1).sum().backward()
    np.testing.assert_array_equal(x.grad, [[0.0, 1.0, 0.0]])


def test_division_by_exact_zero_raises():
    with pytest.raises(NumericError):
        Tensor(np.ones(3)) / Tensor(np.array([1.0, 0.0, 2.0]))


def test_log_of_non_positive_raises():
    with pytest.raises(NumericError):
        Tensor(np.array([1.0, -1.0])).log()


def test_matmul_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_broadcast_failure_raises_shape_error():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))


@pytest.mark.parametrize("axes", [(), (5,), (0, 0)])
def test_invalid_reduction_axes_raise(axes):
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))).sum(axis=axes)


def test_backward_requires_scalar_loss():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GradientError):
        (x * 2).backward()


def test_backward_on_detached_loss_raises():
    with pytest.raises(GradientError):
        Tensor(np.ones(3)).sum().backward()


def test_second_backward_through_consumed_graph_raises():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = (x * x).sum()
    loss.backward()
    with pytest.raises(GradientError):
        loss.backward()


def test_retain_graph_allows_second_backward_and_accumulates():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    loss = (x * x).sum()
    loss.backward(retain_graph=True)
    loss.backward()
    np.testing.assert_allclose(x.grad, 4 * x.data)


def test_backward_resets_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    (x * 3).sum().backward()
    assert len(get_tape()) == 0


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = (x * 2).sum()
        assert not is_grad_enabled()
    assert is_grad_enabled()
    assert not y.requires_grad
    assert len(get_tape()) == 0


def test_grad_mode_is_thread_local():
    seen = []
    with no_grad():
        thread = threading.Thread(target=lambda: seen.append(is_grad_enabled()))
        thread.start()
        thread.join()
    assert seen == [True]


def test_default_dtype_context_restores():
    assert get_default_dtype() == np.float32
    with default_dtype(np.float64):
        assert Tensor([1.0, 2.0]).dtype == np.float64
    assert Tensor([1.0, 2.0]).dtype == np.float32


def test_rng_state_roundtrip_continues_stream():
    rng = make_rng(42)
    rng.random(5)
    state = rng_state(rng)
    expected = rng.random(4)
    np.testing.assert_array_equal(restore_rng(state).random(4), expected)


def test_same_seed_same_stream():
    np.testing.assert_array_equal(make_rng(9).normal(size=6), make_rng(9).normal(size=6))


def test_finite_difference_matches_known_derivative(float64):
    x = Tensor(np.array([0.3, -1.2, 2.0]))
    numeric = finite_difference_grad(lambda t: (t ** 3).sum(), x)
    np.testing.assert_allclose(numeric, 3 * x.data ** 2, rtol=1e-8)


def test_relative_error_is_zero_for_two_zero_gradients():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0


def test_gradcheck_report_flags_wrong_gradient(float64):
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    report = check_gradients(lambda: (x * x).sum(), [x], ["x"])
    assert report.passed
    report.errors["x"] = 0.5
    assert not report.passed
    assert report.worst() == "x"
