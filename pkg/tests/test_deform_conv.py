import numpy as np
import pytest

from src.deform_conv import DeformConv2d, bilinear_sample, deform_conv2d, predict_offsets
from src.exceptions import ShapeError
from src.functional import conv2d
from src.gradcheck import check_gradients
from src.layers import Conv2d
from src.tensor import Tensor


def scalar_sample(plane, y, x):
    h, w = plane.shape
    y0, x0 = int(np.floor(y)), int(np.floor(x))
    total = 0.0
    for yy in (y0, y0 + 1):
        for xx in (x0, x0 + 1):
            if 0 <= yy < h and 0 <= xx < w:
                total += (1 - abs(y - yy)) * (1 - abs(x - xx)) * plane[yy, xx]
    return total


def naive_deform_conv(x, offsets, weight, bias, stride, padding):
    bsz, cin, h, w = x.shape
    cout, _, kh, kw = weight.shape
    ho, wo = offsets.shape[2:]
    out = np.zeros((bsz, cout, ho, wo))
    for n in range(bsz):
        for i in range(ho):
            for j in range(wo):
                samples = np.zeros((cin, kh, kw))
                for ki in range(kh):
                    for kj in range(kw):
                        k = ki * kw + kj
                        py = i * stride - padding + ki + offsets[n, 2 * k, i, j]
                        px = j * stride - padding + kj + offsets[n, 2 * k + 1, i, j]
                        for c in range(cin):
                            samples[c, ki, kj] = scalar_sample(x[n, c], py, px)
                out[n, :, i, j] = np.tensordot(weight, samples, axes=3) + bias
    return out


@pytest.mark.parametrize("stride", [1, 2])
def test_zero_offsets_equal_standard_conv(rng, float64, stride):
    x = Tensor(rng.normal(size=(2, 3, 9, 9)))
    w = Tensor(rng.normal(size=(4, 3, 3, 3)))
    b = Tensor(rng.normal(size=4))
    plain = conv2d(x, w, b, stride, 1)
    offsets = Tensor(np.zeros((2, 18) + plain.shape[2:]))
    np.testing.assert_allclose(deform_conv2d(x, offsets, w, b, stride, 1).data, plain.data, atol=1e-5)


def test_random_offsets_match_scalar_reference(rng, float64):
    x = rng.normal(size=(1, 4, 12, 12))
    w = rng.normal(size=(3, 4, 3, 3))
    b = rng.normal(size=3)
    offsets = rng.normal(scale=1.5, size=(1, 18, 12, 12))
    fast = deform_conv2d(Tensor(x), Tensor(offsets), Tensor(w), Tensor(b), 1, 1).data
    np.testing.assert_allclose(fast, naive_deform_conv(x, offsets, w, b, 1, 1), atol=1e-5)


def test_samples_outside_the_map_contribute_zero(float64):
    x = Tensor(np.ones((1, 1, 3, 3)))
    w = Tensor(np.ones((1, 1, 1, 1)))
    offsets = Tensor(np.full((1, 2, 3, 3), 10.0))
    np.testing.assert_array_equal(deform_conv2d(x, offsets, w).data, 0.0)


def test_integer_offset_shifts_the_sampling_grid(rng, float64):
    x = Tensor(rng.normal(size=(1, 1, 5, 5)))
    w = Tensor(np.ones((1, 1, 1, 1)))
    offsets = np.zeros((1, 2, 5, 5))
    offsets[:, 1] = 1.0
    out = deform_conv2d(x, Tensor(offsets), w).data[0, 0]
    np.testing.assert_allclose(out[:, :-1], x.data[0, 0, :, 1:])
    np.testing.assert_allclose(out[:, -1], 0.0)


def test_gradients_with_fractional_offsets(rng, float64):
    x = Tensor(rng.normal(size=(1, 2, 5, 5)), requires_grad=True)
    offsets = Tensor(rng.uniform(-1.5, 1.5, size=(1, 18, 5, 5)), requires_grad=True)
    w = Tensor(rng.normal(size=(2, 2, 3, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=2), requires_grad=True)
    cotangent = Tensor(rng.normal(size=(1, 2, 5, 5)))
    report = check_gradients(
        lambda: (deform_conv2d(x, offsets, w, b, 1, 1) * cotangent).sum(), [x, offsets, w, b], ["x", "offsets", "w", "b"]
    )
    assert report.passed, report.errors


def test_bilinear_sample_gradients(rng, float64):
    x = Tensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True)
    py = Tensor(rng.uniform(-0.5, 3.5, size=6), requires_grad=True)
    px = Tensor(rng.uniform(-0.5, 3.5, size=6), requires_grad=True)
    expected = [scalar_sample(x.data[0, 1], y, q) for y, q in zip(py.data, px.data)]
    np.testing.assert_allclose(bilinear_sample(x, py, px, 0, 1).data, expected)
    report = check_gradients(lambda: (bilinear_sample(x, py, px, 0, 1) ** 2).sum(), [x, py, px])
    assert report.passed, report.errors


def test_offset_shape_errors(rng):
    x = Tensor(rng.normal(size=(1, 2, 5, 5)))
    w = Tensor(rng.normal(size=(2, 2, 3, 3)))
    with pytest.raises(ShapeError):
        deform_conv2d(x, Tensor(np.zeros((1, 16, 5, 5))), w, padding=1)
    with pytest.raises(ShapeError):
        predict_offsets(x, Conv2d(2, 9, 3, rng, padding=1))


def test_layer_starts_as_plain_convolution(rng):
    layer = DeformConv2d(3, 4, rng)
    assert not layer.offset.weight.data.any()
    x = Tensor(rng.normal(size=(1, 3, 6, 6)).astype(np.float32))
    np.testing.assert_allclose(layer(x).data, layer.as_plain_conv(x).data, atol=1e-5)
    assert layer(x).shape == (1, 4, 6, 6)
