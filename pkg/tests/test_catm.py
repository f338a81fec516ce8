import numpy as np
import pytest

from src.catm import CATM, SpatialAttention, catm_forward, shared_spatial_attention
from src.exceptions import ConfigError, ShapeError
from src.gradcheck import check_gradients
from src.model import ScaleFusionNet
from src.swin import to_feature_map, to_tokens
from src.tensor import Tensor, no_grad


@pytest.fixture
def catm(rng):
    return CATM(8, 2, 4, (4, 4), SpatialAttention(rng), rng)


def test_output_keeps_skip_shape(catm, rng):
    skip = Tensor(rng.normal(size=(2, 8, 4, 4)).astype(np.float32))
    dec = Tensor(rng.normal(size=(2, 8, 4, 4)).astype(np.float32))
    assert catm(skip, dec).shape == (2, 8, 4, 4)


def test_smaller_decoder_map_is_resized(catm, rng):
    skip = Tensor(rng.normal(size=(1, 8, 4, 4)).astype(np.float32))
    dec = Tensor(rng.normal(size=(1, 8, 2, 2)).astype(np.float32))
    assert catm(skip, dec).shape == (1, 8, 4, 4)


def test_cross_attention_rows_sum_to_one(catm, rng):
    skip = Tensor(rng.normal(size=(1, 8, 4, 4)).astype(np.float32))
    with no_grad():
        q, k, v = catm.derive_qkv(Tensor(rng.normal(size=(1, 8, 4, 4)).astype(np.float32)))
        _, attn = catm.caf_fuse(skip, q, k, v, return_attention=True)
    assert attn.shape == (1, 2, 16, 16)
    np.testing.assert_allclose(attn.data.sum(axis=-1), 1.0, atol=1e-6)


def test_qkv_misalignment_raises(catm, rng):
    skip = Tensor(rng.normal(size=(1, 8, 4, 4)))
    q = Tensor(rng.normal(size=(1, 15, 8)))
    with pytest.raises(ShapeError):
        catm.caf_fuse(skip, q, q, q)
    with pytest.raises(ShapeError):
        catm.derive_qkv(Tensor(rng.normal(size=(1, 6, 4, 4))))


def test_heads_must_divide_width(rng):
    with pytest.raises(ConfigError):
        CATM(6, 4, 4, (4, 4), SpatialAttention(rng), rng)


def test_disabled_module_passes_skip_through(rng):
    skip = Tensor(rng.normal(size=(1, 4, 2, 2)))
    assert catm_forward(None, skip, Tensor(rng.normal(size=(1, 4, 2, 2)))) is skip


def test_spatial_attention_gate_is_a_probability(rng):
    sa = SpatialAttention(rng)
    x = Tensor(rng.normal(size=(2, 5, 6, 6)).astype(np.float32))
    gate = sa.gate(x).data
    assert gate.shape == (2, 1, 6, 6)
    assert ((gate > 0) & (gate < 1)).all()
    np.testing.assert_allclose(shared_spatial_attention(x, sa).data, x.data * gate, rtol=1e-6)


def test_one_spatial_attention_is_shared_by_every_stage(micro_config, rng):
    model = ScaleFusionNet(micro_config, rng)
    assert model.catm0.shared_sa is model.shared_sa
    assert model.catm1.shared_sa is model.shared_sa
    assert model.catm2.shared_sa is model.shared_sa
    names = [name for name, _ in model.named_parameters()]
    assert sum(name.endswith("shared_sa.conv.weight") for name in names) == 1
    assert "shared_sa.conv.weight" in names


def test_shared_gate_receives_gradient_from_every_stage(micro_config, rng):
    model = ScaleFusionNet(micro_config, rng)
    image = Tensor(rng.random((1, 3, 32, 32)).astype(np.float32))
    feats = model.encode(image)
    skip_sum = None
    for level in range(3):
        out = model.__dict__[f"catm{level}"](feats[level], feats[level])
        skip_sum = out.sum() if skip_sum is None else skip_sum + out.sum()
    skip_sum.backward()
    assert model.shared_sa.conv.weight.grad is not None
    assert np.abs(model.shared_sa.conv.weight.grad).sum() > 0


def test_catm_gradients(rng, float64):
    sa = SpatialAttention(rng, kernel_size=3)
    catm = CATM(4, 2, 2, (2, 2), sa, rng)
    # a zero output projection would leave the attention weights without gradient
    catm.out_proj.weight.data = rng.normal(scale=0.5, size=(4, 4))
    skip = Tensor(rng.normal(size=(1, 4, 2, 2)), requires_grad=True)
    dec = Tensor(rng.normal(size=(1, 4, 2, 2)), requires_grad=True)
    cotangent = Tensor(rng.normal(size=(1, 4, 2, 2)))
    params = [catm.q.weight, catm.ks.weight, sa.conv.weight]
    report = check_gradients(lambda: (catm(skip, dec) * cotangent).sum(), [skip, dec] + params)
    assert report.passed, report.errors


def test_single_stage_loss_reaches_the_shared_gate(micro_config, rng, float64):
    model = ScaleFusionNet(micro_config, rng)
    image = Tensor(rng.random((1, 3, 32, 32)))

    def gate_grad(levels):
        model.zero_grad()
        feats = model.encode(image)
        loss = None
        for level in levels:
            out = getattr(model, f"catm{level}")(feats[level], feats[level]).sum()
            loss = out if loss is None else loss + out
        loss.backward()
        return model.shared_sa.conv.weight.grad.copy()

    per_stage = [gate_grad([level]) for level in range(3)]
    for grad in per_stage:
        assert np.abs(grad).sum() > 0
    np.testing.assert_allclose(sum(per_stage), gate_grad([0, 1, 2]), rtol=1e-9, atol=1e-12)


def test_fresh_module_reduces_to_gated_layer_norm(rng, float64):
    sa = SpatialAttention(rng)
    catm = CATM(8, 2, 4, (4, 4), sa, rng)
    assert not catm.out_proj.weight.data.any() and not catm.out_proj.bias.data.any()
    skip = Tensor(rng.normal(size=(2, 8, 4, 4)))
    dec = Tensor(rng.normal(size=(2, 8, 2, 2)))
    with no_grad():
        expected = sa(to_feature_map(catm.norm(to_tokens(skip))))
        np.testing.assert_allclose(catm(skip, dec).data, expected.data, atol=1e-12)


def test_zeroed_out_projection_ignores_the_decoder(catm, rng):
    catm.out_proj.weight.data = rng.normal(scale=0.1, size=catm.out_proj.weight.shape).astype(np.float32)
    skip = Tensor(rng.normal(size=(1, 8, 4, 4)).astype(np.float32))
    decoders = [Tensor(rng.normal(size=(1, 8, 4, 4)).astype(np.float32)) for _ in range(2)]
    with no_grad():
        assert not np.allclose(catm(skip, decoders[0]).data, catm(skip, decoders[1]).data)
        catm.out_proj.weight.data[:] = 0.0
        np.testing.assert_allclose(catm(skip, decoders[0]).data, catm(skip, decoders[1]).data, atol=1e-6)
