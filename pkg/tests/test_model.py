import numpy as np
import pytest

from src.exceptions import ConfigError, ShapeError
from src.gradcheck import check_gradients
from src.metrics import total_loss
from src.model import (
    PROFILES,
    ModelConfig,
    ScaleFusionNet,
    ablation_configs,
    build_model,
    count_params,
)
from src.tensor import Tensor, make_rng, no_grad
from src.trainer import AdamW, TrainConfig


def _image(batch, size, seed=0):
    return Tensor(make_rng(seed).random((batch, 3, size, size)).astype(np.float32))


def test_forward_produces_probabilities(micro_config):
    model = build_model(micro_config, seed=0)
    with no_grad():
        out = model(_image(2, 32))
    assert out.shape == (2, 1, 32, 32)
    assert ((out.data > 0) & (out.data < 1)).all()


def test_encoder_pyramid_shapes(micro_config):
    model = build_model(micro_config, seed=0)
    with no_grad():
        pyramid = model.encode(_image(1, 32))
    assert [f.shape for f in pyramid] == [(1, 8, 8, 8), (1, 16, 4, 4), (1, 32, 2, 2), (1, 64, 1, 1)]


@pytest.mark.slow
def test_paper_profile_shape_contract():
    model = build_model(ModelConfig.from_profile("paper"), seed=0)
    with no_grad():
        pyramid = model.encode(_image(1, 256))
        logits = model.decode(pyramid)
    assert [f.shape for f in pyramid] == [(1, 96, 64, 64), (1, 192, 32, 32), (1, 384, 16, 16), (1, 768, 8, 8)]
    assert logits.shape == (1, 1, 256, 256)


def test_tiny_profile_builds_and_runs():
    cfg = ModelConfig.from_profile("tiny")
    assert (cfg.input_size, cfg.embed_dim, cfg.heads) == (64, 24, (1, 2, 4, 8))
    model = build_model(cfg, seed=0)
    with no_grad():
        assert model(_image(1, 64)).shape == (1, 1, 64, 64)


def test_wrong_input_shape_raises(micro_config):
    model = build_model(micro_config, seed=0)
    with pytest.raises(ShapeError):
        model(_image(1, 64))


@pytest.mark.parametrize(
    "overrides,key",
    [
        ({"input_size": 256, "window": 7}, "window"),
        ({"input_size": 60}, "input_size"),
        ({"embed_dim": 10}, "embed_dim"),
        ({"heads": (1, 2, 4, 5)}, "heads"),
        ({"depths": (2, 2, 6)}, "depths"),
        ({"mlp_ratio": 0.0}, "mlp_ratio"),
        ({"out_channels": 2}, "out_channels"),
    ],
)
def test_invalid_configs_name_the_key(overrides, key):
    with pytest.raises(ConfigError) as err:
        ModelConfig.from_profile("tiny", **overrides).validate()
    assert err.value.key == key


def test_unknown_profile_and_keys_rejected():
    with pytest.raises(ConfigError):
        ModelConfig.from_profile("huge")
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"embed_dim": 24, "dropout": 0.1})


def test_config_dict_roundtrip():
    cfg = ModelConfig.from_profile("tiny", use_afb=False)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_profiles_follow_the_encoder_plan():
    for values in PROFILES.values():
        assert values["depths"] == (2, 2, 6, 2)
        assert values["window"] == 8


def test_same_seed_same_weights(micro_config):
    a = build_model(micro_config, seed=3).state_dict()
    b = build_model(micro_config, seed=3).state_dict()
    c = build_model(micro_config, seed=4).state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a if a[k].any())


def test_parameter_paths_are_canonical(micro_config):
    names = dict(build_model(micro_config, seed=0).named_parameters())
    for path in (
        "encoder.patch_embed.proj.weight",
        "encoder.stage0.block1.attn.qkv.weight",
        "encoder.merge2.reduction.weight",
        "catm0.q.weight",
        "afb3.swin_conv.weight",
        "afb2.reduce.weight",
        "afb0.deform.offset.weight",
        "head.classifier.bias",
    ):
        assert path in names


def test_ablation_parameter_counts_are_monotonic(micro_config):
    counts = {name: count_params(build_model(cfg, seed=0)) for name, cfg in ablation_configs(micro_config).items()}
    assert counts["method0"] < counts["method1"] < counts["full"]
    assert counts["method0"] < counts["method2_afb_only"] < counts["full"]


def test_every_ablation_wiring_runs_and_trains_a_step(micro_config):
    for name, cfg in ablation_configs(micro_config).items():
        model = build_model(cfg, seed=0)
        loss = total_loss(model(_image(1, 32)), np.zeros((1, 1, 32, 32), dtype=np.float32))
        loss.backward()
        grads = [p.grad for p in model.parameters()]
        assert all(g is not None for g in grads), name
        assert np.isfinite(loss.item())


def test_images_in_a_batch_do_not_interact(micro_config):
    model = build_model(micro_config, seed=0)
    pair = _image(2, 32, seed=5)
    with no_grad():
        together = model(pair).data
        apart = [model(Tensor(pair.data[i : i + 1])).data for i in range(2)]
    np.testing.assert_allclose(together, np.concatenate(apart), atol=1e-5)


def test_every_parameter_receives_a_nonzero_gradient():
    # 64 px input keeps the deepest stage at 2x2, so no attention window holds a single token
    cfg = ModelConfig.from_profile("custom", input_size=64, embed_dim=8, depths=(2, 2, 2, 2), heads=(1, 1, 2, 2), window=4)
    model = build_model(cfg, seed=0)
    image = _image(1, 64, seed=1)
    truth = (make_rng(2).random((1, 1, 64, 64)) > 0.5).astype(np.float32)
    optimizer = AdamW(model.named_parameters(), TrainConfig(lr=1e-2))

    # one update moves the zero-initialised CATM output projections off zero
    total_loss(model(image), truth).backward()
    optimizer.step()
    optimizer.zero_grad()

    total_loss(model(image), truth).backward()
    for name, p in model.named_parameters():
        assert p.grad is not None and np.abs(p.grad).sum() > 0, name


def test_feature_hook_sees_named_intermediates(micro_config):
    model = build_model(micro_config, seed=0)
    seen = {}
    model.set_feature_hook(lambda name, x: seen.setdefault(name, x.shape))
    with no_grad():
        model(_image(1, 32))
    model.set_feature_hook(None)
    assert seen["patch_embed"] == (1, 8, 8, 8)
    assert seen["encoder.stage3"] == (1, 64, 1, 1)
    assert seen["decoder.up2"] == (1, 32, 2, 2)
    assert seen["decoder.catm0"] == (1, 8, 8, 8)
    assert seen["decoder.afb0"] == (1, 8, 8, 8)
    assert "_hook" not in dict(model.named_modules())


def test_model_slice_gradients(micro_config, float64):
    model = ScaleFusionNet(micro_config, make_rng(0))
    image = Tensor(make_rng(1).random((1, 3, 32, 32)))
    truth = (make_rng(2).random((1, 1, 32, 32)) > 0.5).astype(np.float64)
    params = [model.head.classifier.weight, model.head.classifier.bias, model.encoder.patch_embed.norm.bias]
    report = check_gradients(lambda: total_loss(model(image), truth), params, ["classifier.w", "classifier.b", "embed_norm.b"])
    assert report.passed, report.errors
