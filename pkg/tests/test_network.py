import numpy as np
import pytest

from autodiff import DiffArray, no_grad
from errors import ConfigurationError, ShapeError
from losses import total_loss
from network import (ConvKind, DecoMamba, GateKind, ModelConfig, ScaleOrder, Supervision,
                     count_flops, count_params, describe, flops_breakdown)


def _image(rng, batch=2, channels=3, size=32):
    return DiffArray(rng.standard_normal((batch, channels, size, size)).astype(np.float32))


# =============================================================================
# FORWARD PASS
# =============================================================================

def test_tiny_forward_shapes(tiny_config, rng):
    output = DecoMamba(tiny_config)(_image(rng))
    assert output.logits.shape == (2, 3, 32, 32)
    assert [aux.shape for aux in output.aux_logits] == [(2, 3, s, s) for s in (1, 2, 4, 8, 16)]


def test_feature_pyramid_strides(tiny_config, rng):
    model = DecoMamba(tiny_config).eval()
    with no_grad():
        pyramid = model.encoder(_image(rng, batch=1, size=64))
    assert pyramid.shapes() == {
        "x1": (1, 8, 64, 64),
        "x2": (1, 8, 32, 32),
        "x3": (1, 8, 16, 16),
        "x4": (1, 8, 8, 8),
        "x5": (1, 16, 4, 4),
        "x6": (1, 16, 2, 2),
    }


@pytest.mark.slow
def test_v0_bottleneck_shape(rng):
    model = DecoMamba(ModelConfig.preset("v0")).eval()
    with no_grad():
        pyramid = model.encoder(_image(rng, batch=1, size=224))
    assert pyramid.x6.shape == (1, 256, 7, 7)
    assert pyramid.x1.shape == (1, 16, 224, 224)


def test_eval_forward_is_deterministic_and_batch_independent(tiny_config, rng):
    model = DecoMamba(tiny_config).eval()
    images = _image(rng, batch=3)
    with no_grad():
        first = model(images).logits.data
        second = model(images).logits.data
        alone = model(DiffArray(images.data[1:2])).logits.data
    np.testing.assert_array_equal(first, second)
    np.testing.assert_allclose(first[1:2], alone, rtol=1e-4, atol=1e-5)


def test_every_trainable_parameter_receives_a_gradient(rng):
    # tiny is too small: 1x1 attention keys and length-1 bottleneck scans leave q and A_log flat.
    config = ModelConfig.preset("desk")
    model = DecoMamba(config)
    output = model(_image(rng, batch=2, size=96))
    gt = rng.integers(0, config.num_classes, size=(2, 96, 96))
    total_loss(output.logits, output.aux_logits, gt, config).loss.backward()
    trainable = model.block_params().trainable()
    dead = [path for path, p in trainable if p.grad is None or not np.any(p.grad)]
    assert len(trainable) > 0
    assert dead == []


def test_same_seed_builds_identical_models(tiny_config):
    a, b = DecoMamba(tiny_config), DecoMamba(tiny_config)
    for (path, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        np.testing.assert_array_equal(p.data, q.data, err_msg=path)


def test_forward_rejects_bad_images(tiny_config):
    model = DecoMamba(tiny_config)
    with pytest.raises(ShapeError):
        model(DiffArray(np.zeros((1, 1, 32, 32))))
    with pytest.raises(ShapeError):
        model(DiffArray(np.zeros((1, 3, 40, 40))))


# =============================================================================
# CONFIGURATION
# =============================================================================

@pytest.mark.parametrize("overrides, key", [
    ({"input_size": (30, 30)}, "input_size"),
    ({"num_classes": 1}, "num_classes"),
    ({"lambdas": (0.3, 0.2, 0.2, 0.2, 0.1)}, "lambdas"),
    ({"gate": "triple"}, "gate"),
    ({"ca_reduction": 5}, "ca_reduction"),
    ({"encoder_heads": (3, 1, 2, 2)}, "encoder_heads"),
    ({"decoder_widths": (16, 16, 16)}, "decoder_widths"),
])
def test_invalid_configurations(overrides, key):
    with pytest.raises(ConfigurationError) as info:
        ModelConfig.preset("tiny", **overrides)
    assert info.value.key == key


def test_unknown_preset_and_key():
    with pytest.raises(ConfigurationError):
        ModelConfig.preset("huge")
    with pytest.raises(ConfigurationError) as info:
        ModelConfig.from_dict({"num_classes": 3, "bogus": 1})
    assert info.value.key == "model.bogus"


def test_dict_round_trip_and_fingerprint(tiny_config):
    restored = ModelConfig.from_dict(tiny_config.to_dict())
    assert restored == tiny_config
    assert restored.fingerprint() == tiny_config.fingerprint()
    changed = ModelConfig.preset("tiny", alpha=2.0)
    assert changed.fingerprint() != tiny_config.fingerprint()
    assert tiny_config.diff(changed) == {"alpha": (1.0, 2.0)}


def test_scale_lambdas_follow_order():
    coarse = ModelConfig.preset("tiny")
    fine = ModelConfig.preset("tiny", msda_scale_order=ScaleOrder.FINE_FIRST)
    assert coarse.scale_lambdas()[0] == pytest.approx(1 / 15)
    assert fine.scale_lambdas() == tuple(reversed(coarse.scale_lambdas()))


# =============================================================================
# ABLATIONS
# =============================================================================

def test_dice_supervision_builds_no_heads(rng):
    model = DecoMamba(ModelConfig.preset("tiny", supervision=Supervision.DICE))
    assert not any(".head." in path for path, _ in model.named_parameters())
    assert model(_image(rng, batch=2)).aux_logits == []


def test_single_gate_ablation_drops_second_gate_attention_and_projection(rng):
    cag = DecoMamba(ModelConfig.preset("tiny"))
    ag = DecoMamba(ModelConfig.preset("tiny", gate=GateKind.AG))
    gated = [(c, a) for c, a in zip(cag.decoder.stages, ag.decoder.stages) if c.gate is not None]
    removed = sum(c.gate.ag_b.parameter_count() + c.gate.ca.parameter_count()
                  + c.gate.proj.parameter_count() for c, _ in gated)
    assert sum(c.gate.parameter_count() - a.gate.parameter_count() for c, a in gated) == removed

    # Without the projection the stage blocks see skip + decoder channels.
    downstream = sum((c.parameter_count() - c.gate.parameter_count())
                     - (a.parameter_count() - a.gate.parameter_count()) for c, a in gated)
    assert cag.parameter_count() - ag.parameter_count() == removed + downstream
    assert all(a.drb.proj is not None for _, a in gated)
    assert count_params(ag.config) == ag.parameter_count()

    output = ag(_image(rng))
    assert output.logits.shape == (2, 3, 32, 32)
    assert len(output.aux_logits) == 5


def test_deformable_and_standard_models_agree_at_init(rng):
    deformable = DecoMamba(ModelConfig.preset("tiny")).eval()
    standard = DecoMamba(ModelConfig.preset("tiny", conv=ConvKind.STANDARD)).eval()
    images = _image(rng, batch=20)
    with no_grad():
        a, b = deformable(images), standard(images)
    np.testing.assert_allclose(a.logits.data, b.logits.data, rtol=1e-4, atol=1e-5)
    for aux_a, aux_b in zip(a.aux_logits, b.aux_logits):
        np.testing.assert_allclose(aux_a.data, aux_b.data, rtol=1e-4, atol=1e-5)


def test_without_cnn_branch_last_stages_are_ungated(rng):
    model = DecoMamba(ModelConfig.preset("tiny", use_cnn_branch=False)).eval()
    assert model.encoder.stem is None
    assert [stage.gate is None for stage in model.decoder.stages] == [True, False, False, False, True, True]
    with no_grad():
        assert model(_image(rng, batch=1)).logits.shape == (1, 3, 32, 32)


def test_without_vssmb_no_scan_parameters():
    model = DecoMamba(ModelConfig.preset("tiny", use_vssmb=False))
    assert not any("vssmb" in path for path, _ in model.named_parameters())
    assert "scan" not in flops_breakdown(model.config).by_op


# =============================================================================
# COMPLEXITY
# =============================================================================

def test_flops_breakdown_covers_every_family(tiny_config):
    counter = flops_breakdown(tiny_config)
    for family in ("conv2d", "matmul", "scan", "grid_sample", "interpolate"):
        assert counter.by_op.get(family, 0) > 0
    assert count_flops(tiny_config) == counter.total
    assert count_flops(tiny_config, batch=2) == 2 * counter.total


def test_describe_header(tiny_config):
    text = describe(tiny_config, max_depth=1)
    lines = text.splitlines()
    assert lines[0] == f"DecoMamba fingerprint={tiny_config.fingerprint()}"
    assert lines[1] == f"params={count_params(tiny_config):,}"
    assert any(line.strip().startswith("decoder:") for line in lines)
