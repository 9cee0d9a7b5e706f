import numpy as np
import pytest

import spatial_ops as sp
from autodiff import DiffArray, concat, softmax
from errors import ConfigurationError, ShapeError
from nn_blocks import (AttentionGate, AttentionGateFusion, ChannelAttention, CNNStem, CoAttentionGate,
                       Conv2d, DeformableConv2d, DeformableResidualBlock, DistributionHead, Linear,
                       deformable_conv2d, gate_width)


def _zero(conv: Conv2d):
    conv.weight.data[...] = 0
    if conv.bias is not None:
        conv.bias.data[...] = 0


# =============================================================================
# MODULE BASE
# =============================================================================

def test_initialization_depends_only_on_path():
    single = AttentionGateFusion(4, 6, 8).reset_parameters(3)
    double = CoAttentionGate(4, 6, 8).reset_parameters(3)
    for path in ("ag_a.conv_x.weight", "ag_a.conv_g.weight", "ag_a.psi.bias"):
        np.testing.assert_array_equal(single.block_params()[path].data, double.block_params()[path].data)
    other_seed = CoAttentionGate(4, 6, 8).reset_parameters(4)
    assert not np.array_equal(other_seed.ag_a.conv_x.weight.data, double.ag_a.conv_x.weight.data)


def test_lazy_initialization_on_first_call(rng):
    layer = Linear(3, 2)
    assert not layer.weight.data.any()
    out = layer(DiffArray(rng.standard_normal((4, 3))))
    assert out.shape == (4, 2)
    np.testing.assert_array_equal(layer.weight.data, Linear(3, 2).reset_parameters(0).weight.data)


def test_running_statistics_are_not_trainable():
    head = DistributionHead(4, 3)
    paths = [path for path, _ in head.block_params().trainable()]
    assert "bn.running_mean" not in paths
    assert "bn.weight" in paths
    assert head.parameter_count() == 4 * 9 + 2 * 4 + 4 * 3 + 3


def test_describe_lists_children():
    lines = CoAttentionGate(4, 4, 8).describe()
    assert lines[0].startswith("<root>: CoAttentionGate")
    assert any(line.strip().startswith("ag_b:") for line in lines)


# =============================================================================
# STEM AND GATES
# =============================================================================

def test_stem_shapes_and_zero_input():
    stem = CNNStem(1, 4)
    x1, x2 = stem(DiffArray(np.zeros((2, 1, 8, 8))))
    assert x1.shape == (2, 4, 8, 8)
    assert x2.shape == (2, 4, 4, 4)
    assert not x1.data.any() and not x2.data.any()


def test_stem_rejects_odd_size():
    with pytest.raises(ShapeError):
        CNNStem(1, 4)(DiffArray(np.zeros((1, 1, 7, 8))))


def test_attention_gate_with_zero_psi_halves_input(rng):
    gate = AttentionGate(3, 5, 8).reset_parameters(1)
    _zero(gate.psi)
    x = DiffArray(rng.standard_normal((2, 3, 4, 4)))
    out = gate(x, DiffArray(rng.standard_normal((2, 5, 4, 4))))
    np.testing.assert_allclose(out.gated.data, 0.5 * x.data, rtol=1e-6)
    np.testing.assert_allclose(out.attention_map.data, 0.5)
    assert out.attention_map.shape == (2, 1, 4, 4)


def test_saturated_attention_gate_passes_input(rng):
    gate = AttentionGate(3, 3, 8).reset_parameters(1)
    _zero(gate.psi)
    gate.psi.bias.data[...] = 50.0
    x = DiffArray(rng.standard_normal((1, 3, 4, 4)))
    np.testing.assert_allclose(gate(x, x).gated.data, x.data, rtol=1e-6)


def test_attention_gate_rejects_misaligned_inputs():
    gate = AttentionGate(2, 2, 8)
    with pytest.raises(ShapeError):
        gate(DiffArray(np.ones((1, 2, 4, 4))), DiffArray(np.ones((1, 2, 2, 2))))


def test_gate_width_has_floor():
    assert gate_width(64) == 32
    assert gate_width(8) == 8


def test_channel_attention_with_zero_excitation_halves_input(rng):
    ca = ChannelAttention(16, 8).reset_parameters(2)
    _zero(ca.fc2)
    x = DiffArray(rng.standard_normal((2, 16, 3, 3)))
    np.testing.assert_allclose(ca(x).data, 0.5 * x.data, rtol=1e-6)


def test_channel_attention_requires_divisible_width():
    with pytest.raises(ConfigurationError) as info:
        ChannelAttention(12, 8)
    assert info.value.key == "ca_reduction"


def test_co_attention_gate_reduces_to_scaled_projection(rng):
    cag = CoAttentionGate(8, 8, 6).reset_parameters(5)
    _zero(cag.ag_a.psi)
    _zero(cag.ag_b.psi)
    _zero(cag.ca.fc2)
    skip = DiffArray(rng.standard_normal((2, 8, 4, 4)))
    dec = DiffArray(rng.standard_normal((2, 8, 4, 4)))
    expected = sp.conv2d(concat([skip, dec], axis=1) * 0.25, cag.proj.weight, cag.proj.bias)
    np.testing.assert_allclose(cag(skip, dec).data, expected.data, rtol=1e-5, atol=1e-6)


def test_fusion_ablation_has_fewer_parameters():
    full = CoAttentionGate(16, 16, 16).parameter_count()
    ablated = AttentionGateFusion(16, 16, 16).parameter_count()
    cag = CoAttentionGate(16, 16, 16)
    assert full - ablated == (cag.ag_b.parameter_count() + cag.ca.parameter_count()
                              + cag.proj.parameter_count())


def test_fusion_ablation_concatenates_without_projection(rng):
    fusion = AttentionGateFusion(4, 6, 8)
    skip = DiffArray(rng.standard_normal((2, 4, 5, 5)))
    dec = DiffArray(rng.standard_normal((2, 6, 5, 5)))
    out = fusion(skip, dec)
    assert fusion.out_channels == 10
    assert out.shape == (2, 10, 5, 5)
    np.testing.assert_array_equal(out.data[:, 4:], dec.data)
    np.testing.assert_array_equal(out.data[:, :4], fusion.ag_a(skip, dec).gated.data)


# =============================================================================
# DEFORMABLE CONVOLUTION
# =============================================================================

def test_deformable_conv_matches_standard_conv_at_init(rng):
    layer = DeformableConv2d(3, 4).reset_parameters(0)
    x = DiffArray(rng.standard_normal((2, 3, 6, 5)))
    expected = sp.conv2d(x, layer.weight, layer.bias, padding=1)
    np.testing.assert_allclose(layer(x).data, expected.data, rtol=1e-5, atol=1e-5)


def test_integer_offsets_shift_the_sampling_grid(rng):
    x = rng.standard_normal((1, 2, 5, 6))
    w = DiffArray(rng.standard_normal((3, 2, 3, 3)))
    offsets = np.zeros((1, 18, 5, 6))
    offsets[:, 1::2] = 1.0
    out = deformable_conv2d(DiffArray(x), w, None, DiffArray(offsets), DiffArray(np.zeros((1, 9, 5, 6))))

    extended = np.pad(x, ((0, 0), (0, 0), (0, 0), (0, 1)))
    expected = sp.conv2d(DiffArray(extended), w, padding=1).data[..., 1:]
    np.testing.assert_allclose(out.data, expected, rtol=1e-5, atol=1e-5)


def test_deformable_conv_rejects_bad_offsets():
    layer = DeformableConv2d(2, 2).reset_parameters(0)
    x = DiffArray(np.ones((1, 2, 4, 4)))
    with pytest.raises(ShapeError):
        deformable_conv2d(x, layer.weight, layer.bias, DiffArray(np.zeros((1, 9, 4, 4))),
                          DiffArray(np.zeros((1, 9, 4, 4))))


def test_residual_blocks_agree_at_init(rng):
    deformable = DeformableResidualBlock(4, 6, deformable=True).reset_parameters(9).eval()
    standard = DeformableResidualBlock(4, 6, deformable=False).reset_parameters(9).eval()
    for _ in range(20):
        x = DiffArray(rng.standard_normal((1, 4, 5, 5)))
        np.testing.assert_allclose(deformable(x).data, standard(x).data, rtol=1e-5, atol=1e-5)


def test_residual_projection_only_when_width_changes():
    assert DeformableResidualBlock(4, 4).proj is None
    assert DeformableResidualBlock(4, 8).proj is not None


def test_distribution_head_shape_and_uniform_output(rng):
    head = DistributionHead(4, 3).reset_parameters(0)
    _zero(head.proj)
    logits = head(DiffArray(rng.standard_normal((2, 4, 5, 5))))
    assert logits.shape == (2, 3, 5, 5)
    np.testing.assert_allclose(softmax(logits, axis=1).data, 1 / 3, rtol=1e-6)
