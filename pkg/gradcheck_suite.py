"""
Registered Gradient Checks

Every differentiable primitive, composite block and loss term of Deco-Mamba
has a named case here. A case builds float64 inputs on fixed small shapes and
returns the function to differentiate; run_suite() checks all of them (or a
selection) against central differences.

Key Features:
- REGISTRY: ordered name -> GradCase, grouped as primitive / block / loss
- run_case() / run_suite(): deterministic per-case seeds
- SuiteResult.table(): the pass/fail table printed by the gradcheck command
"""

import time
import zlib
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

import autodiff as ad
import spatial_ops as sp
from autodiff import DiffArray
from errors import ConfigurationError
from gradcheck import DEFAULT_TOL, CheckReport, grad_check
from losses import (deep_supervision_loss, dice_loss, dice_loss_per_class, dist_loss_scale,
                    kl_divergence_map, msda_loss, one_hot, total_loss, windowed_gt_distribution)
from network import DecoderStage, Encoder, EncoderBlock, ModelConfig, Supervision
from nn_blocks import (AttentionGate, AttentionGateFusion, ChannelAttention, CNNStem, CoAttentionGate,
                       DeformableConv2d, DeformableResidualBlock, DistributionHead, Module,
                       deformable_conv2d)
from run_logging import safe_update_log
from ssm_scan import SS2D, SSMParams, ScanLayout, VSSMBlock, selective_scan, selective_scan_1d

Inputs = List[Tuple[str, DiffArray]]
Builder = Callable[[np.random.Generator], Tuple[Callable[[], DiffArray], Inputs]]


@dataclass
class GradCase:
    name: str
    group: str
    build: Builder
    max_elements: Optional[int] = 24
    tol: float = DEFAULT_TOL


REGISTRY: "Dict[str, GradCase]" = {}


def register(name: str, group: str, max_elements: Optional[int] = 24):
    def wrap(build: Builder) -> Builder:
        REGISTRY[name] = GradCase(name, group, build, max_elements)
        return build
    return wrap


def _arr(rng: np.random.Generator, *shape, low: Optional[float] = None, high: Optional[float] = None) -> DiffArray:
    if low is None:
        return DiffArray(rng.standard_normal(shape), dtype=np.float64)
    return DiffArray(rng.uniform(low, high, size=shape), dtype=np.float64)


def _module_case(module: Module, seed: int, *named_inputs: Tuple[str, DiffArray]) -> Inputs:
    module.reset_parameters(seed).astype(np.float64)
    return list(named_inputs) + module.block_params().trainable()


# =============================================================================
# PRIMITIVES
# =============================================================================

@register("add_broadcast", "primitive")
def _add(rng):
    a, b = _arr(rng, 2, 3, 4), _arr(rng, 3, 1)
    return (lambda: ad.add(a, b)), [("a", a), ("b", b)]


@register("mul_div", "primitive")
def _mul_div(rng):
    a, b, c = _arr(rng, 3, 4), _arr(rng, 4), _arr(rng, 3, 4, low=0.5, high=2.0)
    return (lambda: ad.div(ad.mul(a, b), c)), [("a", a), ("b", b), ("c", c)]


@register("exp_log", "primitive")
def _exp_log(rng):
    a, b = _arr(rng, 3, 4), _arr(rng, 3, 4, low=0.2, high=3.0)
    return (lambda: ad.add(ad.exp(a), ad.log(b))), [("a", a), ("b", b)]


@register("activations", "primitive")
def _activations(rng):
    x = _arr(rng, 2, 3, 4)
    return (lambda: ad.concat([ad.relu(x), ad.silu(x), ad.softplus(x), ad.tanh(x), ad.gelu(x)], axis=0)), \
        [("x", x)]


@register("sigmoid", "primitive")
def _sigmoid(rng):
    x = _arr(rng, 3, 5)
    return (lambda: ad.sigmoid(x)), [("x", x)]


@register("clamp_min", "primitive")
def _clamp(rng):
    x = _arr(rng, 4, 4)
    return (lambda: ad.clamp_min(x, 0.1)), [("x", x)]


@register("matmul", "primitive")
def _matmul(rng):
    a, b = _arr(rng, 2, 3, 4), _arr(rng, 4, 5)
    return (lambda: ad.matmul(a, b)), [("a", a), ("b", b)]


@register("shape_ops", "primitive")
def _shape_ops(rng):
    a, b = _arr(rng, 2, 3, 4), _arr(rng, 2, 2, 4)

    def fn():
        joined = ad.concat([a, b], axis=1)
        moved = ad.permute(ad.flip(joined, axis=2), (2, 0, 1))
        return ad.transpose(ad.reshape(moved, (4, 10)))
    return fn, [("a", a), ("b", b)]


@register("getitem", "primitive")
def _getitem(rng):
    x = _arr(rng, 3, 4, 5)
    index = np.array([0, 2, 2])
    return (lambda: ad.add(x[:, 1:3, ...], x[index][:, 1:3])), [("x", x)]


@register("reductions", "primitive")
def _reductions(rng):
    x = _arr(rng, 2, 3, 4)
    return (lambda: ad.concat([ad.reduce_sum(x, axis=1), ad.reduce_mean(x, axis=1),
                               ad.reduce_max(x, axis=1)], axis=0)), [("x", x)]


@register("softmax", "primitive")
def _softmax(rng):
    x = _arr(rng, 2, 4, 3)
    return (lambda: ad.add(ad.softmax(x, axis=1), ad.log_softmax(x, axis=-1))), [("x", x)]


@register("conv2d", "primitive")
def _conv2d(rng):
    x, w, b = _arr(rng, 2, 3, 6, 6), _arr(rng, 4, 3, 3, 3), _arr(rng, 4)
    return (lambda: sp.conv2d(x, w, b, stride=2, padding=1)), [("x", x), ("w", w), ("b", b)]


@register("depthwise_conv2d", "primitive")
def _depthwise(rng):
    x, w, b = _arr(rng, 2, 3, 5, 5), _arr(rng, 3, 1, 3, 3), _arr(rng, 3)
    return (lambda: sp.depthwise_conv2d(x, w, b)), [("x", x), ("w", w), ("b", b)]


@register("batch_norm", "primitive")
def _batch_norm(rng):
    x, gamma, beta = _arr(rng, 2, 3, 4, 4), _arr(rng, 3, low=0.5, high=1.5), _arr(rng, 3)
    running_mean, running_var = np.zeros(3), np.ones(3)
    return (lambda: sp.batch_norm(x, gamma, beta, running_mean, running_var, True)), \
        [("x", x), ("gamma", gamma), ("beta", beta)]


@register("layer_norm", "primitive")
def _layer_norm(rng):
    x, gamma, beta = _arr(rng, 2, 5, 6), _arr(rng, 6, low=0.5, high=1.5), _arr(rng, 6)
    return (lambda: sp.layer_norm(x, gamma, beta)), [("x", x), ("gamma", gamma), ("beta", beta)]


@register("pools", "primitive")
def _pools(rng):
    x = _arr(rng, 2, 3, 4, 4)

    def fn():
        pooled = ad.add(sp.pool2d(x, "max", 2), sp.pool2d(x, "avg", 2))
        glob = ad.add(sp.adaptive_pool2d(x, "max"), sp.adaptive_pool2d(x, "avg"))
        return ad.add(pooled, glob)
    return fn, [("x", x)]


@register("upsample", "primitive")
def _upsample(rng):
    x, y = _arr(rng, 1, 2, 3, 3), _arr(rng, 1, 2, 4, 5)
    return (lambda: ad.concat([ad.reshape(sp.bilinear_upsample(x, 2), (1, 2, -1)),
                               ad.reshape(sp.resize_bilinear(y, 6, 3), (1, 2, -1))], axis=2)), \
        [("x", x), ("y", y)]


@register("grid_sample", "primitive")
def _grid_sample(rng):
    x = _arr(rng, 2, 2, 4, 5)
    coords = DiffArray(np.stack([rng.uniform(-1.5, 5.5, size=(2, 3, 2, 2)),
                                 rng.uniform(-1.5, 4.5, size=(2, 3, 2, 2))], axis=-1), dtype=np.float64)
    return (lambda: sp.grid_sample_bilinear(x, coords)), [("x", x), ("coords", coords)]


@register("deformable_conv2d", "primitive")
def _deformable(rng):
    x, w, b = _arr(rng, 1, 2, 4, 4), _arr(rng, 3, 2, 3, 3), _arr(rng, 3)
    offsets = DiffArray(rng.uniform(-0.9, 0.9, size=(1, 18, 4, 4)), dtype=np.float64)
    mask = _arr(rng, 1, 9, 4, 4)
    return (lambda: deformable_conv2d(x, w, b, offsets, mask)), \
        [("x", x), ("w", w), ("b", b), ("offsets", offsets), ("mask", mask)]


@register("selective_scan", "primitive")
def _scan(rng):
    seqs, length, channels, state = 2, 5, 3, 2
    x = _arr(rng, seqs, length, channels)
    delta = _arr(rng, seqs, length, channels, low=0.1, high=1.0)
    A = _arr(rng, channels, state, low=-2.0, high=-0.5)
    B, C, D = _arr(rng, seqs, length, state), _arr(rng, seqs, length, state), _arr(rng, channels)
    return (lambda: selective_scan(x, delta, A, B, C, D)), \
        [("x", x), ("delta", delta), ("A", A), ("B", B), ("C", C), ("D", D)]


def _ssm_params(rng, channels: int, state: int, rank: int) -> SSMParams:
    return SSMParams(A_log=_arr(rng, channels, state, low=-0.5, high=0.7), D_skip=_arr(rng, channels),
                     x_proj_weight=DiffArray(0.5 * rng.standard_normal((channels, rank + 2 * state)),
                                             dtype=np.float64),
                     dt_proj_weight=_arr(rng, rank, channels), dt_proj_bias=_arr(rng, channels))


@register("selective_scan_1d", "primitive")
def _scan_1d(rng):
    x = _arr(rng, 6, 3)
    params = _ssm_params(rng, 3, 2, 1)
    return (lambda: selective_scan_1d(x, params)), \
        [("x", x)] + [(name, getattr(params, name)) for name in
                      ("A_log", "D_skip", "x_proj_weight", "dt_proj_weight", "dt_proj_bias")]


@register("ss2d", "primitive", max_elements=16)
def _ss2d(rng):
    module = SS2D(3, state=2, rank=1, layout=ScanLayout.LINE)
    x = _arr(rng, 1, 3, 3, 4)
    return (lambda: module(x)), _module_case(module, 1, ("x", x))


# =============================================================================
# BLOCKS
# =============================================================================

@register("cnn_stem", "block")
def _stem(rng):
    module = CNNStem(2, 3)
    x = _arr(rng, 2, 2, 6, 6)
    return (lambda: ad.concat([ad.reshape(t, (2, 3, -1)) for t in module(x)], axis=2)), \
        _module_case(module, 1, ("x", x))


@register("attention_gate", "block")
def _ag(rng):
    module = AttentionGate(3, 2, 4)
    x, g = _arr(rng, 2, 3, 4, 4), _arr(rng, 2, 2, 4, 4)
    return (lambda: module(x, g).gated), _module_case(module, 1, ("x", x), ("g", g))


@register("channel_attention", "block")
def _ca(rng):
    module = ChannelAttention(8, reduction=4)
    x = _arr(rng, 2, 8, 3, 3)
    return (lambda: module(x)), _module_case(module, 1, ("x", x))


@register("co_attention_gate", "block")
def _cag(rng):
    module = CoAttentionGate(4, 4, 5, inter_channels=3, reduction=4)
    skip, dec = _arr(rng, 2, 4, 3, 3), _arr(rng, 2, 4, 3, 3)
    return (lambda: module(skip, dec)), _module_case(module, 1, ("skip", skip), ("decoder", dec))


@register("attention_gate_fusion", "block")
def _ag_fusion(rng):
    module = AttentionGateFusion(3, 4, 5, inter_channels=3)
    skip, dec = _arr(rng, 2, 3, 3, 3), _arr(rng, 2, 4, 3, 3)
    return (lambda: module(skip, dec)), _module_case(module, 1, ("skip", skip), ("decoder", dec))


def _jitter_offsets(conv: DeformableConv2d, rng: np.random.Generator):
    # Zero offsets sample exactly on pixel centers, where bilinear weights have kinks.
    conv.offset_branch.weight.data = 0.05 * rng.standard_normal(conv.offset_branch.weight.shape)
    conv.offset_branch.bias.data = rng.uniform(0.2, 0.8, size=conv.offset_branch.bias.shape)
    conv.mask_branch.weight.data = 0.1 * rng.standard_normal(conv.mask_branch.weight.shape)


@register("deformable_conv_layer", "block")
def _deformable_layer(rng):
    module = DeformableConv2d(2, 3)
    x = _arr(rng, 1, 2, 4, 4)
    inputs = _module_case(module, 1, ("x", x))
    _jitter_offsets(module, rng)
    return (lambda: module(x)), inputs


@register("deformable_residual_block", "block")
def _drb(rng):
    module = DeformableResidualBlock(2, 3, deformable=True)
    x = _arr(rng, 2, 2, 4, 4)
    inputs = _module_case(module, 1, ("x", x))
    _jitter_offsets(module.conv2, rng)
    return (lambda: module(x)), inputs


@register("standard_residual_block", "block")
def _srb(rng):
    module = DeformableResidualBlock(3, 3, deformable=False)
    x = _arr(rng, 2, 3, 4, 4)
    return (lambda: module(x)), _module_case(module, 1, ("x", x))


@register("distribution_head", "block")
def _head(rng):
    module = DistributionHead(3, 4)
    x = _arr(rng, 2, 3, 4, 4)
    return (lambda: module(x)), _module_case(module, 1, ("x", x))


@register("vssm_block", "block", max_elements=12)
def _vssmb(rng):
    module = VSSMBlock(2, state=2, expand=2)
    x = _arr(rng, 1, 2, 3, 3)
    return (lambda: module(x)), _module_case(module, 1, ("x", x))


@register("encoder_block", "block", max_elements=12)
def _encoder_block(rng):
    module = EncoderBlock(4, heads=2, ratio=2, mlp_ratio=2)
    tokens = _arr(rng, 1, 16, 4)
    return (lambda: module(tokens, 4, 4)), _module_case(module, 1, ("tokens", tokens))


@register("decoder_stage", "block", max_elements=6)
def _decoder_stage(rng):
    module = DecoderStage(8, 8, 8, ModelConfig.preset("tiny"), num_vssmb=1, with_head=True)
    skip, dec = _arr(rng, 1, 8, 8, 8), _arr(rng, 1, 8, 8, 8)
    inputs = _module_case(module, 1, ("skip", skip), ("decoder", dec))
    _jitter_offsets(module.drb.conv2, rng)

    def fn():
        features, aux = module(dec, skip)
        return ad.concat([features.reshape(1, -1), aux.reshape(1, -1)], axis=1)
    return fn, inputs


@register("encoder", "block", max_elements=4)
def _encoder(rng):
    module = Encoder(ModelConfig.preset("tiny"))
    image = _arr(rng, 1, 3, 32, 32)

    def fn():
        pyramid = module(image)
        levels = (pyramid.x1, pyramid.x2, pyramid.x3, pyramid.x4, pyramid.x5, pyramid.x6)
        return ad.concat([level.reshape(1, -1) for level in levels], axis=1)
    return fn, _module_case(module, 1, ("image", image))


# =============================================================================
# LOSSES
# =============================================================================

def _labels(rng, batch: int, size: int, classes: int) -> np.ndarray:
    return rng.integers(0, classes, size=(batch, size, size))


@register("dice_loss", "loss")
def _dice(rng):
    logits = _arr(rng, 2, 3, 4, 4)
    target = one_hot(_labels(rng, 2, 4, 3), 3)
    return (lambda: ad.add(dice_loss(ad.softmax(logits, axis=1), target),
                           dice_loss_per_class(ad.softmax(logits, axis=1), target))), [("logits", logits)]


@register("kl_divergence", "loss")
def _kl(rng):
    logits = _arr(rng, 2, 3, 2, 2)
    dist = windowed_gt_distribution(_labels(rng, 2, 8, 3), 3, (2, 2))
    return (lambda: kl_divergence_map(dist, ad.log_softmax(logits, axis=1))), [("logits", logits)]


@register("dist_loss_scale", "loss")
def _dist_scale(rng):
    logits = _arr(rng, 2, 3, 2, 2)
    dist = windowed_gt_distribution(_labels(rng, 2, 8, 3), 3, (2, 2))
    return (lambda: dist_loss_scale(dist, logits, alpha=1.5)), [("logits", logits)]


def _aux(rng, batch: int, classes: int) -> List[DiffArray]:
    return [_arr(rng, batch, classes, size, size) for size in (1, 2, 4, 8, 16)]


@register("msda_loss", "loss")
def _msda(rng):
    aux = _aux(rng, 2, 3)
    gt = _labels(rng, 2, 16, 3)
    lambdas = [1 / 15, 2 / 15, 3 / 15, 4 / 15, 5 / 15]
    return (lambda: msda_loss(aux, gt, lambdas, alpha=1.0, num_classes=3)), \
        [(f"aux{i + 1}", a) for i, a in enumerate(aux)]


@register("deep_supervision_loss", "loss")
def _deepsup(rng):
    aux = _aux(rng, 1, 3)
    gt = _labels(rng, 1, 16, 3)

    def fn():
        terms = deep_supervision_loss(aux, gt, 3)
        total = terms[0]
        for term in terms[1:]:
            total = ad.add(total, term)
        return total
    return fn, [(f"aux{i + 1}", a) for i, a in enumerate(aux)]


@register("total_loss", "loss")
def _total(rng):
    config = ModelConfig.preset("tiny", supervision=Supervision.DICE_MSDA)
    logits = _arr(rng, 2, config.num_classes, 16, 16)
    aux = _aux(rng, 2, config.num_classes)
    gt = _labels(rng, 2, 16, config.num_classes)
    return (lambda: total_loss(logits, aux, gt, config).loss), \
        [("logits", logits)] + [(f"aux{i + 1}", a) for i, a in enumerate(aux)]


# =============================================================================
# RUNNER
# =============================================================================

@dataclass
class SuiteRow:
    name: str
    group: str
    report: CheckReport
    seconds: float


@dataclass
class SuiteResult:
    rows: List[SuiteRow] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(row.report.passed for row in self.rows)

    def failures(self) -> List[str]:
        return [row.name for row in self.rows if not row.report.passed]

    def row(self, name: str) -> SuiteRow:
        for row in self.rows:
            if row.name == name:
                return row
        raise KeyError(name)

    def table(self) -> str:
        width = max([len(row.name) for row in self.rows] + [4])
        lines = [f"{'case':<{width}}  {'group':<9}  {'status':<6}  {'max_rel_err':>11}  {'time_s':>7}"]
        for row in self.rows:
            status = "PASS" if row.report.passed else "FAIL"
            lines.append(f"{row.name:<{width}}  {row.group:<9}  {status:<6}  "
                         f"{row.report.max_rel_error:>11.3e}  {row.seconds:>7.2f}")
        return "\n".join(lines)


def case_names(group: Optional[str] = None) -> List[str]:
    return [name for name, case in REGISTRY.items() if group is None or case.group == group]


def run_case(name: str, seed: int = 0) -> SuiteRow:
    if name not in REGISTRY:
        raise ConfigurationError(f"unknown gradient check '{name}'", key="only")
    case = REGISTRY[name]
    rng = np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])
    started = time.perf_counter()
    fn, inputs = case.build(rng)
    report = grad_check(fn, inputs, tol=case.tol, seed=seed, max_elements=case.max_elements)
    return SuiteRow(name, case.group, report, time.perf_counter() - started)


def run_suite(only: Optional[Sequence[str]] = None, seed: int = 0) -> SuiteResult:
    names = list(only) if only else list(REGISTRY)
    result = SuiteResult()
    for name in names:
        row = run_case(name, seed)
        result.rows.append(row)
        if not row.report.passed:
            safe_update_log(f"[GRADCHECK] ❌ {name}: {row.report.summary()}")
    return result
