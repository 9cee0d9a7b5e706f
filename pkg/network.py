"""
Deco-Mamba Network Assembly

Builds the full segmentation network from a ModelConfig: a CNN stem and a
four-stage hierarchical attention encoder feeding a six-stage decoder of
co-attention gates, visual state-space blocks and deformable residual blocks.

Key Features:
- ModelConfig: validated, JSON-serializable, fingerprinted architecture record
- Presets: v0 (PVT-b0 scale), v1 (PVT-b2 scale), tiny (tests), desk (synthetic runs)
- Ablation switches: gate CAG/AG, deformable/standard conv, supervision mode,
  CNN branch on/off, VSSMB on/off
- count_params / count_flops / describe for complexity reporting

Attention MACs (per block): q/kv/proj projections as matmuls plus
2 * B * heads * N * M * head_dim for the score and value products, where N is
the token count and M the spatially reduced key count.
"""

import hashlib
import json
from dataclasses import dataclass, field, fields
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from autodiff import (DiffArray, add, count_macs, gelu, matmul, mul, no_grad, permute,
                      reshape, softmax, transpose)
from errors import ConfigurationError, ShapeError
from nn_blocks import (AttentionGateFusion, CNNStem, CoAttentionGate, Conv2d,
                       DeformableResidualBlock, DepthwiseConv2d, DistributionHead, LayerNorm,
                       Linear, Module)
from spatial_ops import bilinear_upsample
from ssm_scan import ScanLayout, ScanMerge, VSSMBlock


class GateKind(Enum):
    CAG = "cag"
    AG = "ag"


class ConvKind(Enum):
    DEFORMABLE = "deformable"
    STANDARD = "standard"


class Supervision(Enum):
    DICE = "dice"
    DICE_DEEPSUP = "dice+deepsup"
    DICE_MSDA = "dice+msda"


class ScaleOrder(Enum):
    COARSE_FIRST = "coarse_first"  # smallest weight on the /32 head
    FINE_FIRST = "fine_first"      # smallest weight on the /2 head


_ENUM_FIELDS = {
    "gate": GateKind,
    "conv": ConvKind,
    "supervision": Supervision,
    "scan_layout": ScanLayout,
    "scan_merge": ScanMerge,
    "msda_scale_order": ScaleOrder,
}

NUM_AUX_SCALES = 5


def default_lambdas(scales: int = NUM_AUX_SCALES) -> Tuple[float, ...]:
    total = scales * (scales + 1) / 2
    return tuple(s / total for s in range(1, scales + 1))


# =============================================================================
# CONFIGURATION
# =============================================================================

@dataclass
class ModelConfig:
    """Complete architectural description; rebuilding from it is bit-identical."""
    input_size: Tuple[int, int] = (224, 224)
    in_channels: int = 3
    num_classes: int = 9
    stem_channels: int = 16
    encoder_widths: Tuple[int, ...] = (32, 64, 160, 256)
    encoder_depths: Tuple[int, ...] = (2, 2, 2, 2)
    encoder_heads: Tuple[int, ...] = (1, 2, 5, 8)
    encoder_sr_ratios: Tuple[int, ...] = (8, 4, 2, 1)
    encoder_mlp_ratio: int = 4
    decoder_widths: Tuple[int, ...] = (256, 160, 96, 64, 32, 16)
    bottleneck_vssmb: int = 2
    ssm_state: int = 16
    ssm_expand: int = 2
    scan_layout: ScanLayout = ScanLayout.LINE
    scan_merge: ScanMerge = ScanMerge.SUM
    ca_reduction: int = 8
    gate: GateKind = GateKind.CAG
    conv: ConvKind = ConvKind.DEFORMABLE
    supervision: Supervision = Supervision.DICE_MSDA
    use_cnn_branch: bool = True
    use_vssmb: bool = True
    alpha: float = 1.0
    lambdas: Tuple[float, ...] = field(default_factory=default_lambdas)
    msda_scale_order: ScaleOrder = ScaleOrder.COARSE_FIRST
    seed: int = 0

    def __post_init__(self):
        for name, enum_type in _ENUM_FIELDS.items():
            value = getattr(self, name)
            if not isinstance(value, enum_type):
                try:
                    setattr(self, name, enum_type(value))
                except ValueError:
                    allowed = ", ".join(e.value for e in enum_type)
                    raise ConfigurationError(f"invalid value {value!r} (allowed: {allowed})", key=name)
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, list):
                setattr(self, f.name, tuple(value))

    # --- validation --------------------------------------------------------

    def gated_stage_channels(self) -> List[Tuple[Optional[int], int]]:
        """(skip channels, stage width) for decoder stages D5..D1."""
        c3, c4, c5, _ = self.encoder_widths
        c1 = self.stem_channels if self.use_cnn_branch else None
        skips = (c5, c4, c3, c1, c1)
        return list(zip(skips, self.decoder_widths[1:]))

    def validate(self) -> "ModelConfig":
        if len(self.input_size) != 2:
            raise ConfigurationError("expected (height, width)", key="input_size")
        height, width = self.input_size
        if height <= 0 or width <= 0 or height % 32 or width % 32:
            raise ConfigurationError(f"{self.input_size} must be positive multiples of 32", key="input_size")
        if self.in_channels < 1:
            raise ConfigurationError("at least one image channel is required", key="in_channels")
        if self.num_classes < 2:
            raise ConfigurationError("need background plus at least one class", key="num_classes")
        for name in ("encoder_widths", "encoder_depths", "encoder_heads", "encoder_sr_ratios"):
            if len(getattr(self, name)) != 4:
                raise ConfigurationError("exactly 4 encoder stages are required", key=name)
        if len(self.decoder_widths) != 6:
            raise ConfigurationError("exactly 6 decoder stages are required", key="decoder_widths")
        if min(self.encoder_widths + self.decoder_widths + (self.stem_channels,)) < 1:
            raise ConfigurationError("channel widths must be positive", key="decoder_widths")
        for stage, (width_c, heads) in enumerate(zip(self.encoder_widths, self.encoder_heads)):
            if heads < 1 or width_c % heads:
                raise ConfigurationError(f"stage {stage + 1} width {width_c} not divisible by {heads} heads",
                                         key="encoder_heads")
        for stage, ratio in enumerate(self.encoder_sr_ratios):
            extent = min(height, width) // (4 * 2 ** stage)
            if ratio < 1 or ratio > extent:
                raise ConfigurationError(f"stage {stage + 1} reduction {ratio} exceeds extent {extent}",
                                         key="encoder_sr_ratios")
        if min(self.encoder_depths) < 1 or self.bottleneck_vssmb < 0:
            raise ConfigurationError("block counts must be positive", key="encoder_depths")
        if self.ssm_state < 1 or self.ssm_expand < 1 or self.encoder_mlp_ratio < 1:
            raise ConfigurationError("state size, expand and mlp ratios must be >= 1", key="ssm_state")
        if len(self.lambdas) != NUM_AUX_SCALES:
            raise ConfigurationError(f"expected {NUM_AUX_SCALES} scale weights", key="lambdas")
        if any(b <= a for a, b in zip(self.lambdas, self.lambdas[1:])) or self.lambdas[0] <= 0:
            raise ConfigurationError("scale weights must be positive and strictly increasing", key="lambdas")
        if self.alpha <= 0:
            raise ConfigurationError("boundary exponent must be positive", key="alpha")
        if self.gate is GateKind.CAG:
            for skip, stage_width in self.gated_stage_channels():
                if skip is not None and (skip + stage_width) % self.ca_reduction:
                    raise ConfigurationError(
                        f"fused width {skip + stage_width} not divisible by {self.ca_reduction}",
                        key="ca_reduction")
        return self

    def scale_lambdas(self) -> Tuple[float, ...]:
        """Scale weights aligned with aux logits (coarsest first)."""
        if self.msda_scale_order is ScaleOrder.FINE_FIRST:
            return tuple(reversed(self.lambdas))
        return tuple(self.lambdas)

    # --- serialization -----------------------------------------------------

    def to_dict(self) -> Dict[str, Any]:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, Enum):
                value = value.value
            elif isinstance(value, tuple):
                value = list(value)
            out[f.name] = value
        return out

    @classmethod
    def from_dict(cls, data: Dict[str, Any], prefix: str = "model") -> "ModelConfig":
        if not isinstance(data, dict):
            raise ConfigurationError("expected a JSON object", key=prefix)
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigurationError("unknown configuration key", key=f"{prefix}.{key}")
        return cls(**data).validate()

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def fingerprint(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()

    def diff(self, other: "ModelConfig") -> Dict[str, Tuple[Any, Any]]:
        """Fields that differ: name -> (self value, other value)."""
        mine, theirs = self.to_dict(), other.to_dict()
        return {k: (mine[k], theirs.get(k)) for k in mine if mine[k] != theirs.get(k)}

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        if name not in PRESETS:
            raise ConfigurationError(f"unknown preset '{name}' (choose from {', '.join(PRESETS)})",
                                     key="preset")
        values = dict(PRESETS[name])
        values.update(overrides)
        return cls(**values).validate()


PRESETS: Dict[str, Dict[str, Any]] = {
    "v0": {},
    "v1": {
        "stem_channels": 32,
        "encoder_widths": (64, 128, 320, 512),
        "encoder_depths": (3, 4, 6, 3),
        "decoder_widths": (512, 320, 192, 128, 64, 32),
    },
    "tiny": {
        "input_size": (32, 32),
        "num_classes": 3,
        "stem_channels": 8,
        "encoder_widths": (8, 8, 16, 16),
        "encoder_depths": (1, 1, 1, 1),
        "encoder_heads": (1, 1, 2, 2),
        "encoder_mlp_ratio": 2,
        "decoder_widths": (16, 16, 16, 8, 8, 8),
        "bottleneck_vssmb": 1,
        "ssm_state": 4,
    },
    "desk": {
        "input_size": (96, 96),
        "num_classes": 4,
        "encoder_depths": (1, 1, 1, 1),
        "bottleneck_vssmb": 1,
    },
}


# =============================================================================
# ENCODER
# =============================================================================

@dataclass
class FeaturePyramid:
    """Encoder outputs at strides 1, 2, 4, 8, 16, 32 (x1/x2 absent without the CNN branch)."""
    x1: Optional[DiffArray]
    x2: Optional[DiffArray]
    x3: DiffArray
    x4: DiffArray
    x5: DiffArray
    x6: DiffArray

    def shapes(self) -> Dict[str, Optional[Tuple[int, ...]]]:
        return {name: (getattr(self, name).shape if getattr(self, name) is not None else None)
                for name in ("x1", "x2", "x3", "x4", "x5", "x6")}


def _tokens_to_grid(tokens: DiffArray, height: int, width: int) -> DiffArray:
    batch, _, channels = tokens.shape
    return permute(reshape(tokens, (batch, height, width, channels)), (0, 3, 1, 2))


def _grid_to_tokens(grid: DiffArray) -> DiffArray:
    batch, channels, height, width = grid.shape
    return reshape(permute(grid, (0, 2, 3, 1)), (batch, height * width, channels))


class PatchMerging(Module):
    """Strided conv downsampling followed by LayerNorm over channels."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, kernel, stride=stride, padding=kernel // 2)
        self.norm = LayerNorm(out_channels)

    def forward(self, x: DiffArray) -> Tuple[DiffArray, int, int]:
        grid = self.conv(x)
        return self.norm(_grid_to_tokens(grid)), grid.shape[2], grid.shape[3]


class SpatialReductionAttention(Module):
    """Multi-head attention whose keys/values come from a stride-`ratio` reduced grid."""

    def __init__(self, channels: int, heads: int, ratio: int):
        super().__init__()
        self.heads = heads
        self.q = Linear(channels, channels)
        self.kv = Linear(channels, 2 * channels)
        self.proj = Linear(channels, channels)
        if ratio > 1:
            self.sr = Conv2d(channels, channels, ratio, stride=ratio, padding=0)
            self.sr_norm = LayerNorm(channels)
        else:
            self.sr = None
            self.sr_norm = None

    def forward(self, tokens: DiffArray, height: int, width: int) -> DiffArray:
        batch, count, channels = tokens.shape
        head_dim = channels // self.heads
        q = permute(reshape(self.q(tokens), (batch, count, self.heads, head_dim)), (0, 2, 1, 3))
        if self.sr is not None:
            source = self.sr_norm(_grid_to_tokens(self.sr(_tokens_to_grid(tokens, height, width))))
        else:
            source = tokens
        keys = source.shape[1]
        kv = permute(reshape(self.kv(source), (batch, keys, 2, self.heads, head_dim)), (2, 0, 3, 1, 4))
        k, v = kv[0], kv[1]
        scores = softmax(mul(matmul(q, transpose(k)), head_dim ** -0.5), axis=-1)
        out = permute(matmul(scores, v), (0, 2, 1, 3))
        return self.proj(reshape(out, (batch, count, channels)))


class MixFFN(Module):
    """fc - depthwise 3x3 - GELU - fc on tokens."""

    def __init__(self, channels: int, ratio: int):
        super().__init__()
        hidden = channels * ratio
        self.fc1 = Linear(channels, hidden)
        self.dw = DepthwiseConv2d(hidden, 3)
        self.fc2 = Linear(hidden, channels)

    def forward(self, tokens: DiffArray, height: int, width: int) -> DiffArray:
        hidden = _grid_to_tokens(self.dw(_tokens_to_grid(self.fc1(tokens), height, width)))
        return self.fc2(gelu(hidden))


class EncoderBlock(Module):
    def __init__(self, channels: int, heads: int, ratio: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = LayerNorm(channels)
        self.attn = SpatialReductionAttention(channels, heads, ratio)
        self.norm2 = LayerNorm(channels)
        self.ffn = MixFFN(channels, mlp_ratio)

    def forward(self, tokens: DiffArray, height: int, width: int) -> DiffArray:
        tokens = add(tokens, self.attn(self.norm1(tokens), height, width))
        return add(tokens, self.ffn(self.norm2(tokens), height, width))


class EncoderStage(Module):
    def __init__(self, in_channels: int, out_channels: int, depth: int, heads: int, ratio: int,
                 mlp_ratio: int, kernel: int, stride: int):
        super().__init__()
        self.merge = PatchMerging(in_channels, out_channels, kernel, stride)
        self.blocks = [EncoderBlock(out_channels, heads, ratio, mlp_ratio) for _ in range(depth)]
        self.norm = LayerNorm(out_channels)

    def forward(self, x: DiffArray) -> DiffArray:
        tokens, height, width = self.merge(x)
        for block in self.blocks:
            tokens = block(tokens, height, width)
        return _tokens_to_grid(self.norm(tokens), height, width)


class Encoder(Module):
    """CNN stem (X1, X2) in parallel with the hierarchical encoder (X3..X6)."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.stem = CNNStem(config.in_channels, config.stem_channels) if config.use_cnn_branch else None
        stages = []
        in_channels = config.in_channels
        for index, out_channels in enumerate(config.encoder_widths):
            kernel, stride = (7, 4) if index == 0 else (3, 2)
            stages.append(EncoderStage(in_channels, out_channels, config.encoder_depths[index],
                                       config.encoder_heads[index], config.encoder_sr_ratios[index],
                                       config.encoder_mlp_ratio, kernel, stride))
            in_channels = out_channels
        self.stages = stages

    def forward(self, image: DiffArray) -> FeaturePyramid:
        x1, x2 = self.stem(image) if self.stem is not None else (None, None)
        outputs = []
        x = image
        for stage in self.stages:
            x = stage(x)
            outputs.append(x)
        return FeaturePyramid(x1, x2, *outputs)


# =============================================================================
# DECODER
# =============================================================================

@dataclass
class SegOutput:
    logits: DiffArray
    aux_logits: List[DiffArray]


class UpsampleProject(Module):
    """Bilinear x2 then a 1x1 conv to the next stage width."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, 1)

    def forward(self, x: DiffArray) -> DiffArray:
        return self.conv(bilinear_upsample(x, 2))


class DecoderStage(Module):
    """[gate] -> VSSMB x n -> DRB -> [distribution head]."""

    def __init__(self, in_channels: int, width: int, skip_channels: Optional[int], config: ModelConfig,
                 num_vssmb: int, with_head: bool):
        super().__init__()
        if skip_channels is None:
            self.gate = None
        elif config.gate is GateKind.CAG:
            self.gate = CoAttentionGate(skip_channels, in_channels, width, reduction=config.ca_reduction)
        else:
            self.gate = AttentionGateFusion(skip_channels, in_channels, width)
        if self.gate is None:
            block_channels = in_channels
        elif isinstance(self.gate, AttentionGateFusion):
            block_channels = self.gate.out_channels
        else:
            block_channels = width
        self.vssmb = [VSSMBlock(block_channels, config.ssm_state, config.ssm_expand,
                                config.scan_layout, config.scan_merge) for _ in range(num_vssmb)]
        self.drb = DeformableResidualBlock(block_channels, width, config.conv is ConvKind.DEFORMABLE)
        self.head = DistributionHead(width, config.num_classes) if with_head else None

    def forward(self, x: DiffArray, skip: Optional[DiffArray] = None) -> Tuple[DiffArray, Optional[DiffArray]]:
        if self.gate is not None:
            if skip is None:
                raise ShapeError("decoder_stage", "gated stage called without a skip feature")
            x = self.gate(skip, x)
        for block in self.vssmb:
            x = block(x)
        x = self.drb(x)
        return x, (self.head(x) if self.head is not None else None)


class Decoder(Module):
    """Six stages D6 (bottleneck) .. D1 (full resolution) plus the segmentation head."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        widths = config.decoder_widths
        with_heads = config.supervision is not Supervision.DICE
        stage_vssmb = 1 if config.use_vssmb else 0
        stages = [DecoderStage(config.encoder_widths[-1], widths[0], None, config,
                               config.bottleneck_vssmb if config.use_vssmb else 0, with_heads)]
        for index, (skip, width) in enumerate(config.gated_stage_channels()):
            final = index == 4
            stages.append(DecoderStage(width, width, skip, config,
                                       0 if final else stage_vssmb, with_heads and not final))
        self.stages = stages
        self.ups = [UpsampleProject(widths[i], widths[i + 1]) for i in range(5)]
        self.seg_head = Conv2d(widths[-1], config.num_classes, 1)

    def forward(self, pyramid: FeaturePyramid) -> SegOutput:
        skips = (pyramid.x5, pyramid.x4, pyramid.x3, pyramid.x2, pyramid.x1)
        feat, aux = self.stages[0](pyramid.x6)
        aux_logits = [aux] if aux is not None else []
        for index in range(5):
            feat, aux = self.stages[index + 1](self.ups[index](feat), skips[index])
            if aux is not None:
                aux_logits.append(aux)
        return SegOutput(logits=self.seg_head(feat), aux_logits=aux_logits)


class DecoMamba(Module):
    """Encoder + decoder; initialized from config.seed."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config.validate()
        self.encoder = Encoder(config)
        self.decoder = Decoder(config)
        self.reset_parameters(config.seed)

    def forward(self, image: DiffArray) -> SegOutput:
        if image.ndim != 4 or image.shape[1] != self.config.in_channels:
            raise ShapeError("model_forward", f"expected [B, {self.config.in_channels}, H, W], got {image.shape}")
        if image.shape[2] % 32 or image.shape[3] % 32:
            raise ShapeError("model_forward", f"spatial size {image.shape[2:]} must be multiples of 32")
        return self.decoder(self.encoder(image))


# =============================================================================
# COMPLEXITY
# =============================================================================

def count_params(config: ModelConfig) -> int:
    """Exact trainable element count of the network built from config."""
    return DecoMamba(config).parameter_count()


def count_flops(config: ModelConfig, batch: int = 1) -> int:
    """Multiply-accumulates of one eval-mode forward pass at the configured input size."""
    return flops_breakdown(config, batch).total


def flops_breakdown(config: ModelConfig, batch: int = 1):
    model = DecoMamba(config).eval()
    height, width = config.input_size
    image = DiffArray(np.zeros((batch, config.in_channels, height, width), dtype=np.float32))
    with no_grad(), count_macs() as counter:
        model(image)
    return counter


def describe(config: ModelConfig, max_depth: int = 3) -> str:
    """Architecture string: config echo, then one module per line with parameter counts."""
    model = DecoMamba(config)
    lines = [f"DecoMamba fingerprint={config.fingerprint()}",
             f"params={model.parameter_count():,}",
             f"config={config.canonical_json()}"]
    lines.extend(model.describe(max_depth=max_depth))
    return "\n".join(lines)
