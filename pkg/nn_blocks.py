"""
Deco-Mamba Building Blocks

Parameterized layers and the named composite blocks of the decoder, all built
from the differentiable primitives in autodiff.py and spatial_ops.py.

Key Features:
- Module base class: stable parameter paths, train/eval switching, dtype promotion
- Path-seeded initialization: every parameter is drawn from its own generator
  keyed by (seed, crc32(path)), so values never depend on construction order
- Layers: Conv2d, DepthwiseConv2d, Linear, BatchNorm2d, LayerNorm
- Blocks: CNN stem, attention gate, channel attention, co-attention gate,
  deformable convolution, deformable residual block, distribution head
"""

import zlib
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Iterator, List, Optional, Tuple

import numpy as np

from autodiff import (DEFAULT_DTYPE, DiffArray, Parameter, add, concat, flip, matmul, mul,
                      permute, relu, reshape, sigmoid)
from errors import ConfigurationError, ShapeError
from spatial_ops import (adaptive_pool2d, batch_norm, conv2d, depthwise_conv2d,
                         grid_sample_bilinear, layer_norm, pool2d)

InitFn = Callable[[np.random.Generator, Tuple[int, ...]], np.ndarray]


# =============================================================================
# INITIALIZERS
# =============================================================================

def kaiming_uniform(fan_in: int) -> InitFn:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), the default conv/linear scheme."""
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return lambda rng, shape: rng.uniform(-bound, bound, size=shape)


def constant_init(value: float) -> InitFn:
    return lambda rng, shape: np.full(shape, value)


zeros_init = constant_init(0.0)
ones_init = constant_init(1.0)


def new_parameter(shape: Tuple[int, ...], init: InitFn, trainable: bool = True) -> Parameter:
    return Parameter(np.zeros(shape, dtype=DEFAULT_DTYPE), trainable=trainable, init=init)


def parameter_rng(seed: int, path: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(path.encode("utf-8"))])


# =============================================================================
# MODULE BASE
# =============================================================================

class BlockParams:
    """Ordered map from parameter path to parameter, each flagged trainable or not."""

    def __init__(self, entries: "OrderedDict[str, Parameter]"):
        self._entries = entries

    def __getitem__(self, path: str) -> Parameter:
        return self._entries[path]

    def __contains__(self, path: str) -> bool:
        return path in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def paths(self) -> List[str]:
        return list(self._entries)

    def trainable(self) -> List[Tuple[str, Parameter]]:
        return [(path, p) for path, p in self._entries.items() if p.trainable]

    def element_count(self, trainable_only: bool = True) -> int:
        return sum(p.size for p in self._entries.values() if p.trainable or not trainable_only)


class Module:
    """Container of parameters and child modules addressed by dotted paths."""

    def __init__(self):
        self.training = True
        self._initialized = False

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        if not self._initialized:
            self.reset_parameters()
        return self.forward(*args, **kwargs)

    def _members(self) -> Iterator[Tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for index, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{name}.{index}", item

    def children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in self._members():
            if isinstance(value, Module):
                yield name, value

    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self.children():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        seen = set()
        for path, module in self.named_modules(prefix):
            for name, value in module._members():
                if isinstance(value, Parameter) and id(value) not in seen:
                    seen.add(id(value))
                    yield (f"{path}.{name}" if path else name), value

    def block_params(self) -> BlockParams:
        return BlockParams(OrderedDict(self.named_parameters()))

    def parameters(self, trainable_only: bool = True) -> List[Parameter]:
        return [p for _, p in self.named_parameters() if p.trainable or not trainable_only]

    def parameter_count(self, trainable_only: bool = True) -> int:
        return sum(p.size for p in self.parameters(trainable_only))

    def reset_parameters(self, seed: int = 0) -> "Module":
        """Redraw every parameter from its path-keyed generator."""
        for path, param in self.named_parameters():
            if param.init is not None:
                values = param.init(parameter_rng(seed, path), param.shape)
                param.data = np.ascontiguousarray(values, dtype=param.dtype)
            param.grad = None
        for _, module in self.named_modules():
            module._initialized = True
        return self

    def train(self, mode: bool = True) -> "Module":
        for _, module in self.named_modules():
            module.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def astype(self, dtype) -> "Module":
        if not self._initialized:
            self.reset_parameters()
        for _, param in self.named_parameters():
            param.data = param.data.astype(dtype)
            param.grad = None
        return self

    def zero_grad(self):
        for _, param in self.named_parameters():
            param.grad = None

    def describe(self, prefix: str = "", max_depth: int = 3) -> List[str]:
        """One line per module: path, class name, trainable parameter count."""
        lines = []
        for path, module in self.named_modules(prefix):
            depth = path.count(".") + 1 if path else 0
            if depth > max_depth:
                continue
            label = path or "<root>"
            lines.append(f"{'  ' * depth}{label}: {type(module).__name__} "
                         f"params={module.parameter_count():,}")
        return lines


# =============================================================================
# LAYERS
# =============================================================================

class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int = 1,
                 padding: Optional[int] = None, bias: bool = True, zero_init: bool = False):
        super().__init__()
        init = zeros_init if zero_init else kaiming_uniform(in_channels * kernel_size * kernel_size)
        self.weight = new_parameter((out_channels, in_channels, kernel_size, kernel_size), init)
        self.bias = new_parameter((out_channels,), init) if bias else None
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding

    def forward(self, x: DiffArray) -> DiffArray:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class DepthwiseConv2d(Module):
    def __init__(self, channels: int, kernel_size: int = 3, bias: bool = True):
        super().__init__()
        init = kaiming_uniform(kernel_size * kernel_size)
        self.weight = new_parameter((channels, 1, kernel_size, kernel_size), init)
        self.bias = new_parameter((channels,), init) if bias else None

    def forward(self, x: DiffArray) -> DiffArray:
        return depthwise_conv2d(x, self.weight, self.bias)


class Linear(Module):
    """y = x @ W + b over the last axis; W is stored as [in, out]."""

    def __init__(self, in_features: int, out_features: int, bias: bool = True):
        super().__init__()
        init = kaiming_uniform(in_features)
        self.weight = new_parameter((in_features, out_features), init)
        self.bias = new_parameter((out_features,), init) if bias else None

    def forward(self, x: DiffArray) -> DiffArray:
        out = matmul(x, self.weight)
        return add(out, self.bias) if self.bias is not None else out


class BatchNorm2d(Module):
    def __init__(self, channels: int):
        super().__init__()
        self.weight = new_parameter((channels,), ones_init)
        self.bias = new_parameter((channels,), zeros_init)
        self.running_mean = new_parameter((channels,), zeros_init, trainable=False)
        self.running_var = new_parameter((channels,), ones_init, trainable=False)

    def forward(self, x: DiffArray) -> DiffArray:
        return batch_norm(x, self.weight, self.bias, self.running_mean.data,
                          self.running_var.data, self.training)


class LayerNorm(Module):
    def __init__(self, channels: int):
        super().__init__()
        self.weight = new_parameter((channels,), ones_init)
        self.bias = new_parameter((channels,), zeros_init)

    def forward(self, x: DiffArray) -> DiffArray:
        return layer_norm(x, self.weight, self.bias)


# =============================================================================
# ENCODER STEM
# =============================================================================

class CNNStem(Module):
    """Full-resolution 7x7 conv + BN + ReLU, then a 2x2 max pool."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, 7, padding=3, bias=False)
        self.bn = BatchNorm2d(out_channels)

    def forward(self, image: DiffArray) -> Tuple[DiffArray, DiffArray]:
        if image.shape[2] % 2 or image.shape[3] % 2:
            raise ShapeError("cnn_stem", f"spatial size {image.shape[2:]} must be even")
        x1 = relu(self.bn(self.conv(image)))
        x2 = pool2d(x1, "max", 2)
        return x1, x2


# =============================================================================
# GATING AND ATTENTION
# =============================================================================

@dataclass
class GateOutput:
    gated: DiffArray
    attention_map: DiffArray


def gate_width(out_channels: int) -> int:
    """Intermediate attention-gate width: half the stage width, at least 8."""
    return max(out_channels // 2, 8)


class AttentionGate(Module):
    """alpha = sigmoid(psi(W_x x + W_g g)); gated = x * alpha."""

    def __init__(self, x_channels: int, g_channels: int, inter_channels: int):
        super().__init__()
        self.conv_x = Conv2d(x_channels, inter_channels, 1)
        self.conv_g = Conv2d(g_channels, inter_channels, 1)
        self.psi = Conv2d(inter_channels, 1, 1)

    def forward(self, x: DiffArray, g: DiffArray) -> GateOutput:
        if x.shape[0] != g.shape[0] or x.shape[2:] != g.shape[2:]:
            raise ShapeError("attention_gate", f"feature {x.shape} and gate {g.shape} are not aligned")
        alpha = sigmoid(self.psi(add(self.conv_x(x), self.conv_g(g))))
        return GateOutput(gated=mul(x, alpha), attention_map=alpha)


class ChannelAttention(Module):
    """Per-channel sigmoid scaling from a shared bottleneck over max and mean descriptors."""

    def __init__(self, channels: int, reduction: int = 8):
        super().__init__()
        if channels % reduction:
            raise ConfigurationError(f"{channels} channels not divisible by reduction {reduction}",
                                     key="ca_reduction")
        self.fc1 = Conv2d(channels, channels // reduction, 1)
        self.fc2 = Conv2d(channels // reduction, channels, 1)

    def _excite(self, pooled: DiffArray) -> DiffArray:
        return self.fc2(relu(self.fc1(pooled)))

    def scale(self, x: DiffArray) -> DiffArray:
        return sigmoid(add(self._excite(adaptive_pool2d(x, "max")),
                           self._excite(adaptive_pool2d(x, "avg"))))

    def forward(self, x: DiffArray) -> DiffArray:
        return mul(x, self.scale(x))


class CoAttentionGate(Module):
    """Two attention gates with swapped roles, channel attention, 1x1 projection."""

    def __init__(self, skip_channels: int, decoder_channels: int, out_channels: int,
                 inter_channels: Optional[int] = None, reduction: int = 8):
        super().__init__()
        inter = inter_channels or gate_width(out_channels)
        fused = skip_channels + decoder_channels
        self.ag_a = AttentionGate(skip_channels, decoder_channels, inter)
        self.ag_b = AttentionGate(decoder_channels, skip_channels, inter)
        self.ca = ChannelAttention(fused, reduction)
        self.proj = Conv2d(fused, out_channels, 1)

    def gate_features(self, skip: DiffArray, decoder: DiffArray) -> DiffArray:
        return concat([self.ag_a(skip, decoder).gated, self.ag_b(decoder, skip).gated], axis=1)

    def forward(self, skip: DiffArray, decoder: DiffArray) -> DiffArray:
        return self.proj(self.ca(self.gate_features(skip, decoder)))


class AttentionGateFusion(Module):
    """Single-gate ablation: gated skip concatenated with the decoder features.

    There is no output projection, so the result carries skip + decoder channels
    and the stage's residual block restores the stage width.
    """

    def __init__(self, skip_channels: int, decoder_channels: int, width: int,
                 inter_channels: Optional[int] = None):
        super().__init__()
        inter = inter_channels or gate_width(width)
        self.ag_a = AttentionGate(skip_channels, decoder_channels, inter)
        self.out_channels = skip_channels + decoder_channels

    def forward(self, skip: DiffArray, decoder: DiffArray) -> DiffArray:
        return concat([self.ag_a(skip, decoder).gated, decoder], axis=1)


# =============================================================================
# DEFORMABLE CONVOLUTION
# =============================================================================

def _sampling_lattice(kernel: int, height: int, width: int, dtype) -> np.ndarray:
    """Standard k x k lattice as absolute (x, y) pixel positions: [1, k*k, H, W, 2]."""
    half = kernel // 2
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    lattice = np.empty((1, kernel * kernel, height, width, 2), dtype=dtype)
    for tap in range(kernel * kernel):
        dy, dx = divmod(tap, kernel)
        lattice[0, tap, :, :, 0] = cols + dx - half
        lattice[0, tap, :, :, 1] = rows + dy - half
    return lattice


def deformable_conv2d(x: DiffArray, w: DiffArray, b: Optional[DiffArray], offsets: DiffArray,
                      mask_logits: DiffArray) -> DiffArray:
    """
    Modulated deformable 3x3 convolution, stride 1, output at input resolution.

    offsets channel 2j holds the row shift and 2j+1 the column shift of tap j
    (taps in row-major order). Tap j is weighted by m_j = 2 * sigmoid(mask_logits[j]),
    shared across input channels.
    """
    batch, channels, height, width = x.shape
    out_channels, w_channels, k_h, k_w = w.shape
    if (k_h, k_w) != (3, 3):
        raise ConfigurationError(f"deformable kernel must be 3x3, got {k_h}x{k_w}", key="kernel_size")
    if w_channels != channels:
        raise ShapeError("deformable_conv2d", f"input has {channels} channels, weight expects {w_channels}")
    taps = k_h * k_w
    if offsets.shape != (batch, 2 * taps, height, width) or mask_logits.shape != (batch, taps, height, width):
        raise ShapeError("deformable_conv2d",
                         f"offsets {offsets.shape} / mask {mask_logits.shape} do not match input {x.shape}")

    shifts = permute(reshape(offsets, (batch, taps, 2, height, width)), (0, 1, 3, 4, 2))
    coords = add(flip(shifts, axis=-1), _sampling_lattice(k_h, height, width, x.dtype))
    sampled = grid_sample_bilinear(x, coords)
    modulation = reshape(mul(sigmoid(mask_logits), 2.0), (batch, 1, taps, height, width))
    columns = reshape(mul(sampled, modulation), (batch, channels * taps, height * width))
    out = matmul(reshape(w, (1, out_channels, channels * taps)), columns)
    out = reshape(out, (batch, out_channels, height, width))
    if b is not None:
        out = add(out, reshape(b, (1, out_channels, 1, 1)))
    return out


class DeformableConv2d(Module):
    """3x3 modulated deformable conv with zero-initialized offset and mask branches."""

    def __init__(self, in_channels: int, out_channels: int, bias: bool = True):
        super().__init__()
        init = kaiming_uniform(in_channels * 9)
        self.weight = new_parameter((out_channels, in_channels, 3, 3), init)
        self.bias = new_parameter((out_channels,), init) if bias else None
        self.offset_branch = Conv2d(in_channels, 18, 3, zero_init=True)
        self.mask_branch = Conv2d(in_channels, 9, 3, zero_init=True)

    def forward(self, x: DiffArray) -> DiffArray:
        return deformable_conv2d(x, self.weight, self.bias, self.offset_branch(x), self.mask_branch(x))


class DeformableResidualBlock(Module):
    """conv3x3-BN-ReLU, (deformable) conv3x3-BN-ReLU, plus a residual path."""

    def __init__(self, in_channels: int, out_channels: int, deformable: bool = True):
        super().__init__()
        self.conv1 = Conv2d(in_channels, out_channels, 3, bias=False)
        self.bn1 = BatchNorm2d(out_channels)
        if deformable:
            self.conv2 = DeformableConv2d(out_channels, out_channels, bias=False)
        else:
            self.conv2 = Conv2d(out_channels, out_channels, 3, bias=False)
        self.bn2 = BatchNorm2d(out_channels)
        self.proj = Conv2d(in_channels, out_channels, 1) if in_channels != out_channels else None

    def forward(self, x: DiffArray) -> DiffArray:
        hidden = relu(self.bn1(self.conv1(x)))
        hidden = relu(self.bn2(self.conv2(hidden)))
        residual = self.proj(x) if self.proj is not None else x
        return add(hidden, residual)


class DistributionHead(Module):
    """DWConv3x3 - BN - ReLU - Conv1x1 to class logits at the feature's own scale."""

    def __init__(self, channels: int, num_classes: int):
        super().__init__()
        self.dw = DepthwiseConv2d(channels, 3, bias=False)
        self.bn = BatchNorm2d(channels)
        self.proj = Conv2d(channels, num_classes, 1)

    def forward(self, feat: DiffArray) -> DiffArray:
        return self.proj(relu(self.bn(self.dw(feat))))
