"""
Selective-Scan State-Space Layers

Linear-time selective scan (input-dependent step size, input and readout
vectors, diagonal negative state matrix), its four-direction 2D extension and
the visual state-space block that wraps it.

Key Features:
- selective_scan: one O(L*C*N) forward pass and an analytic reverse recurrence
- discretize: zero-order hold on A, Euler step on B
- ss2d: row/column scans in both orientations, merged in a fixed order
- VSSMBlock: norm, expand, depthwise conv, SiLU, ss2d, norm, SiLU gate, project, residual

Recurrence per channel c and state n:
    h_t = exp(delta_t * A) * h_{t-1} + delta_t * B_t * x_t
    y_t = <C_t, h_t> + D * x_t
"""

import math
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np

from autodiff import (DiffArray, add, exp, flip, is_grad_enabled, make_node, matmul,
                      mul, neg, permute, record_macs, reshape, silu, softplus)
from errors import ConfigurationError, PreconditionError, ShapeError
from nn_blocks import DepthwiseConv2d, LayerNorm, Linear, Module, new_parameter, ones_init

DT_MIN = 1e-3
DT_MAX = 1e-1


class ScanDirection(Enum):
    ROW_FORWARD = "row_forward"
    ROW_BACKWARD = "row_backward"
    COL_FORWARD = "col_forward"
    COL_BACKWARD = "col_backward"

    @property
    def along_rows(self) -> bool:
        return self in (ScanDirection.ROW_FORWARD, ScanDirection.ROW_BACKWARD)

    @property
    def reversed(self) -> bool:
        return self in (ScanDirection.ROW_BACKWARD, ScanDirection.COL_BACKWARD)


# Fixed merge order
SCAN_ORDER: Tuple[ScanDirection, ...] = tuple(ScanDirection)


class ScanLayout(Enum):
    LINE = "line"      # every row (column) is its own sequence
    RASTER = "raster"  # whole image flattened row-major (column-major)


class ScanMerge(Enum):
    SUM = "sum"
    MEAN = "mean"


@dataclass
class SSMParams:
    """Parameters of one scan direction."""
    A_log: DiffArray           # [C, N], A = -exp(A_log)
    D_skip: DiffArray          # [C]
    x_proj_weight: DiffArray   # [C, R + 2N] -> (dt, B, C_out)
    dt_proj_weight: DiffArray  # [R, C]
    dt_proj_bias: DiffArray    # [C]

    @property
    def state_size(self) -> int:
        return self.A_log.shape[1]

    @property
    def dt_rank(self) -> int:
        return self.dt_proj_weight.shape[0]


# =============================================================================
# CORE RECURRENCE
# =============================================================================

def discretize(delta: DiffArray, A: DiffArray, B: DiffArray) -> Tuple[DiffArray, DiffArray]:
    """
    Abar = exp(delta x A), Bbar = delta x B, both [L, C, N].

    selective_scan applies the same rule inline on raw arrays; keep the two in sync.
    """
    if (delta.data <= 0).any():
        raise PreconditionError("discretize", "step sizes must be positive")
    if (A.data >= 0).any():
        raise PreconditionError("discretize", "state matrix must be strictly negative")
    length, channels = delta.shape
    state = A.shape[1]
    if A.shape[0] != channels or B.shape != (length, state):
        raise ShapeError("discretize", f"delta {delta.shape}, A {A.shape}, B {B.shape} disagree")
    delta3 = reshape(delta, (length, channels, 1))
    a_bar = exp(mul(delta3, reshape(A, (1, channels, state))))
    b_bar = mul(delta3, reshape(B, (length, 1, state)))
    return a_bar, b_bar


def selective_scan(x: DiffArray, delta: DiffArray, A: DiffArray, B: DiffArray, C: DiffArray,
                   D: DiffArray) -> DiffArray:
    """
    Scan S independent sequences of length L.

    Each step uses the discretize() rule h = exp(delta A) h + (delta B) x.

    Args:
        x, delta: [S, L, C]
        A: [C, N] (negative)
        B, C: [S, L, N]
        D: [C]

    Returns:
        y: [S, L, C]
    """
    seqs, length, channels = x.shape
    state = A.shape[1]
    if delta.shape != x.shape or A.shape[0] != channels or D.shape != (channels,):
        raise ShapeError("selective_scan", f"x {x.shape}, delta {delta.shape}, A {A.shape}, D {D.shape}")
    if B.shape != (seqs, length, state) or C.shape != (seqs, length, state):
        raise ShapeError("selective_scan", f"B {B.shape} / C {C.shape} should be {(seqs, length, state)}")

    xv, dv, av, bv, cv = x.data, delta.data, A.data, B.data, C.data
    keep_states = is_grad_enabled() and any(p.requires_grad for p in (x, delta, A, B, C, D))
    states = np.empty((length, seqs, channels, state), dtype=x.dtype) if keep_states else None
    h = np.zeros((seqs, channels, state), dtype=x.dtype)
    y = np.empty_like(xv)
    for t in range(length):
        step = dv[:, t, :, None]
        h = np.exp(step * av) * h + (step * bv[:, t, None, :]) * xv[:, t, :, None]
        y[:, t] = (h * cv[:, t, None, :]).sum(axis=-1)
        if keep_states:
            states[t] = h
    y += xv * D.data
    record_macs("scan", seqs * length * channels * state)

    def backward(g):
        grad_x = g * D.data
        grad_delta = np.zeros_like(dv)
        grad_A = np.zeros_like(av)
        grad_B = np.zeros_like(bv)
        grad_C = np.zeros_like(cv)
        grad_D = (g * xv).sum(axis=(0, 1))
        grad_h = np.zeros((seqs, channels, state), dtype=x.dtype)
        for t in range(length - 1, -1, -1):
            g_t = g[:, t]
            h_t = states[t]
            h_prev = states[t - 1] if t > 0 else np.zeros_like(h_t)
            step = dv[:, t, :, None]
            decay = np.exp(step * av)
            grad_C[:, t] = np.einsum("sc,scn->sn", g_t, h_t)
            grad_h = grad_h + g_t[:, :, None] * cv[:, t, None, :]
            grad_decay = grad_h * h_prev * decay
            b_t = bv[:, t, None, :]
            x_t = xv[:, t, :, None]
            grad_x[:, t] += (grad_h * step * b_t).sum(axis=-1)
            grad_delta[:, t] = (grad_decay * av).sum(axis=-1) + (grad_h * b_t * x_t).sum(axis=-1)
            grad_A += (grad_decay * step).sum(axis=0)
            grad_B[:, t] = (grad_h * step * x_t).sum(axis=1)
            grad_h = grad_h * decay
        return grad_x, grad_delta, grad_A, grad_B, grad_C, grad_D

    return make_node(y, (x, delta, A, B, C, D), backward, "selective_scan")


def selective_scan_1d(x: DiffArray, params: SSMParams) -> DiffArray:
    """Project x to (delta, B, C) and scan; x is [L, C] or [S, L, C]."""
    single = x.ndim == 2
    if single:
        x = reshape(x, (1,) + x.shape)
    if x.shape[1] < 1:
        raise ShapeError("selective_scan_1d", "sequence length must be at least 1")
    rank, state = params.dt_rank, params.state_size
    projected = matmul(x, params.x_proj_weight)
    dt = projected[..., :rank]
    b_in = projected[..., rank:rank + state]
    c_out = projected[..., rank + state:]
    delta = softplus(add(matmul(dt, params.dt_proj_weight), params.dt_proj_bias))
    A = neg(exp(params.A_log))
    y = selective_scan(x, delta, A, b_in, c_out, params.D_skip)
    return reshape(y, y.shape[1:]) if single else y


# =============================================================================
# 2D EXTENSION
# =============================================================================

def _to_sequences(x: DiffArray, direction: ScanDirection, layout: ScanLayout) -> DiffArray:
    batch, channels, height, width = x.shape
    if direction.along_rows:
        lines = permute(x, (0, 2, 3, 1))
        count, length = batch * height, width
    else:
        lines = permute(x, (0, 3, 2, 1))
        count, length = batch * width, height
    if layout is ScanLayout.RASTER:
        count, length = batch, height * width
    seqs = reshape(lines, (count, length, channels))
    return flip(seqs, axis=1) if direction.reversed else seqs


def _from_sequences(y: DiffArray, direction: ScanDirection, shape: Tuple[int, ...]) -> DiffArray:
    batch, channels, height, width = shape
    if direction.reversed:
        y = flip(y, axis=1)
    if direction.along_rows:
        return permute(reshape(y, (batch, height, width, channels)), (0, 3, 1, 2))
    return permute(reshape(y, (batch, width, height, channels)), (0, 3, 2, 1))


def ss2d(x: DiffArray, params: Sequence[SSMParams], layout: ScanLayout = ScanLayout.LINE,
         merge: ScanMerge = ScanMerge.SUM,
         directions: Sequence[ScanDirection] = SCAN_ORDER) -> DiffArray:
    """
    Four-direction selective scan over [B, C, H, W].

    params[i] belongs to SCAN_ORDER[i]; only the listed directions contribute,
    merged in SCAN_ORDER order.
    """
    if len(params) != len(SCAN_ORDER):
        raise ShapeError("ss2d", f"expected {len(SCAN_ORDER)} parameter sets, got {len(params)}")
    merged: Optional[DiffArray] = None
    active = [d for d in SCAN_ORDER if d in directions]
    for direction in active:
        seqs = _to_sequences(x, direction, layout)
        y = _from_sequences(selective_scan_1d(seqs, params[SCAN_ORDER.index(direction)]),
                            direction, x.shape)
        merged = y if merged is None else add(merged, y)
    if merged is None:
        raise ConfigurationError("at least one scan direction must be active", key="directions")
    if merge is ScanMerge.MEAN:
        merged = mul(merged, 1.0 / len(active))
    return merged


# =============================================================================
# MODULES
# =============================================================================

def _dt_bias_init(rng: np.random.Generator, shape) -> np.ndarray:
    """softplus(bias) log-uniform in [DT_MIN, DT_MAX]."""
    dt = np.exp(rng.uniform(math.log(DT_MIN), math.log(DT_MAX), size=shape))
    return dt + np.log(-np.expm1(-dt))


def _a_log_init(rng: np.random.Generator, shape) -> np.ndarray:
    channels, state = shape
    return np.tile(np.log(np.arange(1, state + 1, dtype=np.float64)), (channels, 1))


def dt_rank_for(channels: int) -> int:
    return max(math.ceil(channels / 16), 1)


class DirectionProjection(Module):
    """Input-dependent (delta, B, C) projections of one scan direction."""

    def __init__(self, channels: int, state: int, rank: int):
        super().__init__()
        self.x_proj = Linear(channels, rank + 2 * state, bias=False)
        self.dt_proj = Linear(rank, channels)
        bound = rank ** -0.5
        self.dt_proj.weight.init = lambda rng, shape: rng.uniform(-bound, bound, size=shape)
        self.dt_proj.bias.init = _dt_bias_init


class SS2D(Module):
    """ss2d with A_log and D shared across directions, projections per direction."""

    def __init__(self, channels: int, state: int = 16, rank: Optional[int] = None,
                 layout: ScanLayout = ScanLayout.LINE, merge: ScanMerge = ScanMerge.SUM):
        super().__init__()
        rank = rank or dt_rank_for(channels)
        self.A_log = new_parameter((channels, state), _a_log_init)
        self.D = new_parameter((channels,), ones_init)
        self.directions = [DirectionProjection(channels, state, rank) for _ in SCAN_ORDER]
        self.layout = layout
        self.merge = merge

    def ssm_params(self) -> List[SSMParams]:
        return [SSMParams(self.A_log, self.D, d.x_proj.weight, d.dt_proj.weight, d.dt_proj.bias)
                for d in self.directions]

    def forward(self, x: DiffArray, directions: Sequence[ScanDirection] = SCAN_ORDER) -> DiffArray:
        return ss2d(x, self.ssm_params(), self.layout, self.merge, directions)


class VSSMBlock(Module):
    """Visual state-space block over [B, C, H, W] with a residual connection."""

    def __init__(self, channels: int, state: int = 16, expand: int = 2,
                 layout: ScanLayout = ScanLayout.LINE, merge: ScanMerge = ScanMerge.SUM):
        super().__init__()
        inner = expand * channels
        self.inner = inner
        self.norm = LayerNorm(channels)
        self.in_proj = Linear(channels, 2 * inner, bias=False)
        self.dwconv = DepthwiseConv2d(inner, 3)
        self.ss2d = SS2D(inner, state, dt_rank_for(channels), layout, merge)
        self.out_norm = LayerNorm(inner)
        self.out_proj = Linear(inner, channels, bias=False)

    def forward(self, x: DiffArray) -> DiffArray:
        tokens = self.in_proj(self.norm(permute(x, (0, 2, 3, 1))))
        branch = permute(tokens[..., :self.inner], (0, 3, 1, 2))
        gate = tokens[..., self.inner:]
        branch = self.ss2d(silu(self.dwconv(branch)))
        mixed = mul(self.out_norm(permute(branch, (0, 2, 3, 1))), silu(gate))
        return add(x, permute(self.out_proj(mixed), (0, 3, 1, 2)))
