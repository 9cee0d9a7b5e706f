"""
Spatial Primitives for Deco-Mamba

Convolution, pooling, resampling and normalization on NCHW DiffArrays, each with
an analytic backward rule registered through autodiff.make_node().

Key Features:
- conv2d / depthwise_conv2d built on numpy sliding windows
- batch_norm (train/eval) and layer_norm (per position over the last axis)
- pool2d and adaptive_pool2d with first-index tie breaking for max
- bilinear resampling with half-pixel centers (no corner alignment)
- grid_sample_bilinear with zero padding outside the image

Conventions:
- All spatial tensors are [B, C, H, W], row-major
- grid_sample coordinates are absolute pixels, coords[..., 0] = x (column),
  coords[..., 1] = y (row)
"""

from functools import lru_cache
from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from autodiff import DiffArray, make_node, record_macs
from errors import ConfigurationError, PreconditionError, ShapeError

BN_MOMENTUM = 0.1
NORM_EPS = 1e-5


def _require_rank(x: DiffArray, rank: int, op_name: str):
    if x.ndim != rank:
        raise ShapeError(op_name, f"expected a rank-{rank} array, got shape {x.shape}")


def _pad_spatial(values: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return values
    return np.pad(values, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


# =============================================================================
# CONVOLUTION
# =============================================================================

def conv2d(x: DiffArray, w: DiffArray, b: Optional[DiffArray] = None,
           stride: int = 1, padding: int = 0) -> DiffArray:
    """Zero-padded cross-correlation plus optional bias."""
    _require_rank(x, 4, "conv2d")
    _require_rank(w, 4, "conv2d")
    batch, in_ch, height, width = x.shape
    out_ch, w_in_ch, k_h, k_w = w.shape
    if in_ch != w_in_ch:
        raise ShapeError("conv2d", f"input has {in_ch} channels, weight expects {w_in_ch}")
    if height + 2 * padding < k_h or width + 2 * padding < k_w:
        raise ShapeError("conv2d", f"kernel {k_h}x{k_w} larger than padded input {height}x{width}")
    if b is not None and b.shape != (out_ch,):
        raise ShapeError("conv2d", f"bias shape {b.shape} != ({out_ch},)")

    padded = _pad_spatial(x.data, padding)
    out_h = (height + 2 * padding - k_h) // stride + 1
    out_w = (width + 2 * padding - k_w) // stride + 1
    windows = sliding_window_view(padded, (k_h, k_w), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride][:, :, :out_h, :out_w]
    out = np.tensordot(windows, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    record_macs("conv2d", batch * out_ch * out_h * out_w * in_ch * k_h * k_w)

    def backward(g):
        grads = []
        if x.requires_grad:
            grad_padded = np.zeros_like(padded)
            for i in range(k_h):
                for j in range(k_w):
                    contrib = np.tensordot(g, w.data[:, :, i, j], axes=([1], [0]))
                    grad_padded[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += \
                        contrib.transpose(0, 3, 1, 2)
            grads.append(grad_padded[:, :, padding:padding + height, padding:padding + width])
        else:
            grads.append(None)
        grads.append(np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3])) if w.requires_grad else None)
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return make_node(out, parents, backward, "conv2d")


def depthwise_conv2d(x: DiffArray, w: DiffArray, b: Optional[DiffArray] = None) -> DiffArray:
    """One k x k filter per channel, stride 1, 'same' zero padding."""
    _require_rank(x, 4, "depthwise_conv2d")
    batch, channels, height, width = x.shape
    if w.ndim != 4 or w.shape[0] != channels or w.shape[1] != 1:
        raise ShapeError("depthwise_conv2d", f"weight {w.shape} does not match {channels} channels")
    k = w.shape[2]
    pad = k // 2
    padded = _pad_spatial(x.data, pad)
    kernel = w.data[:, 0]

    out = np.zeros_like(x.data)
    for i in range(k):
        for j in range(k):
            out += padded[:, :, i:i + height, j:j + width] * kernel[None, :, i, j, None, None]
    if b is not None:
        out += b.data[None, :, None, None]
    record_macs("depthwise_conv2d", batch * channels * height * width * k * k)

    def backward(g):
        grad_padded = np.zeros_like(padded) if x.requires_grad else None
        grad_w = np.zeros_like(w.data)
        for i in range(k):
            for j in range(k):
                if grad_padded is not None:
                    grad_padded[:, :, i:i + height, j:j + width] += g * kernel[None, :, i, j, None, None]
                grad_w[:, 0, i, j] = (g * padded[:, :, i:i + height, j:j + width]).sum(axis=(0, 2, 3))
        grad_x = grad_padded[:, :, pad:pad + height, pad:pad + width] if grad_padded is not None else None
        grads = [grad_x, grad_w]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return make_node(out, parents, backward, "depthwise_conv2d")


# =============================================================================
# NORMALIZATION
# =============================================================================

def batch_norm(x: DiffArray, gamma: DiffArray, beta: DiffArray,
               running_mean: np.ndarray, running_var: np.ndarray, training: bool,
               momentum: float = BN_MOMENTUM, eps: float = NORM_EPS) -> DiffArray:
    """
    Per-channel normalization of [B, C, H, W].

    Train mode normalizes with biased batch statistics and updates the running
    statistics in place (unbiased variance, exponential momentum). Eval mode
    normalizes with the running statistics.
    """
    _require_rank(x, 4, "batch_norm")
    channels = x.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeError("batch_norm", f"affine parameters must have shape ({channels},)")
    axes = (0, 2, 3)

    if training:
        count = x.shape[0] * x.shape[2] * x.shape[3]
        if count < 2:
            raise PreconditionError("batch_norm", "train mode needs at least 2 values per channel")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * count / (count - 1)
    else:
        mean, var = running_mean, running_var

    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    normalized = (x.data - mean[None, :, None, None].astype(x.dtype)) * inv_std[None, :, None, None]
    out = normalized * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        grad_gamma = (g * normalized).sum(axis=axes)
        grad_beta = g.sum(axis=axes)
        grad_norm = g * gamma.data[None, :, None, None]
        if training:
            n = x.shape[0] * x.shape[2] * x.shape[3]
            grad_x = (inv_std[None, :, None, None] / n) * (
                n * grad_norm
                - grad_norm.sum(axis=axes, keepdims=True)
                - normalized * (grad_norm * normalized).sum(axis=axes, keepdims=True)
            )
        else:
            grad_x = grad_norm * inv_std[None, :, None, None]
        return grad_x, grad_gamma, grad_beta

    return make_node(out, (x, gamma, beta), backward, "batch_norm")


def layer_norm(x: DiffArray, gamma: DiffArray, beta: DiffArray, eps: float = NORM_EPS) -> DiffArray:
    """Normalize every position over the last axis."""
    channels = x.shape[-1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeError("layer_norm", f"affine parameters must have shape ({channels},)")
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    normalized = (x.data - mean) * inv_std
    out = normalized * gamma.data + beta.data

    def backward(g):
        lead_axes = tuple(range(x.ndim - 1))
        grad_gamma = (g * normalized).sum(axis=lead_axes)
        grad_beta = g.sum(axis=lead_axes)
        grad_norm = g * gamma.data
        grad_x = (inv_std / channels) * (
            channels * grad_norm
            - grad_norm.sum(axis=-1, keepdims=True)
            - normalized * (grad_norm * normalized).sum(axis=-1, keepdims=True)
        )
        return grad_x, grad_gamma, grad_beta

    return make_node(out, (x, gamma, beta), backward, "layer_norm")


# =============================================================================
# POOLING
# =============================================================================

def pool2d(x: DiffArray, mode: str, kernel: int, stride: Optional[int] = None) -> DiffArray:
    """Max or average pooling without padding."""
    _require_rank(x, 4, "pool2d")
    stride = stride or kernel
    batch, channels, height, width = x.shape
    if kernel > height or kernel > width:
        raise ShapeError("pool2d", f"kernel {kernel} exceeds spatial extent {height}x{width}")
    out_h = (height - kernel) // stride + 1
    out_w = (width - kernel) // stride + 1
    windows = sliding_window_view(x.data, (kernel, kernel), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride][:, :, :out_h, :out_w]
    flat = windows.reshape(batch, channels, out_h, out_w, kernel * kernel)

    if mode == "max":
        winner = np.argmax(flat, axis=-1)
        out = np.take_along_axis(flat, winner[..., None], axis=-1)[..., 0]
    elif mode == "avg":
        winner = None
        out = flat.mean(axis=-1)
    else:
        raise ConfigurationError(f"unknown pooling mode '{mode}'", key="mode")

    def backward(g):
        grad_x = np.zeros_like(x.data)
        for tap in range(kernel * kernel):
            i, j = divmod(tap, kernel)
            share = g * (winner == tap) if winner is not None else g / (kernel * kernel)
            grad_x[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += share
        return (grad_x,)

    return make_node(np.ascontiguousarray(out), (x,), backward, f"{mode}_pool2d")


def adaptive_pool2d(x: DiffArray, mode: str, output_size: Tuple[int, int] = (1, 1)) -> DiffArray:
    """Global pooling per channel to [B, C, 1, 1]."""
    _require_rank(x, 4, "adaptive_pool2d")
    if tuple(output_size) != (1, 1):
        raise ConfigurationError("only global (1, 1) adaptive pooling is supported", key="output_size")
    batch, channels, height, width = x.shape
    flat = x.data.reshape(batch, channels, height * width)

    if mode == "max":
        winner = np.argmax(flat, axis=-1)
        out = np.take_along_axis(flat, winner[..., None], axis=-1)
    elif mode == "avg":
        winner = None
        out = flat.mean(axis=-1, keepdims=True)
    else:
        raise ConfigurationError(f"unknown pooling mode '{mode}'", key="mode")

    def backward(g):
        g = g.reshape(batch, channels, 1)
        if winner is None:
            grad = np.broadcast_to(g / (height * width), flat.shape).copy()
        else:
            grad = np.zeros_like(flat)
            np.put_along_axis(grad, winner[..., None], g, axis=-1)
        return (grad.reshape(x.shape),)

    return make_node(out.reshape(batch, channels, 1, 1), (x,), backward, f"adaptive_{mode}_pool2d")


# =============================================================================
# RESAMPLING
# =============================================================================

@lru_cache(maxsize=64)
def interpolation_matrix(size_in: int, size_out: int, dtype_name: str = "float32") -> np.ndarray:
    """
    Rows of linear-interpolation weights mapping size_in samples to size_out.

    Half-pixel centers: output o samples source (o + 0.5) * size_in / size_out - 0.5,
    clamped to [0, size_in - 1].
    """
    matrix = np.zeros((size_out, size_in), dtype=np.float64)
    scale = size_in / size_out
    for o in range(size_out):
        src = min(max((o + 0.5) * scale - 0.5, 0.0), size_in - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, size_in - 1)
        frac = src - lo
        matrix[o, lo] += 1.0 - frac
        matrix[o, hi] += frac
    matrix = matrix.astype(dtype_name)
    matrix.setflags(write=False)
    return matrix


def resize_bilinear(x: DiffArray, out_h: int, out_w: int) -> DiffArray:
    """Separable bilinear resize; the backward pass is the transposed splat."""
    _require_rank(x, 4, "resize_bilinear")
    batch, channels, height, width = x.shape
    rows = interpolation_matrix(height, out_h, x.dtype.name)
    cols = interpolation_matrix(width, out_w, x.dtype.name)
    out = np.matmul(np.matmul(rows, x.data), cols.T)
    record_macs("interpolate", batch * channels * out_h * out_w * 4)

    def backward(g):
        return (np.matmul(rows.T, np.matmul(g, cols)),)

    return make_node(np.ascontiguousarray(out), (x,), backward, "resize_bilinear")


def bilinear_upsample(x: DiffArray, factor: int = 2) -> DiffArray:
    _require_rank(x, 4, "bilinear_upsample")
    return resize_bilinear(x, x.shape[2] * factor, x.shape[3] * factor)


def grid_sample_bilinear(x: DiffArray, coords: DiffArray) -> DiffArray:
    """
    Sample x [B, C, H, W] at continuous positions coords [B, K, Ho, Wo, 2].

    Returns [B, C, K, Ho, Wo]. Each of the four bilinear corners outside the
    image reads zero and receives no gradient.
    """
    _require_rank(x, 4, "grid_sample_bilinear")
    if coords.ndim != 5 or coords.shape[-1] != 2 or coords.shape[0] != x.shape[0]:
        raise ShapeError("grid_sample_bilinear", f"coords shape {coords.shape} incompatible with {x.shape}")
    batch, channels, height, width = x.shape
    taps = coords.shape[1:4]

    col = coords.data[..., 0]
    row = coords.data[..., 1]
    col0 = np.floor(col)
    row0 = np.floor(row)
    frac_c = (col - col0).astype(x.dtype)
    frac_r = (row - row0).astype(x.dtype)
    col0 = col0.astype(np.int64)
    row0 = row0.astype(np.int64)
    flat_x = x.data.reshape(batch, channels, height * width)

    corners = []
    for dr, dc in ((0, 0), (0, 1), (1, 0), (1, 1)):
        r = row0 + dr
        c = col0 + dc
        valid = (r >= 0) & (r < height) & (c >= 0) & (c < width)
        index = np.clip(r, 0, height - 1) * width + np.clip(c, 0, width - 1)
        values = np.stack([flat_x[bi][:, index[bi]] for bi in range(batch)])
        values = values * valid[:, None].astype(x.dtype)
        corners.append((index, valid, values))

    w00 = (1 - frac_r) * (1 - frac_c)
    w01 = (1 - frac_r) * frac_c
    w10 = frac_r * (1 - frac_c)
    w11 = frac_r * frac_c
    weights = (w00, w01, w10, w11)
    out = sum(weight[:, None] * values for weight, (_, _, values) in zip(weights, corners))
    record_macs("grid_sample", batch * channels * int(np.prod(taps)) * 4)

    def backward(g):
        grad_x = None
        if x.requires_grad:
            grad_flat = np.zeros((batch, height * width, channels), dtype=x.dtype)
            for weight, (index, valid, _) in zip(weights, corners):
                share = g * (weight * valid)[:, None]
                for bi in range(batch):
                    np.add.at(grad_flat[bi], index[bi].reshape(-1),
                              share[bi].reshape(channels, -1).T)
            grad_x = grad_flat.transpose(0, 2, 1).reshape(x.shape)
        grad_coords = None
        if coords.requires_grad:
            v00, v01, v10, v11 = (values for _, _, values in corners)
            d_col = (1 - frac_r)[:, None] * (v01 - v00) + frac_r[:, None] * (v11 - v10)
            d_row = (1 - frac_c)[:, None] * (v10 - v00) + frac_c[:, None] * (v11 - v01)
            grad_coords = np.stack([(g * d_col).sum(axis=1), (g * d_row).sum(axis=1)], axis=-1)
        return grad_x, grad_coords

    return make_node(np.ascontiguousarray(out), (x, coords), backward, "grid_sample")
