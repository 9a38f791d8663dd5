"""Differentiable primitives: dense, conv1d, pooling, losses.

All ops accept a leading batch axis and most also accept the unbatched
form; shapes are validated eagerly so a mismatch fails at the call site,
not deep inside backward. conv1d is written as im2col plus one matmul so
the flops go through BLAS.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor

CONV_KERNEL_WIDTH = 3  # fixed "same" convolution: width 3, stride 1, zero pad 1


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0), (x,))

    def bw():
        x.accumulate_grad(out.grad * (x.data > 0))

    out._backward = bw
    return out


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``y = x @ weight.T + bias``.

    ``x`` is ``(B, n_in)`` or ``(n_in,)``; ``weight`` is ``(n_out, n_in)``;
    ``bias`` is ``(n_out,)``.
    """
    if weight.ndim != 2 or bias.ndim != 1 or bias.shape[0] != weight.shape[0]:
        raise ValueError(f"bad dense parameter shapes {weight.shape} / {bias.shape}")
    unbatched = x.ndim == 1
    x2 = x.data[None, :] if unbatched else x.data
    if x2.ndim != 2 or x2.shape[1] != weight.shape[1]:
        raise ValueError(f"dense input {x.shape} does not match weight {weight.shape}")
    y2 = x2 @ weight.data.T + bias.data
    out = Tensor(y2[0] if unbatched else y2, (x, weight, bias))

    def bw():
        g2 = out.grad[None, :] if unbatched else out.grad
        weight.accumulate_grad(g2.T @ x2)
        bias.accumulate_grad(g2.sum(axis=0))
        gx = g2 @ weight.data
        x.accumulate_grad(gx[0] if unbatched else gx)

    out._backward = bw
    return out


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """1-D convolution, kernel width 3, stride 1, symmetric zero padding.

    ``x`` is ``(B, C_in, L)`` or ``(C_in, L)``; ``kernel`` is
    ``(C_out, C_in, 3)``; output length equals input length.
    """
    if kernel.ndim != 3 or kernel.shape[2] != CONV_KERNEL_WIDTH:
        raise ValueError(f"conv1d kernel must be (C_out, C_in, {CONV_KERNEL_WIDTH}), got {kernel.shape}")
    if bias.ndim != 1 or bias.shape[0] != kernel.shape[0]:
        raise ValueError(f"conv1d bias shape {bias.shape} does not match kernel {kernel.shape}")
    unbatched = x.ndim == 2
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 3 or xd.shape[1] != kernel.shape[1]:
        raise ValueError(f"conv1d input {x.shape} does not match kernel {kernel.shape}")
    n_batch, c_in, length = xd.shape
    c_out = kernel.shape[0]
    pad = CONV_KERNEL_WIDTH // 2

    padded = np.zeros((n_batch, c_in, length + 2 * pad), dtype=xd.dtype)
    padded[:, :, pad:pad + length] = xd
    # (B, C_in, L, 3) windows -> (B, C_in*3, L) columns, c-major then tap
    windows = sliding_window_view(padded, CONV_KERNEL_WIDTH, axis=2)
    cols = np.ascontiguousarray(windows.transpose(0, 1, 3, 2)).reshape(
        n_batch, c_in * CONV_KERNEL_WIDTH, length
    )
    kmat = kernel.data.reshape(c_out, c_in * CONV_KERNEL_WIDTH)
    y = np.matmul(kmat, cols) + bias.data[None, :, None]
    out = Tensor(y[0] if unbatched else y, (x, kernel, bias))

    def bw():
        g = out.grad[None] if unbatched else out.grad  # (B, C_out, L)
        gflat = g.transpose(1, 0, 2).reshape(c_out, n_batch * length)
        cflat = cols.transpose(1, 0, 2).reshape(c_in * CONV_KERNEL_WIDTH, n_batch * length)
        kernel.accumulate_grad((gflat @ cflat.T).reshape(kernel.shape))
        bias.accumulate_grad(g.sum(axis=(0, 2)))
        dcols = np.matmul(kmat.T, g)  # (B, C_in*3, L)
        dcols = dcols.reshape(n_batch, c_in, CONV_KERNEL_WIDTH, length)
        dpadded = np.zeros_like(padded)
        for tap in range(CONV_KERNEL_WIDTH):
            dpadded[:, :, tap:tap + length] += dcols[:, :, tap, :]
        dx = dpadded[:, :, pad:pad + length]
        x.accumulate_grad(dx[0] if unbatched else dx)

    out._backward = bw
    return out


def maxpool1d(x: Tensor) -> Tensor:
    """Max pooling along the last axis, window 2, stride 2.

    A trailing odd element is dropped. Ties route the gradient to the
    first (earlier) element of the window.
    """
    length = x.shape[-1]
    if length < 2:
        raise ValueError(f"maxpool1d needs length >= 2, got {length}")
    half = length // 2
    first = x.data[..., 0:2 * half:2]
    second = x.data[..., 1:2 * half:2]
    take_first = first >= second
    out = Tensor(np.where(take_first, first, second), (x,))

    def bw():
        g = out.grad
        dx = np.zeros_like(x.data)
        dx[..., 0:2 * half:2] = g * take_first
        dx[..., 1:2 * half:2] = g * ~take_first
        x.accumulate_grad(dx)

    out._backward = bw
    return out


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = Tensor(x.data.reshape(shape), (x,))

    def bw():
        x.accumulate_grad(out.grad.reshape(x.shape))

    out._backward = bw
    return out


def flatten(x: Tensor, start_axis: int = 0) -> Tensor:
    """Collapse axes from ``start_axis`` on into one."""
    if not 0 <= start_axis < max(x.ndim, 1):
        raise ValueError(f"flatten start_axis {start_axis} out of range for {x.shape}")
    tail = int(np.prod(x.shape[start_axis:], dtype=np.int64))
    return reshape(x, x.shape[:start_axis] + (tail,))


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    if len(parts) == 0:
        raise ValueError("concat needs at least one tensor")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis), tuple(parts))
    sizes = [p.shape[axis] for p in parts]

    def bw():
        offsets = np.cumsum([0] + sizes)
        for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * out.ndim
            idx[axis] = slice(lo, hi)
            part.accumulate_grad(out.grad[tuple(idx)])

    out._backward = bw
    return out


def subtract(a: Tensor, b: Tensor) -> Tensor:
    return a - b


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross entropy between softmax(logits) and integer labels.

    ``logits`` is ``(B, K)`` or ``(K,)``; ``labels`` is a length-B integer
    array (or a scalar for the unbatched form). Log-sum-exp is stabilized
    by subtracting the row max.
    """
    unbatched = logits.ndim == 1
    z = logits.data[None, :] if unbatched else logits.data
    if z.ndim != 2:
        raise ValueError(f"logits must be 1-D or 2-D, got {logits.shape}")
    y = np.atleast_1d(np.asarray(labels))
    if y.shape != (z.shape[0],):
        raise ValueError(f"labels shape {y.shape} does not match batch {z.shape[0]}")
    if not np.issubdtype(y.dtype, np.integer):
        raise ValueError("labels must be integers")
    if y.min() < 0 or y.max() >= z.shape[1]:
        raise ValueError(f"label out of range [0, {z.shape[1]})")
    n = z.shape[0]
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1))
    losses = lse - shifted[np.arange(n), y]
    out = Tensor(np.asarray(losses.mean(), dtype=z.dtype), (logits,))

    def bw():
        p = np.exp(shifted)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), y] -= 1.0
        g = out.grad * p / n
        logits.accumulate_grad(g[0] if unbatched else g)

    out._backward = bw
    return out


def mse(prediction: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over every element."""
    if prediction.shape != target.shape:
        raise ValueError(f"mse shape mismatch: {prediction.shape} vs {target.shape}")
    diff = prediction.data - target.data
    out = Tensor(np.asarray(np.mean(diff * diff), dtype=prediction.data.dtype),
                 (prediction, target))

    def bw():
        g = out.grad * 2.0 * diff / diff.size
        prediction.accumulate_grad(g)
        target.accumulate_grad(-g)

    out._backward = bw
    return out
