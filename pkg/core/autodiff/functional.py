"""Layer-level differentiable operations: matmul, convolution, pooling, batch norm, concat."""
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from core.autodiff.tensor import Tensor, record, reduce_mean
from core.errors import ShapeError

BN_EPSILON = 1e-5


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def _backward(g):
        return g @ b.values.T, a.values.T @ g
    return record("matmul", a.values @ b.values, (a, b), _backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x[B×in] · weightᵀ[in×out] + bias, weight stored as [out×in]."""
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear expects input [B×{weight.shape[1]}], got {x.shape}")
    inputs = (x, weight) if bias is None else (x, weight, bias)
    out = x.values @ weight.values.T
    if bias is not None:
        out = out + bias.values

    def _backward(g):
        grads = [g @ weight.values, g.T @ x.values]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads
    return record("linear", out, inputs, _backward)


def conv_output_size(size: int, kernel: int, stride: int, padding: int, floor: bool = False) -> int:
    span = size + 2 * padding - kernel
    if span < 0:
        raise ShapeError(f"kernel {kernel} larger than padded input {size + 2 * padding}")
    if span % stride and not floor:
        raise ShapeError(f"non-integral output size: ({size} + 2*{padding} - {kernel}) / {stride} + 1")
    return span // stride + 1


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0,
           floor: bool = False) -> Tensor:
    """Cross-correlation of x[B×C×H×W] with kernel[O×C×kh×kw].

    With `floor` the trailing rows/cols that do not fill a whole stride are dropped
    instead of rejected.
    """
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    n, c, h, w = x.shape
    o, _, kh, kw = kernel.shape
    out_h = conv_output_size(h, kh, stride, padding, floor)
    out_w = conv_output_size(w, kw, stride, padding, floor)

    padded = np.pad(x.values, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.values
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))
    windows = windows[:, :, :(out_h - 1) * stride + 1:stride, :(out_w - 1) * stride + 1:stride]
    # windows: [B, C, out_h, out_w, kh, kw]
    out = np.tensordot(windows, kernel.values, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.values.reshape(1, o, 1, 1)
    out = np.ascontiguousarray(out)

    def _backward(g):
        grad_kernel = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        grad_padded = np.zeros(padded.shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(g, kernel.values[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
                grad_padded[:, :, i:i + (out_h - 1) * stride + 1:stride, j:j + (out_w - 1) * stride + 1:stride] += contrib
        grad_x = grad_padded[:, :, padding:padding + h, padding:padding + w] if padding else grad_padded
        grads = [grad_x, grad_kernel]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return record("conv2d", out, inputs, _backward)


def maxpool2d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    """Max pooling over the last two axes of x[N×C×H×W]; ties go to the first index in scan order."""
    stride = stride or window
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects [N×C×H×W], got {x.shape}")
    n, c, h, w = x.shape
    if window > h or window > w:
        raise ShapeError(f"pool window {window} larger than input {h}×{w}")
    out_h = (h - window) // stride + 1
    out_w = (w - window) // stride + 1
    windows = sliding_window_view(x.values, (window, window), axis=(2, 3))
    windows = windows[:, :, :(out_h - 1) * stride + 1:stride, :(out_w - 1) * stride + 1:stride]
    flat = windows.reshape(n, c, out_h, out_w, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def _backward(g):
        grad = np.zeros(x.shape, dtype=g.dtype)
        di, dj = np.divmod(arg, window)
        rows = np.arange(out_h).reshape(1, 1, out_h, 1) * stride + di
        cols = np.arange(out_w).reshape(1, 1, 1, out_w) * stride + dj
        nn = np.arange(n).reshape(n, 1, 1, 1)
        cc = np.arange(c).reshape(1, c, 1, 1)
        np.add.at(grad, (nn, cc, rows, cols), g)
        return (grad,)
    return record("maxpool2d", np.ascontiguousarray(out), (x,), _backward)


def maxpool2d_per_timestep(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    """Pool x[T×B×C×H×W] one timestep at a time."""
    if x.ndim != 5:
        raise ShapeError(f"maxpool2d_per_timestep expects [T×B×C×H×W], got {x.shape}")
    t, b = x.shape[:2]
    pooled = maxpool2d(x.reshape(t * b, *x.shape[2:]), window, stride)
    return pooled.reshape(t, b, *pooled.shape[1:])


def global_avg_pool(x: Tensor) -> Tensor:
    return reduce_mean(x, axis=(2, 3))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               train: bool, momentum: float = 0.1, eps: float = BN_EPSILON) -> Tensor:
    """Per-channel normalization of x[N×C(×H×W)]; channel axis 1, statistics over every other axis.

    Running statistics are updated in place when `train` is set.
    """
    if x.ndim < 2 or x.shape[1] != gamma.shape[0]:
        raise ShapeError(f"batch_norm expects channel axis of size {gamma.shape[0]}, got {x.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    count = x.size // x.shape[1]

    if train:
        mean = x.values.mean(axis=axes, dtype=np.float64)
        var = x.values.var(axis=axes, dtype=np.float64)
        unbiased = var * count / max(count - 1, 1)
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        mean, var = running_mean, running_var

    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    x_hat = (x.values - mean.reshape(bshape).astype(x.dtype)) * inv_std.reshape(bshape)
    out = gamma.values.reshape(bshape) * x_hat + beta.values.reshape(bshape)

    def _backward(g):
        grad_gamma = (g * x_hat).sum(axis=axes)
        grad_beta = g.sum(axis=axes)
        g_hat = g * gamma.values.reshape(bshape)
        if train:
            grad_x = (inv_std.reshape(bshape) / count) * (
                count * g_hat
                - g_hat.sum(axis=axes, keepdims=True)
                - x_hat * (g_hat * x_hat).sum(axis=axes, keepdims=True))
        else:
            grad_x = g_hat * inv_std.reshape(bshape)
        return grad_x, grad_gamma, grad_beta
    return record("batch_norm", out.astype(x.dtype), (x, gamma, beta), _backward)


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not parts:
        raise ShapeError("concat needs at least one part")
    batch = parts[0].shape[0]
    for part in parts:
        if part.shape[0] != batch:
            raise ShapeError(f"concat batch mismatch: {[p.shape for p in parts]}")
    if len(parts) == 1:
        return parts[0]
    widths = [p.shape[axis] for p in parts]
    bounds = np.cumsum(widths)[:-1]

    def _backward(g):
        return np.split(g, bounds, axis=axis)
    return record("concat", np.concatenate([p.values for p in parts], axis=axis), tuple(parts), _backward)


def log_softmax(logits: Tensor) -> Tensor:
    shifted = logits.values - logits.values.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(out)

    def _backward(g):
        return (g - probs * g.sum(axis=1, keepdims=True),)
    return record("log_softmax", out, (logits,), _backward)
