"""Dense layer primitives with explicit forward/backward pairs.

Every forward function returns ``(output, cache)``; the matching backward
consumes that cache and the upstream gradient and returns a
:class:`LayerGrads`.  Caches are plain values, so nothing here holds state
and calls on disjoint data can run concurrently.

Arrays are ``numpy.ndarray`` in row-major order.  Outputs keep the dtype of
the input, so float64 (the default everywhere) and float32 both work.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import NumericError, ShapeError, UsageError, ValidationError

PROB_FLOOR = 1e-12


def _per_sample_matmul(a, m):
    """``a @ m`` for ``a`` of shape ``(B, rows, K)``, one BLAS call per sample.

    A single large GEMM may block rows differently depending on ``B``; a
    stacked matmul keeps each sample's result bitwise independent of the
    rest of the batch.
    """
    return np.matmul(a, m)


@dataclass
class LayerGrads:
    grad_input: np.ndarray
    grad_params: list = field(default_factory=list)


def all_finite(x) -> bool:
    return bool(np.all(np.isfinite(x)))


def _expect_ndim(name, x, ndim):
    if np.ndim(x) != ndim:
        raise ShapeError(f"{name} must be {ndim}-D, got shape {np.shape(x)}")


def _check_grad_output(cache_out_shape, grad_output):
    if tuple(grad_output.shape) != tuple(cache_out_shape):
        raise UsageError(
            f"grad_output shape {grad_output.shape} does not match forward "
            f"output shape {tuple(cache_out_shape)}"
        )


def _require_cache(cache, kind):
    if not isinstance(cache, kind):
        raise UsageError(f"expected a {kind.__name__} from the forward pass, got {type(cache).__name__}")


# ---------------------------------------------------------------- convolution

class ConvCache(NamedTuple):
    input: np.ndarray
    kernel: np.ndarray
    stride: int
    out_shape: tuple
    cols: np.ndarray  # (B*H'*W', Cin*kh*kw) im2col matrix


def _im2col(x, kh, kw, stride):
    B, cin = x.shape[:2]
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    Ho, Wo = win.shape[2:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, cin * kh * kw), Ho, Wo


def conv2d(x, kernel, bias, stride=1):
    """Valid-padding 2-D cross-correlation plus per-channel bias.

    ``x`` is ``(B, Cin, H, W)``, ``kernel`` is ``(Cout, Cin, kh, kw)`` and
    ``bias`` is ``(Cout,)``.  ``(H - kh)`` and ``(W - kw)`` must be multiples
    of ``stride``.
    """
    _expect_ndim("input", x, 4)
    _expect_ndim("kernel", kernel, 4)
    if not isinstance(stride, (int, np.integer)) or stride < 1:
        raise ValidationError(f"stride must be a positive int, got {stride!r}")
    B, cin, H, W = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(f"input {x.shape} and kernel {kernel.shape} disagree on input channels")
    if np.shape(bias) != (cout,):
        raise ShapeError(f"bias {np.shape(bias)} does not match kernel {kernel.shape}")
    if H < kh or W < kw or (H - kh) % stride or (W - kw) % stride:
        raise ShapeError(f"input {x.shape} incompatible with kernel {kernel.shape} at stride {stride}")

    cols, Ho, Wo = _im2col(x, kh, kw, stride)
    out = _per_sample_matmul(cols.reshape(B, Ho * Wo, -1), kernel.reshape(cout, -1).T) + bias
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, cout).transpose(0, 3, 1, 2))
    return out, ConvCache(x, kernel, int(stride), out.shape, cols)


def conv2d_backward(cache, grad_output, need_input_grad=True):
    """Returns grads ``(input, [kernel, bias])``.

    With ``need_input_grad=False`` the input gradient is skipped and
    returned as None (first layer of a network).
    """
    _require_cache(cache, ConvCache)
    _check_grad_output(cache.out_shape, grad_output)
    x, kernel, stride = cache.input, cache.kernel, cache.stride
    cout, cin, kh, kw = kernel.shape
    B, _, Ho, Wo = grad_output.shape

    g2 = grad_output.transpose(0, 2, 3, 1).reshape(-1, cout)
    grad_kernel = (g2.T @ cache.cols).reshape(kernel.shape)
    grad_bias = grad_output.sum(axis=(0, 2, 3))
    if not need_input_grad:
        return LayerGrads(None, [grad_kernel, grad_bias])

    # contribution of each output cell to each kernel tap
    dcols = _per_sample_matmul(g2.reshape(B, Ho * Wo, cout), kernel.reshape(cout, -1))
    dcols = dcols.reshape(B, Ho, Wo, cin, kh, kw)
    grad_input = np.zeros_like(x)
    for p in range(kh):
        for q in range(kw):
            grad_input[:, :, p:p + stride * Ho:stride, q:q + stride * Wo:stride] += dcols[..., p, q].transpose(0, 3, 1, 2)
    return LayerGrads(grad_input, [grad_kernel, grad_bias])


# -------------------------------------------------------------------- pooling

class PoolCache(NamedTuple):
    input_shape: tuple
    argmax: np.ndarray  # (B, C, H/2, W/2) index 0..3 within each window, row-major


def maxpool2(x):
    """2x2 max pooling, stride 2.  Ties go to the lowest row-major index."""
    _expect_ndim("input", x, 4)
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"maxpool2 needs even spatial extents, got {x.shape}")
    win = x.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
    arg = np.argmax(win, axis=-1)  # first occurrence on ties
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, PoolCache(x.shape, arg)


def maxpool2_backward(cache, grad_output):
    _require_cache(cache, PoolCache)
    B, C, H, W = cache.input_shape
    _check_grad_output((B, C, H // 2, W // 2), grad_output)
    win = np.zeros((B, C, H // 2, W // 2, 4), dtype=grad_output.dtype)
    np.put_along_axis(win, cache.argmax[..., None], grad_output[..., None], axis=-1)
    grad_input = win.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
    return LayerGrads(grad_input, [])


# ------------------------------------------------------------------- pointwise

class ReluCache(NamedTuple):
    mask: np.ndarray


def relu(x):
    mask = x > 0
    return np.where(mask, x, 0).astype(x.dtype, copy=False), ReluCache(mask)


def relu_backward(cache, grad_output):
    _require_cache(cache, ReluCache)
    _check_grad_output(cache.mask.shape, grad_output)
    return LayerGrads(np.where(cache.mask, grad_output, 0).astype(grad_output.dtype, copy=False), [])


# ------------------------------------------------------------------------ dense

class AffineCache(NamedTuple):
    input: np.ndarray
    weight: np.ndarray


def affine(x, weight, bias):
    """``x @ weight + bias`` for ``x`` of shape ``(B, D)`` and ``weight`` ``(D, K)``."""
    _expect_ndim("input", x, 2)
    _expect_ndim("weight", weight, 2)
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"input {x.shape} and weight {weight.shape} inner extents differ")
    if np.shape(bias) != (weight.shape[1],):
        raise ShapeError(f"bias {np.shape(bias)} does not match weight {weight.shape}")
    return _per_sample_matmul(x[:, None, :], weight)[:, 0] + bias, AffineCache(x, weight)


def affine_backward(cache, grad_output):
    _require_cache(cache, AffineCache)
    _check_grad_output((cache.input.shape[0], cache.weight.shape[1]), grad_output)
    return LayerGrads(
        _per_sample_matmul(grad_output[:, None, :], cache.weight.T)[:, 0],
        [cache.input.T @ grad_output, grad_output.sum(axis=0)],
    )


class GapCache(NamedTuple):
    input_shape: tuple


def global_avg_pool(x):
    _expect_ndim("input", x, 4)
    return x.mean(axis=(2, 3)), GapCache(x.shape)


def global_avg_pool_backward(cache, grad_output):
    _require_cache(cache, GapCache)
    B, C, H, W = cache.input_shape
    _check_grad_output((B, C), grad_output)
    grad = np.broadcast_to(grad_output[:, :, None, None] / (H * W), cache.input_shape)
    return LayerGrads(np.array(grad), [])


# ----------------------------------------------------------- softmax and loss

def softmax_rows(x):
    """Row-wise softmax with per-row max subtraction."""
    _expect_ndim("input", x, 2)
    if x.shape[1] < 1:
        raise ShapeError("softmax_rows needs at least one column")
    if not all_finite(x):
        raise NumericError("softmax_rows received non-finite scores")
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def check_onehot(onehot, shape=None):
    onehot = np.asarray(onehot)
    if onehot.ndim != 2 or (shape is not None and onehot.shape != tuple(shape)):
        raise ValidationError(f"one-hot targets must have shape {shape}, got {onehot.shape}")
    ok = np.all((onehot == 0) | (onehot == 1)) and np.all(onehot.sum(axis=1) == 1)
    if not ok:
        raise ValidationError("one-hot rows must contain exactly one 1 and zeros elsewhere")
    return onehot


def onehot(labels, n):
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, n))
    out[np.arange(labels.size), labels] = 1.0
    return out


def cross_entropy(probs, targets):
    """Mean over rows of ``-log p[true class]``, with p clamped at 1e-12."""
    _expect_ndim("probabilities", probs, 2)
    check_onehot(targets, probs.shape)
    picked = np.sum(probs * targets, axis=1)
    return float(-np.mean(np.log(np.maximum(picked, PROB_FLOOR))))


def softmax_cross_entropy_grad(probs, targets):
    """Gradient of ``cross_entropy(softmax_rows(logits))`` w.r.t. the logits."""
    return (probs - targets) / probs.shape[0]
