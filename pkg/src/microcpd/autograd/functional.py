"""Differentiable operators used by the network.

Convolution follows the cross-correlation convention (kernels are not
flipped). Max-pool gradients go to the first (lowest flat index) maximum.
"""

from __future__ import annotations

from contextlib import contextmanager
from itertools import product

import numpy as np

from ..exceptions import ShapeError
from .tensor import Tensor, as_tensor

BN_EPS = 1e-5
LN_EPS = 1e-5
BN_MOMENTUM = 0.1

_branch_log: list | None = None


@contextmanager
def record_branches():
    """Collect the branch taken by every non-smooth op (relu masks, max-pool argmaxes).

    Two forward passes with equal logs lie on the same smooth piece, which is
    what finite-difference checks need.
    """
    global _branch_log
    previous, _branch_log = _branch_log, []
    try:
        yield _branch_log
    finally:
        _branch_log = previous


def _out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


_CHUNK_ELEMENTS = 1 << 24


def _batch_chunks(B, per_sample):
    step = max(1, _CHUNK_ELEMENTS // max(per_sample, 1))
    return [slice(b, min(b + step, B)) for b in range(0, B, step)]


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """3D cross-correlation. x: (B, Cin, D, H, W); weight: (Cout, Cin, kd, kh, kw).

    Computed as a batched matrix product over an unfolded (im2col) view,
    chunked over the batch to bound memory.
    """
    xd, wd = x.data, weight.data
    if xd.ndim != 5 or wd.ndim != 5:
        raise ShapeError(f"conv3d expects 5-D input and weight, got {xd.shape} and {wd.shape}")
    B, C, D, H, W = xd.shape
    O, Cw, kd, kh, kw = wd.shape
    if Cw != C:
        raise ShapeError(f"conv3d channel mismatch: input has {C}, weight expects {Cw}")
    s, p = stride, padding
    Do, Ho, Wo = _out_size(D, kd, s, p), _out_size(H, kh, s, p), _out_size(W, kw, s, p)
    if min(Do, Ho, Wo) < 1:
        raise ShapeError(f"conv3d output would be empty for input {xd.shape}")
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else xd
    offsets = list(product(range(kd), range(kh), range(kw)))
    K, N = C * len(offsets), Do * Ho * Wo
    w2 = wd.reshape(O, K)
    dtype = np.result_type(xd, wd)
    chunks = _batch_chunks(B, K * N)

    def window(i, j, l):
        return (
            slice(i, i + s * (Do - 1) + 1, s),
            slice(j, j + s * (Ho - 1) + 1, s),
            slice(l, l + s * (Wo - 1) + 1, s),
        )

    def unfold(sl):
        part = xp[sl]
        if len(offsets) == 1:
            return np.ascontiguousarray(part[(slice(None), slice(None)) + window(0, 0, 0)], dtype=dtype).reshape(-1, K, N)
        cols = np.empty((part.shape[0], C, len(offsets), Do, Ho, Wo), dtype=dtype)
        for n, (i, j, l) in enumerate(offsets):
            cols[:, :, n] = part[(slice(None), slice(None)) + window(i, j, l)]
        return cols.reshape(-1, K, N)

    out = np.empty((B, O, N), dtype=dtype)
    for sl in chunks:
        np.matmul(w2, unfold(sl), out=out[sl])
    out = out.reshape(B, O, Do, Ho, Wo)
    parents = (x, weight)
    if bias is not None:
        out += bias.data.reshape(1, O, 1, 1, 1)
        parents = (x, weight, bias)

    def backward(g):
        gx = gw = gb = None
        g3 = g.reshape(B, O, N)
        if weight.requires_grad:
            gw2 = np.zeros((O, K), dtype=dtype)
            for sl in chunks:
                cols = unfold(sl)
                gw2 += np.matmul(g3[sl], cols.transpose(0, 2, 1)).sum(axis=0)
            gw = gw2.reshape(wd.shape)
        if x.requires_grad and len(offsets) == 1 and s == 1 and p == 0:
            gx = np.matmul(w2.T, g3).reshape(xd.shape)
        elif x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=dtype)
            for sl in chunks:
                gcols = np.matmul(w2.T, g3[sl]).reshape(-1, C, len(offsets), Do, Ho, Wo)
                target = gxp[sl]
                for n, (i, j, l) in enumerate(offsets):
                    target[(slice(None), slice(None)) + window(i, j, l)] += gcols[:, :, n]
            gx = gxp[:, :, p:p + D, p:p + H, p:p + W] if p else gxp
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    return Tensor.from_op(out, parents, backward)


def _channel_view(a: np.ndarray, ndim: int) -> np.ndarray:
    return a.reshape((1, -1) + (1,) * (ndim - 2))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """Per-channel normalization over batch and spatial axes.

    In training mode the batch statistics are used and the running buffers
    are updated in place (biased variance); in eval mode the running
    statistics are used and nothing is mutated.
    """
    xd = x.data
    if xd.ndim < 2:
        raise ShapeError("batch_norm expects (B, C, ...) input")
    if xd.shape[0] == 0:
        raise ShapeError("batch_norm on an empty batch")
    axes = (0,) + tuple(range(2, xd.ndim))
    g_ = _channel_view(gamma.data, xd.ndim)
    b_ = _channel_view(beta.data, xd.ndim)
    if training:
        mean = xd.mean(axis=axes, keepdims=True)
        var = xd.var(axis=axes, keepdims=True)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean.reshape(-1)
        running_var *= 1.0 - momentum
        running_var += momentum * var.reshape(-1)
    else:
        mean = _channel_view(running_mean, xd.ndim).astype(xd.dtype)
        var = _channel_view(running_var, xd.ndim).astype(xd.dtype)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean) * invstd
    out = g_ * xhat + b_
    count = xd.size // xd.shape[1]

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * g_
            if training:
                gx = invstd / count * (
                    count * gxhat
                    - gxhat.sum(axis=axes, keepdims=True)
                    - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
                )
            else:
                gx = gxhat * invstd
        return gx, ggamma, gbeta

    return Tensor.from_op(out, (x, gamma, beta), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """Per-sample normalization over all non-batch axes, per-channel affine."""
    xd = x.data
    if xd.ndim < 2 or xd.size // max(xd.shape[0], 1) < 2:
        raise ShapeError("layer_norm needs at least 2 elements per sample")
    axes = tuple(range(1, xd.ndim))
    mean = xd.mean(axis=axes, keepdims=True)
    var = xd.var(axis=axes, keepdims=True)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean) * invstd
    g_ = _channel_view(gamma.data, xd.ndim)
    b_ = _channel_view(beta.data, xd.ndim)
    out = g_ * xhat + b_
    count = xd.size // xd.shape[0]
    caxes = (0,) + tuple(range(2, xd.ndim))

    def backward(g):
        ggamma = (g * xhat).sum(axis=caxes) if gamma.requires_grad else None
        gbeta = g.sum(axis=caxes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * g_
            gx = invstd / count * (
                count * gxhat
                - gxhat.sum(axis=axes, keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
            )
        return gx, ggamma, gbeta

    return Tensor.from_op(out, (x, gamma, beta), backward)


def _sigmoid(a: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _branch_log is not None:
        _branch_log.append(np.packbits(mask))
    return Tensor.from_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return Tensor.from_op(s, (x,), lambda g: (g * s * (1 - s),))


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    xd = x.data
    return Tensor.from_op(xd * s, (x,), lambda g: (g * (s + xd * s * (1 - s)),))


ACTIVATIONS = {"relu": relu, "silu": silu, "sigmoid": sigmoid}


def activation(x: Tensor, kind: str | None) -> Tensor:
    if kind in (None, "none"):
        return x
    try:
        return ACTIVATIONS[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None


def global_max_pool(x: Tensor) -> Tensor:
    """(B, C, *spatial) -> (B, C, 1, ..., 1) spatial maximum."""
    xd = x.data
    if xd.ndim < 3 or min(xd.shape[2:]) < 1:
        raise ShapeError("global_max_pool expects (B, C, *spatial) with nonempty spatial dims")
    B, C = xd.shape[:2]
    flat = xd.reshape(B, C, -1)
    idx = flat.argmax(axis=2)
    if _branch_log is not None:
        _branch_log.append(idx)
    out = np.take_along_axis(flat, idx[..., None], axis=2)
    out_shape = (B, C) + (1,) * (xd.ndim - 2)

    def backward(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], g.reshape(B, C, 1), axis=2)
        return (gflat.reshape(xd.shape),)

    return Tensor.from_op(out.reshape(out_shape), (x,), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """(B, n) x (m, n) weight -> (B, m).

    Rows are multiplied one at a time so a sample's output does not depend
    on the rest of the batch (BLAS blocking varies with the row count).
    """
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = np.matmul(xd[:, None, :], wd.T)[:, 0]
    parents = (x, weight)
    if bias is not None:
        if bias.shape != (wd.shape[0],):
            raise ShapeError(f"linear: bias {bias.shape} does not match weight {wd.shape}")
        out = out + bias.data
        parents = (x, weight, bias)

    def backward(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, (g.sum(axis=0) if bias.requires_grad else None)

    return Tensor.from_op(out, parents, backward)


def _softmax(a: np.ndarray, axis: int) -> np.ndarray:
    z = a - a.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    s = _softmax(x.data, axis)
    return Tensor.from_op(s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    ld = logits.data
    if ld.ndim != 2 or labels.shape != (ld.shape[0],):
        raise ShapeError(f"cross_entropy: logits {ld.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= ld.shape[1]):
        raise ValueError(f"labels must lie in [0, {ld.shape[1]})")
    B = ld.shape[0]
    z = ld - ld.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    nll = logsum - z[np.arange(B), labels]
    loss = np.asarray(nll.mean(), dtype=ld.dtype)

    def backward(g):
        p = _softmax(ld, 1)
        p[np.arange(B), labels] -= 1.0
        return (p * (g / B),)

    return Tensor.from_op(loss, (logits,), backward)


def flatten(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], -1)


__all__ = [
    "conv3d", "batch_norm", "layer_norm", "relu", "sigmoid", "silu", "activation",
    "global_max_pool", "linear", "softmax", "cross_entropy", "flatten", "as_tensor",
    "record_branches",
]
