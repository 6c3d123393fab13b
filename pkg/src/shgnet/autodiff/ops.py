"""Differentiable layer operations used by the residual networks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DataError, DimensionError
from .tensor import Tensor, _as_tensor

SeedLike = Union[int, np.random.Generator, None]


def _check_ndim(t: Tensor, ndim: int, what: str) -> None:
    if t.ndim != ndim:
        raise DimensionError(f"{what} expects a {ndim}-D tensor, got shape {t.shape}")


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding, computed via im2col.

    Args:
        x: Input of shape ``[N, C, H, W]``.
        weight: Kernels of shape ``[K, C, kh, kw]``.
        bias: Optional per-output-channel offsets of shape ``[K]``.
        stride: Step between neighbouring windows, at least 1.
        padding: Zero rows/columns added on each side.

    Returns:
        Tensor of shape ``[N, K, H', W']`` where
        ``H' = (H + 2*padding - kh) // stride + 1``.
    """
    _check_ndim(x, 4, "conv2d input")
    _check_ndim(weight, 4, "conv2d weight")
    n, c, h, w = x.shape
    k, wc, kh, kw = weight.shape
    if wc != c:
        raise DimensionError(f"conv2d channel axis mismatch: input C={c}, weight C={wc}")
    if stride < 1:
        raise DimensionError(f"conv2d stride must be >= 1, got {stride}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(
            f"conv2d kernel ({kh},{kw}) exceeds padded spatial axes ({hp},{wp})")
    if bias is not None and bias.shape != (k,):
        raise DimensionError(f"conv2d bias must have shape ({k},), got {bias.shape}")

    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(xd, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = windows.shape[2], windows.shape[3]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    w2 = weight.data.reshape(k, c * kh * kw)
    out = cols @ w2.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, k).transpose(0, 3, 1, 2))

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, k)
        gx = gw = gb = None
        if x.requires_grad:
            dcols = (g2 @ w2).reshape(n, ho, wo, c, kh, kw)
            dxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(k, c, kh, kw)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward, "conv2d")


@dataclass
class RunningStats:
    """Per-channel running mean/variance for batch normalization."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32, momentum: float = 0.1) -> "RunningStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), momentum)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running: RunningStats,
                mode: str = "train", eps: float = 1e-5) -> Tensor:
    """Batch normalization over the ``N, H, W`` axes of ``[N, C, H, W]``.

    In ``train`` mode the batch statistics normalize the input and the
    running statistics are updated in place (unbiased variance, as in the
    usual ResNet implementations). ``eval`` uses the running statistics only.
    """
    _check_ndim(x, 4, "batchnorm2d input")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batchnorm2d affine parameters must have shape ({c},)")
    g4 = gamma.data.reshape(1, c, 1, 1)
    b4 = beta.data.reshape(1, c, 1, 1)

    if mode == "eval":
        invstd = 1.0 / np.sqrt(running.var.astype(x.dtype) + eps)
        xhat = (x.data - running.mean.astype(x.dtype).reshape(1, c, 1, 1)) * invstd.reshape(1, c, 1, 1)

        def backward_eval(g):
            gx = g * (g4 * invstd.reshape(1, c, 1, 1)) if x.requires_grad else None
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return Tensor._from_op(xhat * g4 + b4, (x, gamma, beta), backward_eval, "batchnorm2d")

    if mode != "train":
        raise DataError(f"batchnorm2d mode must be 'train' or 'eval', got {mode!r}")
    if n < 2:
        raise DimensionError("batchnorm2d in train mode needs a batch of at least 2")
    m = n * h * w
    mean = x.data.mean(axis=(0, 2, 3))
    centered = x.data - mean.reshape(1, c, 1, 1)
    var = (centered * centered).mean(axis=(0, 2, 3))
    invstd = (1.0 / np.sqrt(var + eps)).reshape(1, c, 1, 1)
    xhat = centered * invstd

    mom = running.momentum
    running.mean[...] = (1 - mom) * running.mean + mom * mean
    running.var[...] = (1 - mom) * running.var + mom * var * (m / (m - 1))

    def backward(g):
        gx = None
        if x.requires_grad:
            dxhat = g * g4
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gx = (invstd / m) * (m * dxhat - s1 - xhat * s2)
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return Tensor._from_op(xhat * g4 + b4, (x, gamma, beta), backward, "batchnorm2d")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(np.where(mask, x.data, 0).astype(x.dtype), (x,),
                           lambda g: (g * mask,), "relu")


def maxpool2d(x: Tensor, k: int, stride: Optional[int] = None, padding: int = 0) -> Tensor:
    """Max pooling over ``k x k`` windows; padded cells never win."""
    _check_ndim(x, 4, "maxpool2d input")
    stride = stride or k
    n, c, h, w = x.shape
    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                    constant_values=-np.inf)
    hp, wp = xd.shape[2], xd.shape[3]
    if k > hp or k > wp:
        raise DimensionError(f"maxpool2d window {k} exceeds padded input ({hp},{wp})")
    windows = sliding_window_view(xd, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = windows.shape[2], windows.shape[3]
    flat = windows.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
        for idx in range(k * k):
            i, j = divmod(idx, k)
            gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g * (arg == idx)
        return (gxp[:, :, padding:padding + h, padding:padding + w],)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), backward, "maxpool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """Average over the spatial axes: ``[N, C, H, W] -> [N, C]``."""
    _check_ndim(x, 4, "global_avg_pool input")
    n, c, h, w = x.shape
    scale = 1.0 / (h * w)

    def backward(g):
        return (np.broadcast_to((g * scale)[:, :, None, None], (n, c, h, w)).astype(g.dtype),)

    return Tensor._from_op(x.data.mean(axis=(2, 3)), (x,), backward, "global_avg_pool")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ W + b`` with ``W`` of shape ``[D, M]``."""
    _check_ndim(x, 2, "linear input")
    if weight.ndim != 2 or weight.shape[0] != x.shape[1]:
        raise DimensionError(f"linear expects W of shape ({x.shape[1]}, M), got {weight.shape}")
    out = x @ weight
    return out if bias is None else out + bias


def _rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def dropout(x: Tensor, p: float, mode: str = "train", seed: SeedLike = None) -> Tensor:
    """Inverted dropout: zero each element with probability ``p``, rescale the rest.

    ``eval`` mode and ``p == 0`` return the input unchanged.
    """
    if not 0.0 <= p < 1.0:
        raise DataError(f"dropout probability must lie in [0, 1), got {p}")
    if mode == "eval" or p == 0.0:
        return x
    keep = (_rng(seed).random(x.shape) >= p).astype(x.dtype) * x.dtype.type(1.0 / (1.0 - p))
    return Tensor._from_op(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a plain array (numerically stabilized)."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def weighted_smoothed_ce(logits: Tensor, targets, class_weights=None,
                         epsilon: float = 0.0, reduction: str = "mean") -> Tensor:
    """Class-weighted cross-entropy against label-smoothed target distributions.

    Each row of ``targets`` is a probability distribution ``q`` over the K
    classes (one-hot or mixup-blended). The smoothed target is
    ``(1 - epsilon) * q + epsilon / K`` and the sample weight is
    ``sum_k class_weights[k] * q[k]``, computed from the unsmoothed ``q``.

    Args:
        logits: ``[N, K]`` pre-softmax scores.
        targets: ``[N, K]`` array of label distributions.
        class_weights: ``[K]`` positive weights; defaults to all ones.
        epsilon: Smoothing strength in ``[0, 1)``.
        reduction: ``"mean"`` divides the weighted sum by N, ``"sum"`` does not.

    Raises:
        DataError: if a target row does not sum to 1 within 1e-6, weights are
            not positive, or ``epsilon`` is out of range.
    """
    _check_ndim(logits, 2, "weighted_smoothed_ce logits")
    n, k = logits.shape
    q = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    if q.shape != (n, k):
        raise DimensionError(f"targets must have shape {(n, k)}, got {q.shape}")
    bad = np.flatnonzero(np.abs(q.sum(axis=1) - 1.0) > 1e-6)
    if bad.size:
        raise DataError(f"target rows {bad.tolist()} do not sum to 1")
    if not 0.0 <= epsilon < 1.0:
        raise DataError(f"label smoothing must lie in [0, 1), got {epsilon}")
    weights = np.ones(k) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    if weights.shape != (k,) or np.any(weights <= 0):
        raise DataError("class weights must be K positive values")
    if reduction not in ("mean", "sum"):
        raise DataError(f"unknown reduction {reduction!r}")

    z = logits.data.astype(np.float64)
    smoothed = (1.0 - epsilon) * q + epsilon / k
    sample_w = q @ weights
    logp = log_softmax(z)
    per_sample = -(smoothed * logp).sum(axis=1)
    scale = 1.0 / n if reduction == "mean" else 1.0
    loss = np.asarray(scale * np.dot(sample_w, per_sample), dtype=logits.dtype)
    grad_dir = (sample_w * scale)[:, None] * (np.exp(logp) - smoothed)

    def backward(g):
        return ((g * grad_dir).astype(logits.dtype),)

    return Tensor._from_op(loss, (logits,), backward, "weighted_smoothed_ce")


def one_hot(labels, k: int, dtype=np.float64) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, k), dtype=dtype)
    out[np.arange(labels.size), labels] = 1.0
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    return _as_tensor(a, b.dtype) + b
