from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autograd import ShapeError, Tensor, as_tensor, record


def _require_ndim(x: Tensor, ndim: int, op: str, what: str = "input") -> None:
    if x.ndim != ndim:
        raise ShapeError(f"{op}: {what} must be {ndim}-D, got dims {x.dims}")


def conv2d(x: Tensor, weights: Tensor, bias: Optional[Tensor] = None, stride: int = 1) -> Tensor:
    """Zero 'same' padding convolution, NCHW input and OIkk weights."""
    _require_ndim(x, 4, "conv2d")
    _require_ndim(weights, 4, "conv2d", "weights")
    n, c, h, w = x.shape
    o, ci, kh, kw = weights.shape
    if ci != c:
        raise ShapeError(f"conv2d: input dims {x.dims} have {c} channels, weights dims {weights.dims} expect {ci}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: weight spatial extents must be odd, got dims {weights.dims}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias dims {bias.dims} do not match {o} output channels")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")

    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = windows.shape[2], windows.shape[3]
    out = np.tensordot(windows, weights.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    parents = (x, weights) if bias is None else (x, weights, bias)

    def backward(g: np.ndarray):
        gx = gw = gb = None
        if weights.requires_grad:
            gw = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    contrib = np.tensordot(weights.data[:, :, i, j], g, axes=([0], [1]))  # (c, n, ho, wo)
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += contrib.transpose(1, 0, 2, 3)
            gx = gxp[:, :, ph:ph + h, pw:pw + w]
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return record(np.ascontiguousarray(out), parents, backward)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; odd trailing rows/columns are dropped."""
    _require_ndim(x, 4, "maxpool2")
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    if ho < 1 or wo < 1:
        raise ShapeError(f"maxpool2: input dims {x.dims} are too small to pool")
    blocks = (
        x.data[:, :, : 2 * ho, : 2 * wo]
        .reshape(n, c, ho, 2, wo, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, ho, wo, 4)
    )
    idx = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def backward(g: np.ndarray):
        gblocks = np.zeros((n, c, ho, wo, 4))
        np.put_along_axis(gblocks, idx, g[..., None], axis=-1)
        gx = np.zeros_like(x.data)
        gx[:, :, : 2 * ho, : 2 * wo] = (
            gblocks.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
        )
        return (gx,)

    return record(out, (x,), backward)


def relu(x: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    mask = x.data > 0

    def backward(g: np.ndarray):
        return (g * mask,)

    return record(np.where(mask, x.data, 0.0), (x,), backward)


def fully_connected(x: Tensor, weights: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x: (N, D), weights: (D, O), bias: (O,)."""
    _require_ndim(x, 2, "fully_connected")
    _require_ndim(weights, 2, "fully_connected", "weights")
    if x.shape[1] != weights.shape[0]:
        raise ShapeError(f"fully_connected: input dims {x.dims} do not match weight dims {weights.dims}")
    if bias is not None and bias.shape != (weights.shape[1],):
        raise ShapeError(f"fully_connected: bias dims {bias.dims} do not match weight dims {weights.dims}")
    out = x.data @ weights.data
    if bias is not None:
        out = out + bias.data
    parents = (x, weights) if bias is None else (x, weights, bias)

    def backward(g: np.ndarray):
        gx = g @ weights.data.T
        gw = x.data.T @ g
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return record(out, parents, backward)


def global_avg_pool(x: Tensor) -> Tensor:
    _require_ndim(x, 4, "global_avg_pool")
    n, c, h, w = x.shape

    def backward(g: np.ndarray):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return record(x.data.mean(axis=(2, 3)), (x,), backward)


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    if x.ndim not in (1, 2):
        raise ShapeError(f"softmax: expects 1-D or 2-D input, got dims {x.dims}")
    p = _softmax(x.data)

    def backward(g: np.ndarray):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return record(p, (x,), backward)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray, weights: Optional[np.ndarray] = None) -> Tensor:
    """Weighted mean cross entropy of row-wise softmax against integer labels."""
    _require_ndim(logits, 2, "softmax_cross_entropy", "logits")
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: labels dims {list(labels.shape)} do not match logits dims {logits.dims}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ShapeError(f"softmax_cross_entropy: labels outside [0, {k})")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    total = float(w.sum())
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    rows = np.arange(n)
    loss = -(w * log_p[rows, labels]).sum() / total

    def backward(g: np.ndarray):
        p = np.exp(log_p)
        p[rows, labels] -= 1.0
        return (float(g) * p * (w / total)[:, None],)

    return record(np.asarray(loss), (logits,), backward)


def crop(x: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    """Spatial crop of an NCHW tensor."""
    _require_ndim(x, 4, "crop")
    if top < 0 or left < 0 or top + height > x.shape[2] or left + width > x.shape[3]:
        raise ShapeError(f"crop: window ({top}, {left}, {height}, {width}) outside dims {x.dims}")
    return x[:, :, top:top + height, left:left + width]


__all__ = [
    "conv2d",
    "maxpool2",
    "relu",
    "fully_connected",
    "global_avg_pool",
    "softmax",
    "softmax_cross_entropy",
    "crop",
    "as_tensor",
]
