"""Differentiable operators.

Each op computes its forward result with numpy and registers a closure that
maps the output gradient back to its inputs.  Shapes follow the NCHW layout
for images and (batch, tokens, channels) for sequences.
"""

from __future__ import annotations

import builtins
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DTYPE, Tensor, as_tensor, make_result

LOG_EPS = 1e-12


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def square(a: Tensor) -> Tensor:
    return make_result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor, eps: float = 0.0) -> Tensor:
    """Natural log; with ``eps > 0`` the input is clamped from below first."""
    x = np.maximum(a.data, eps) if eps > 0 else a.data
    live = a.data >= eps if eps > 0 else None

    def bw(g):
        gx = g / x
        return (gx * live if live is not None else gx,)

    return make_result(np.log(x), (a,), bw, "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make_result(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return make_result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_result(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return make_result(np.asarray(out), (a,), bw, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return make_result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def bw(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        if _fancy(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return make_result(np.array(out, dtype=DTYPE), (a,), bw, "getitem")


def _fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return builtins.any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    axis = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or builtins.any(
            t.shape[d] != ref[d] for d in range(len(ref)) if d != axis
        ):
            raise ValueError(f"concat: shape {t.shape} incompatible with {ref} along axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def roll(a: Tensor, shift: Sequence[int], axes: Sequence[int]) -> Tensor:
    shift, axes = tuple(shift), tuple(axes)
    back = tuple(-s for s in shift)
    return make_result(np.roll(a.data, shift, axes), (a,), lambda g: (np.roll(g, back, axes),), "roll")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimension mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data @ b.data, (a, b), bw, "matmul")


# ---------------------------------------------------------------------------
# normalisation and probability
# ---------------------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (a,), bw, "softmax")


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the affine ``weight``/``bias``."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * weight.data + bias.data
    n = x.shape[-1]

    def bw(g):
        gw = (g * xhat).reshape(-1, n).sum(axis=0) if weight.requires_grad else None
        gb = g.reshape(-1, n).sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * weight.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gw, gb

    return make_result(out, (x, weight, bias), bw, "layer_norm")


def batch_norm(
    x: Tensor,
    weight: Tensor,
    bias: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalisation of an NCHW tensor.

    In training mode the batch statistics are used and the running buffers are
    updated in place; in inference mode the running buffers are used.
    """
    if x.ndim != 4:
        raise ValueError(f"batch_norm expects NCHW input, got shape {x.shape}")
    C = x.shape[1]
    axes = (0, 2, 3)
    wb = weight.data.reshape(1, C, 1, 1)
    if training:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        mu = x.data.mean(axis=axes, keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(C)
        unbiased = var.reshape(C) * (m / builtins.max(m - 1, 1))
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        inv = 1.0 / np.sqrt(running_var.reshape(1, C, 1, 1) + eps)
        xhat = (x.data - running_mean.reshape(1, C, 1, 1)) * inv
    out = xhat * wb + bias.data.reshape(1, C, 1, 1)

    def bw(g):
        gw = (g * xhat).sum(axis=axes) if weight.requires_grad else None
        gb = g.sum(axis=axes) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * wb
            if training:
                gx = inv * (gh - gh.mean(axis=axes, keepdims=True) - xhat * (gh * xhat).mean(axis=axes, keepdims=True))
            else:
                gx = gh * inv
        return gx, gw, gb

    return make_result(out, (x, weight, bias), bw, "batch_norm")


def cross_entropy(probs: Tensor, target: np.ndarray, ignore_index: Optional[int] = None) -> Tensor:
    """Mean of ``-log p[target]`` over pixels, for class probabilities on axis 1.

    ``probs`` has shape (B, C, ...) and ``target`` integer shape (B, ...).
    Pixels equal to ``ignore_index`` are excluded from both sum and count.
    """
    target = np.asarray(target)
    C = probs.shape[1]
    if target.shape != probs.shape[:1] + probs.shape[2:]:
        raise ValueError(f"cross_entropy: target shape {target.shape} does not match probs {probs.shape}")
    valid = np.ones(target.shape, dtype=bool) if ignore_index is None else target != ignore_index
    t = np.where(valid, target, 0)
    if t.size and (t.min() < 0 or t.max() >= C):
        raise ValueError(f"cross_entropy: class index outside [0, {C})")
    count = int(valid.sum())
    if count == 0:
        raise ValueError("cross_entropy: every pixel is ignored")
    picked = np.take_along_axis(probs.data, t[:, None], axis=1)[:, 0]
    clamped = np.maximum(picked, LOG_EPS)
    loss = -(np.log(clamped) * valid).sum() / count

    def bw(g):
        full = np.zeros_like(probs.data)
        local = -(g / count) * valid * (picked >= LOG_EPS) / clamped
        np.put_along_axis(full, t[:, None], local[:, None], axis=1)
        return (full,)

    return make_result(np.asarray(loss), (probs,), bw, "cross_entropy")


def kl_divergence(p: Tensor, q: Tensor, eps: float = LOG_EPS) -> Tensor:
    """``sum p * (log p - log q)`` over every element, logs clamped at ``eps``."""
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise ValueError(f"kl_divergence: shape mismatch {p.shape} vs {q.shape}")
    pc = np.maximum(p.data, eps)
    qc = np.maximum(q.data, eps)
    val = (p.data * (np.log(pc) - np.log(qc))).sum()

    def bw(g):
        gp = g * (np.log(pc) - np.log(qc) + (p.data >= eps)) if p.requires_grad else None
        gq = -g * p.data / qc * (q.data >= eps) if q.requires_grad else None
        return gp, gq

    return make_result(np.asarray(val), (p, q), bw, "kl_divergence")


def argmax(a, axis: int = 1) -> np.ndarray:
    """Hard class indices; ties resolve to the lowest index.  Not differentiable."""
    data = a.data if isinstance(a, Tensor) else np.asarray(a)
    return np.argmax(data, axis=axis)


def one_hot(labels: np.ndarray, num_classes: int, axis: int = 1) -> Tensor:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"one_hot: label outside [0, {num_classes})")
    eye = np.eye(num_classes, dtype=DTYPE)[labels]
    return Tensor(np.moveaxis(eye, -1, axis))


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW ``x`` with OIkk ``weight``."""
    if x.ndim != 4:
        raise ValueError(f"conv2d: input must be (B, C_in, H, W), got {x.shape}")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ValueError(f"conv2d: weight must be (C_out, C_in, k, k), got {weight.shape}")
    B, C, H, W = x.shape
    O, Ci, k, _ = weight.shape
    if Ci != C:
        raise ValueError(f"conv2d: input channels C_in={C} but weight expects C_in={Ci}")
    if bias is not None and bias.shape != (O,):
        raise ValueError(f"conv2d: bias must have shape (C_out,)=({O},), got {bias.shape}")
    s, p = int(stride), int(padding)
    Ho = (H + 2 * p - k) // s + 1
    Wo = (W + 2 * p - k) // s + 1
    if Ho < 1 or Wo < 1:
        raise ValueError(f"conv2d: output extent H'={Ho}, W'={Wo} from H={H}, W={W}, k={k}, stride={s}, padding={p}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    if k == 1:
        cols = xp[:, :, ::s, ::s][:, :, :Ho, :Wo]
        out = np.einsum("bchw,oc->bohw", cols, weight.data[:, :, 0, 0], optimize=True)
    else:
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :Ho, :Wo]
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * k * k)
        out = (cols @ weight.data.reshape(O, -1).T).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, O, 1, 1)
    out = np.ascontiguousarray(out)

    def bw(g):
        gx = gw = gb = None
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if k == 1:
            if weight.requires_grad:
                gw = np.einsum("bohw,bchw->oc", g, cols, optimize=True)[:, :, None, None]
            if x.requires_grad:
                gcols = np.einsum("bohw,oc->bchw", g, weight.data[:, :, 0, 0], optimize=True)
                gxp = np.zeros_like(xp)
                gxp[:, :, : s * Ho : s, : s * Wo : s] = gcols
                gx = gxp[:, :, p : p + H, p : p + W] if p else gxp
        else:
            g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
            if weight.requires_grad:
                gw = (g2.T @ cols).reshape(O, C, k, k)
            if x.requires_grad:
                gcols = (g2 @ weight.data.reshape(O, -1)).reshape(B, Ho, Wo, C, k, k)
                gxp = np.zeros_like(xp)
                for i in range(k):
                    for j in range(k):
                        gxp[:, :, i : i + s * Ho : s, j : j + s * Wo : s] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                gx = gxp[:, :, p : p + H, p : p + W] if p else gxp
        if gx is not None:
            gx = np.ascontiguousarray(gx)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_result(out, parents, bw, "conv2d")


def max_pool2d(x: Tensor, kernel: int) -> Tensor:
    """Non-overlapping ``kernel x kernel`` max pooling; ties route the gradient to the first maximum."""
    B, C, H, W = x.shape
    k = int(kernel)
    if H % k or W % k:
        raise ValueError(f"max_pool2d: extents ({H}, {W}) not divisible by kernel {k}")
    Ho, Wo = H // k, W // k
    blocks = x.data.reshape(B, C, Ho, k, Wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, k * k)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        return (gb.reshape(B, C, Ho, Wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W),)

    return make_result(out, (x,), bw, "max_pool2d")


def separable_map(x: Tensor, row_map: np.ndarray, col_map: np.ndarray) -> Tensor:
    """Apply ``row_map @ X @ col_map.T`` to the last two axes of ``x``.

    Bilinear resizing and adaptive average pooling are both of this form.
    """
    if x.shape[-2] != row_map.shape[1] or x.shape[-1] != col_map.shape[1]:
        raise ValueError(f"separable_map: maps {row_map.shape}, {col_map.shape} do not fit input {x.shape}")
    out = row_map @ x.data @ col_map.T

    def bw(g):
        return (row_map.T @ g @ col_map,)

    return make_result(out, (x,), bw, "separable_map")


@lru_cache(maxsize=None)
def bilinear_weights(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) interpolation matrix with half-pixel centres, no corner alignment."""
    if n_in < 1 or n_out < 1:
        raise ValueError(f"bilinear_weights: extents must be positive, got {n_in} -> {n_out}")
    M = np.zeros((n_out, n_in), dtype=DTYPE)
    scale = n_in / n_out
    for i in range(n_out):
        src = builtins.max((i + 0.5) * scale - 0.5, 0.0)
        i0 = builtins.min(int(np.floor(src)), n_in - 1)
        i1 = builtins.min(i0 + 1, n_in - 1)
        lam = src - i0
        M[i, i0] += 1.0 - lam
        M[i, i1] += lam
    M.setflags(write=False)
    return M


@lru_cache(maxsize=None)
def adaptive_pool_weights(n_in: int, bins: int) -> np.ndarray:
    """(bins, n_in) averaging matrix; bin i covers [floor(i*n/b), ceil((i+1)*n/b))."""
    M = np.zeros((bins, n_in), dtype=DTYPE)
    for i in range(bins):
        lo = (i * n_in) // bins
        hi = -((-(i + 1) * n_in) // bins)
        M[i, lo:hi] = 1.0 / (hi - lo)
    M.setflags(write=False)
    return M


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize the last two axes to (out_h, out_w); see `bilinear_weights`."""
    H, W = x.shape[-2:]
    if out_h < 1 or out_w < 1:
        raise ValueError(f"bilinear_upsample: target extent must be positive, got ({out_h}, {out_w})")
    if out_h < H or out_w < W:
        raise ValueError(f"bilinear_upsample: target ({out_h}, {out_w}) smaller than input ({H}, {W})")
    if (out_h, out_w) == (H, W):
        return x
    return separable_map(x, bilinear_weights(H, out_h), bilinear_weights(W, out_w))


def adaptive_avg_pool2d(x: Tensor, bins: int) -> Tensor:
    H, W = x.shape[-2:]
    bins_h, bins_w = builtins.min(bins, H), builtins.min(bins, W)
    return separable_map(x, adaptive_pool_weights(H, bins_h), adaptive_pool_weights(W, bins_w))


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def mhsa(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor, heads: int):
    """Multi-head self-attention over tokens ``x`` of shape (N, C) or (B, N, C).

    Returns ``(out, attn)`` where ``attn`` is softmax(QK^T / sqrt(d)) averaged
    over heads, shape (N, N) or (B, N, N).
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    B, N, C = x.shape
    if N < 1:
        raise ValueError("mhsa: need at least one token")
    width = wq.shape[1]
    if wq.shape[0] != C or wk.shape != wq.shape or wv.shape != wq.shape:
        raise ValueError(f"mhsa: projection shapes {wq.shape}, {wk.shape}, {wv.shape} do not fit C={C}")
    if wo.shape != (width, C):
        raise ValueError(f"mhsa: output projection must be ({width}, {C}), got {wo.shape}")
    if heads < 1 or width % heads:
        raise ValueError(f"mhsa: {heads} heads do not divide projection width {width}")
    d = width // heads

    def split(t):
        return transpose(reshape(t, (B, N, heads, d)), (0, 2, 1, 3))

    q, k, v = split(matmul(x, wq)), split(matmul(x, wk)), split(matmul(x, wv))
    logits = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(d))
    attn = softmax(logits, axis=-1)
    ctx = reshape(transpose(matmul(attn, v), (0, 2, 1, 3)), (B, N, width))
    out = matmul(ctx, wo)
    amap = mean(attn, axis=1)
    if squeeze:
        out = reshape(out, (N, C))
        amap = reshape(amap, (N, N))
    return out, amap


# nn-style aliases kept short for model code
cat = concat
