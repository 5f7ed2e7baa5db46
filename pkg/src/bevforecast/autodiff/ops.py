"""Differentiable operators over NCHW tensors."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..gridcore import bilinear_matrix
from .tensor import Tensor, as_tensor, make_node


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _coerce(a, b):
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


# -- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.shape))

    return make_node(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g, b.shape))

    return make_node(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.shape))

    return make_node(a.data * b.data, (a, b), backward)


def _sigmoid(x):
    # split by sign so large |x| never overflows exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return make_node(y, (x,), lambda g: x.accumulate(g * y * (1.0 - y)))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return make_node(y, (x,), lambda g: x.accumulate(g * (1.0 - y * y)))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_node(x.data * mask, (x,), lambda g: x.accumulate(g * mask))


def total(x: Tensor) -> Tensor:
    return make_node(np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: x.accumulate(np.broadcast_to(g, x.shape)))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return make_node(
        np.asarray(x.data.mean(), dtype=x.dtype),
        (x,),
        lambda g: x.accumulate(np.broadcast_to(g / n, x.shape)),
    )


# -- structural -------------------------------------------------------------


def concat(tensors, axis=1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t.accumulate(g[tuple(sl)])

    return make_node(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def take_channels(x: Tensor, lo: int, hi: int) -> Tensor:
    """Channel slice ``x[:, lo:hi]``."""

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, lo:hi] = g
        x.accumulate(full)

    return make_node(x.data[:, lo:hi], (x,), backward)


def chunk(x: Tensor, n: int):
    c = x.shape[1]
    if c % n:
        raise ValueError(f"cannot split {c} channels into {n} equal chunks")
    k = c // n
    return [take_channels(x, i * k, (i + 1) * k) for i in range(n)]


# -- convolution ------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int | None = None) -> Tensor:
    """Cross-correlation of NCHW ``x`` with ``(F, C, kh, kw)`` weights.

    ``pad=None`` gives same-padding for odd kernels at stride 1.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    N, C, H, W = x.shape
    F, Cw, kh, kw = weight.shape
    if C != Cw:
        raise ValueError(f"conv2d channel mismatch: input has C={C}, weight expects C={Cw}")
    if bias is not None and bias.shape != (F,):
        raise ValueError(f"conv2d bias shape {bias.shape}, expected ({F},)")
    if pad is None:
        pad = kh // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    Hp, Wp = xp.shape[2:]
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    if Ho <= 0 or Wo <= 0:
        raise ValueError(f"conv2d kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (N, C*kh*kw, Ho*Wo): the copy runs along contiguous image rows
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(N, C * kh * kw, Ho * Wo)
    wmat = weight.data.reshape(F, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(N, F, Ho, Wo)

    def backward(g):
        g3 = g.reshape(N, F, Ho * Wo)
        if weight.requires_grad:
            weight.accumulate(np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias.accumulate(g3.sum(axis=(0, 2)))
        if x.requires_grad:
            dcols = np.matmul(wmat.T, g3).reshape(N, C, kh, kw, Ho, Wo)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += dcols[:, :, i, j]
            x.accumulate(dxp[:, :, pad : pad + H, pad : pad + W] if pad else dxp)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, backward)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 stride-2 max pooling; ties route the gradient to the first element."""
    N, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got {H}x{W}")
    win = x.data.reshape(N, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, H // 2, W // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        d = np.zeros((N, C, H // 2, W // 2, 4), dtype=g.dtype)
        np.put_along_axis(d, idx[..., None], g[..., None], axis=-1)
        x.accumulate(d.reshape(N, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, H, W))

    return make_node(out, (x,), backward)


def bilinear_up2(x: Tensor) -> Tensor:
    """Aligned-corners bilinear x2 upsampling over the last two axes."""
    H, W = x.shape[-2:]
    Rh = bilinear_matrix(H, x.dtype)
    Rw = bilinear_matrix(W, x.dtype)
    out = Rh @ x.data @ Rw.T
    return make_node(out, (x,), lambda g: x.accumulate(Rh.T @ g @ Rw))


# -- losses -----------------------------------------------------------------


def mse_loss(pred: Tensor, gt, reduction: str = "elements") -> Tensor:
    """Squared error norm.

    ``reduction="elements"`` divides by the element count (plain MSE);
    ``"sample"`` divides by the leading (batch) axis only, i.e. the mean over
    samples of each sample's squared norm.
    """
    gt = gt.data if isinstance(gt, Tensor) else np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"mse_loss shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    diff = pred.data - gt
    if reduction == "elements":
        n = diff.size
    elif reduction == "sample":
        n = diff.shape[0] if diff.ndim else 1
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    val = np.asarray((diff * diff).sum() / n, dtype=pred.dtype)
    return make_node(val, (pred,), lambda g: pred.accumulate(g * 2.0 * diff / n))


def safety_loss(pred: Tensor, obstacle_mask, per_sample: bool = False) -> Tensor:
    """L2 norm of the predicted mass lying on obstacle cells.

    The mask is a constant; at zero overlap the gradient is taken as zero.
    With ``per_sample`` the norm is taken over each leading-axis slice and
    the result is the mean of those norms.
    """
    mask = obstacle_mask.data if isinstance(obstacle_mask, Tensor) else np.asarray(obstacle_mask)
    if pred.shape != mask.shape:
        raise ValueError(f"safety_loss shape mismatch: pred {pred.shape} vs mask {mask.shape}")
    if (mask < 0).any():
        raise ValueError("obstacle mask must be non-negative")
    prod = mask * pred.data
    if per_sample:
        n = pred.shape[0]
        norms = np.sqrt((prod * prod).reshape(n, -1).sum(axis=1))
        value = float(norms.mean())

        def backward(g):
            safe = np.where(norms > 0, norms, 1.0).reshape((n,) + (1,) * (pred.data.ndim - 1))
            live = (norms > 0).reshape(safe.shape)
            pred.accumulate(g * live * mask * prod / (safe * n))

        return make_node(np.asarray(value, dtype=pred.dtype), (pred,), backward)
    norm = float(np.sqrt((prod * prod).sum()))

    def backward(g):
        if norm > 0.0:
            pred.accumulate(g * mask * prod / norm)

    return make_node(np.asarray(norm, dtype=pred.dtype), (pred,), backward)


# -- recurrent cell ---------------------------------------------------------


def conv_lstm_step(x: Tensor, state, weight: Tensor, bias: Tensor):
    """One ConvLSTM step.

    ``state`` is ``(h, c)``; ``weight`` has shape ``(4F, Cx + F, k, k)`` with
    gate blocks ordered input, forget, output, candidate. Returns
    ``(h_new, (h_new, c_new))``.
    """
    h, c = state
    if h.shape != c.shape:
        raise ValueError(f"hidden {h.shape} and cell {c.shape} shapes differ")
    if x.shape[0] != h.shape[0] or x.shape[2:] != h.shape[2:]:
        raise ValueError(f"input {x.shape} and state {h.shape} disagree on batch or spatial dims")
    z = conv2d(concat([x, h], axis=1), weight, bias)
    zi, zf, zo, zg = chunk(z, 4)
    i, f, o = sigmoid(zi), sigmoid(zf), sigmoid(zo)
    g = tanh(zg)
    c_new = f * c + i * g
    h_new = o * tanh(c_new)
    return h_new, (h_new, c_new)
