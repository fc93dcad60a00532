"""Dense tensor primitives with reverse-mode differentiation on an explicit tape.

Everything is numpy-backed and runs sequentially; the same seed reproduces
results bit for bit. Precision is float32 or float64, chosen once per run and
kept uniform across all tensors of that run.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPES = {"float32": np.float32, "float64": np.float64}


class ShapeError(ValueError):
    """Input shapes are incompatible with the requested primitive."""


class Tensor:
    """A dense n-dimensional real array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # 0-d arrays are already contiguous
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


@dataclass
class TapeRecord:
    """One executed primitive: its kind, operand slots, and backward closure.

    ``backward_fn`` maps the gradient at the output to a tuple of gradients
    aligned with ``inputs`` (None where the input does not need one).
    """

    op: str
    inputs: tuple
    output: Tensor
    backward_fn: Callable[[np.ndarray], tuple]


class Tape:
    """Execution-ordered log of primitives; backward walks it strictly in reverse."""

    def __init__(self):
        self.records: list[TapeRecord] = []

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward_fn) -> None:
        self.records.append(TapeRecord(op, tuple(inputs), output, backward_fn))

    def __len__(self) -> int:
        return len(self.records)


def _check_same_dtype(*tensors: Tensor) -> None:
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ShapeError(f"mixed precisions in one primitive: {sorted(map(str, dtypes))}")


def _result(op, inputs, data, backward_fn, tape):
    out = Tensor(data)
    out.requires_grad = any(t.requires_grad for t in inputs)
    if tape is not None:
        tape.record(op, inputs, out, backward_fn)
    return out


def _corr2d(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    """Plain batched cross-correlation of [N,C,H,W] with [O,C,Kh,Kw]."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (w.shape[2], w.shape[3]), axis=(2, 3))[:, :, ::stride, ::stride]
    return np.einsum("nchwij,ocij->nohw", win, w, optimize=True)


def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None, *,
           stride: int = 1, padding: int = 0, tape: Optional[Tape] = None) -> Tensor:
    """Cross-correlation of a [N,Cin,H,W] batch with [Cout,Cin,Kh,Kw] filters.

    Output spatial size is floor((H + 2*padding - Kh)/stride) + 1 and likewise
    for width; no kernel flip is applied.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weights, got {x.data.ndim}-d and {w.data.ndim}-d")
    n, cin, h, wdt = x.data.shape
    cout, cw, kh, kw = w.data.shape
    if cin != cw:
        raise ShapeError(f"conv2d channel mismatch: input has {cin}, weights expect {cw}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be >= 0, got {padding}")
    if kh > h + 2 * padding or kw > wdt + 2 * padding:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{wdt + 2 * padding}")
    _check_same_dtype(x, w, *( [bias] if bias is not None else [] ))

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.einsum("nchwij,ocij->nohw", win, w.data, optimize=True)
    if bias is not None:
        if bias.data.shape != (cout,):
            raise ShapeError(f"bias must have shape ({cout},), got {bias.data.shape}")
        out = out + bias.data[None, :, None, None]

    inputs = (x, w) if bias is None else (x, w, bias)
    need_x, need_w = x.requires_grad, w.requires_grad

    def backward_fn(g):
        gx = gw = gb = None
        if need_w:
            gw = np.einsum("nchwij,nohw->ocij", win, g, optimize=True)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if need_x:
            # Gradient w.r.t. the input is a full correlation of the (dilated)
            # output gradient with the spatially flipped, channel-swapped kernel.
            ho, wo = g.shape[2], g.shape[3]
            rem_h = (h + 2 * padding - kh) % stride
            rem_w = (wdt + 2 * padding - kw) % stride
            if stride > 1:
                gd = np.zeros((n, cout, (ho - 1) * stride + 1, (wo - 1) * stride + 1), dtype=g.dtype)
                gd[:, :, ::stride, ::stride] = g
            else:
                gd = g
            gd = np.pad(gd, ((0, 0), (0, 0), (kh - 1, kh - 1 + rem_h), (kw - 1, kw - 1 + rem_w)))
            wt = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            gxp = _corr2d(gd, wt, stride=1, padding=0)
            gx = gxp[:, :, padding:padding + h, padding:padding + wdt]
        grads = (gx, gw) if bias is None else (gx, gw, gb)
        return grads

    return _result("conv2d", inputs, out, backward_fn, tape)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor,
              running_mean: np.ndarray, running_var: np.ndarray, *,
              eps: float = 1e-5, mode: str = "infer", momentum: float = 0.1,
              tape: Optional[Tape] = None) -> Tensor:
    """Per-channel batch normalization over a [N,C,H,W] batch.

    Infer mode normalizes with the running statistics; train mode normalizes
    with batch statistics (population variance) and folds them into the
    running buffers as new = (1 - momentum) * old + momentum * batch.
    eps must be positive in production runs; only the exact-arithmetic
    boundary eps = 0 is tolerated so long as every variance stays positive.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batchnorm expects 4-d input, got {x.data.ndim}-d")
    if eps < 0:
        raise ValueError(f"eps must be non-negative, got {eps}")
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    if np.any(running_var < 0):
        raise ValueError("running_var must be non-negative elementwise")
    c = x.data.shape[1]
    for name, t in (("gamma", gamma), ("beta", beta)):
        if t.data.shape != (c,):
            raise ShapeError(f"{name} must have shape ({c},), got {t.data.shape}")
    _check_same_dtype(x, gamma, beta)

    axes = (0, 2, 3)
    if mode == "train":
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean[:] = (1.0 - momentum) * running_mean + momentum * mean
        running_var[:] = (1.0 - momentum) * running_var + momentum * var
    else:
        mean = running_mean.astype(x.data.dtype, copy=False)
        var = running_var.astype(x.data.dtype, copy=False)
    denom = var + x.data.dtype.type(eps)
    if np.any(denom <= 0):
        raise ValueError("variance + eps must be positive for every channel")
    inv = 1.0 / np.sqrt(denom)
    xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
    need_x = x.requires_grad

    def backward_fn(g):
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gx = None
        if need_x:
            scale = (gamma.data * inv)[None, :, None, None]
            if mode == "train":
                gsum = g.sum(axis=axes, keepdims=True)
                gxhat_sum = (g * xhat).sum(axis=axes, keepdims=True)
                gx = scale * (g - gsum / m - xhat * (gxhat_sum / m))
            else:
                gx = scale * g
        return gx, ggamma, gbeta

    return _result("batchnorm", (x, gamma, beta), out, backward_fn, tape)


def relu(x: Tensor, *, tape: Optional[Tape] = None) -> Tensor:
    """Elementwise max(x, 0)."""
    mask = x.data > 0
    out = np.where(mask, x.data, x.data.dtype.type(0))

    def backward_fn(g):
        return (g * mask,) if x.requires_grad else (None,)

    return _result("relu", (x,), out, backward_fn, tape)


def maxpool2(x: Tensor, *, tape: Optional[Tape] = None) -> Tensor:
    """Non-overlapping 2x2 max pooling; requires even spatial dims.

    Ties within a window route the gradient to the first maximal element.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2 expects 4-d input, got {x.data.ndim}-d")
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    windows = x.data.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        if not x.requires_grad:
            return (None,)
        gwin = np.zeros_like(windows)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gx = gwin.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return _result("maxpool2", (x,), out, backward_fn, tape)


def global_avg_pool(x: Tensor, *, tape: Optional[Tape] = None) -> Tensor:
    """Mean over the spatial dims of a [N,C,H,W] batch, yielding [N,C]."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects 4-d input, got {x.data.ndim}-d")
    n, c, h, w = x.data.shape
    out = x.data.mean(axis=(2, 3))

    def backward_fn(g):
        if not x.requires_grad:
            return (None,)
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape),)

    return _result("global_avg_pool", (x,), out, backward_fn, tape)


def dense(x: Tensor, w: Tensor, bias: Tensor, *, tape: Optional[Tape] = None) -> Tensor:
    """Affine map y = x @ w.T + bias for x [N,F], w [K,F], bias [K]."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ShapeError(f"dense expects 2-d input and weights, got {x.data.ndim}-d and {w.data.ndim}-d")
    if x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(f"dense feature mismatch: input has {x.data.shape[1]}, weights expect {w.data.shape[1]}")
    if bias.data.shape != (w.data.shape[0],):
        raise ShapeError(f"bias must have shape ({w.data.shape[0]},), got {bias.data.shape}")
    _check_same_dtype(x, w, bias)
    out = x.data @ w.data.T + bias.data

    def backward_fn(g):
        gx = g @ w.data if x.requires_grad else None
        gw = g.T @ x.data if w.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _result("dense", (x, w, bias), out, backward_fn, tape)


def softmax_cross_entropy(logits: Tensor, labels, *, tape: Optional[Tape] = None) -> Tensor:
    """Mean negative log softmax probability of the true classes.

    Stabilized by max subtraction; labels are integer class indices in [0, K).
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects 2-d logits, got {logits.data.ndim}-d")
    y = np.asarray(labels)
    n, k = logits.data.shape
    if y.shape != (n,):
        raise ShapeError(f"labels must have shape ({n},), got {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{y.min()}, {y.max()}]")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    loss = -logp[np.arange(n), y].mean()
    probs = np.exp(logp)

    def backward_fn(g):
        if not logits.requires_grad:
            return (None,)
        gl = probs.copy()
        gl[np.arange(n), y] -= 1.0
        return (gl * (float(g) / n),)

    return _result("softmax_cross_entropy", (logits,), np.asarray(loss, dtype=logits.data.dtype), backward_fn, tape)


def backward(tape: Tape, loss: Tensor) -> None:
    """Propagate gradients from a scalar loss back through the tape.

    Every requires-grad tensor that appears on the tape ends up with a dense
    gradient; slots that do not contribute to the loss hold zeros.
    """
    if not tape.records:
        raise RuntimeError("backward called before any forward primitive was recorded")
    if tape.records[-1].output is not loss:
        raise RuntimeError("tape does not end in the given loss tensor")
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.data.shape}")

    loss.grad = np.ones_like(loss.data)
    for rec in reversed(tape.records):
        g = rec.output.grad
        if g is None:
            continue
        for t, gt in zip(rec.inputs, rec.backward_fn(g)):
            if gt is None or not t.requires_grad:
                continue
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += gt
    for rec in tape.records:
        for t in (*rec.inputs, rec.output):
            if t.requires_grad and t.grad is None:
                t.grad = np.zeros_like(t.data)


def zero_grads(tensors: Sequence[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray],
             learning_rate: float, momentum: float,
             velocity: Sequence[np.ndarray]):
    """One SGD update: v <- momentum * v + g; w <- w - learning_rate * v.

    Updates parameters and velocity buffers in place and returns both.
    """
    if learning_rate <= 0:
        raise ValueError(f"learning_rate must be positive, got {learning_rate}")
    if not (len(params) == len(grads) == len(velocity)):
        raise ShapeError("params, grads and velocity must have equal lengths")
    for p, g, v in zip(params, grads, velocity):
        g = np.asarray(g)
        if p.data.shape != g.shape or v.shape != g.shape:
            raise ShapeError(f"shape mismatch in sgd_step: {p.data.shape} vs {g.shape} vs {v.shape}")
        v *= momentum
        v += g
        p.data -= learning_rate * v
    return params, velocity
