"""Small reverse-mode autodiff over numpy arrays.

Operations run eagerly and, while a ``Tape`` is active, append a backward
closure to it. ``Tape.backward`` replays the closures in reverse order and
accumulates gradients additively into every tensor that requires them.

Only the layers the residual CNN needs are provided: conv2d, batchnorm2d,
relu, 2x2 max-pooling, global average pooling, dense, dropout, sigmoid and
elementwise add, plus a few reductions used by losses and tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)


class Tape:
    """Records operations for one forward pass.

    Use as a context manager; nesting is allowed and the innermost tape wins.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for out, inputs, fn in reversed(self.records):
            if out.grad is None:
                continue
            grads = fn(out.grad)
            for inp, g in zip(inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = np.array(g, dtype=inp.dtype, copy=True)
                else:
                    inp.grad += g


_ACTIVE: list[Tape] = []


def backward(loss: Tensor, tape: Tape) -> None:
    tape.backward(loss)


def apply(value: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``value`` as the output of an op and record it on the active tape.

    ``backward_fn(grad_out)`` must return one gradient (or None) per input.
    """
    out = Tensor(value)
    if _ACTIVE and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE[-1].records.append((out, tuple(inputs), backward_fn))
    return out


# --------------------------------------------------------------------------
# Elementwise and reductions
# --------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return apply(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    x, y = a.data, b.data
    return apply(x * y, (a, b), lambda g: (g * y, g * x))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = a.shape
    return apply(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def sum_all(a: Tensor) -> Tensor:
    return apply(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape),))


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    return apply(np.asarray(a.data.mean()), (a,), lambda g: (np.broadcast_to(g / n, a.shape),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return apply(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return apply(s, (a,), lambda g: (g * s * (1.0 - s),))


def dropout(a: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0:
        return apply(a.data, (a,), lambda g: (g,))
    if rng is None:
        raise ValueError("training-mode dropout needs a seeded generator")
    scale = np.asarray(1.0 / (1.0 - rate), dtype=a.dtype)
    mask = (rng.random(a.shape) >= rate).astype(a.dtype) * scale
    return apply(a.data * mask, (a,), lambda g: (g * mask,))


# --------------------------------------------------------------------------
# Dense and pooling
# --------------------------------------------------------------------------


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"dense: bias {bias.shape} does not match weight {weight.shape}")
    xv, wv = x.data, weight.data
    out = xv @ wv
    if bias is not None:
        out = out + bias.data

    def back(g):
        grads = [g @ wv.T, xv.T @ g]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return apply(out, inputs, back)


def maxpool2d(x: Tensor, size: int = 2, stride: int = 2) -> Tensor:
    """2x2/stride-2 max-pooling; ties route the gradient to the first element."""
    if size != 2 or stride != 2:
        raise ValueError("only 2x2 pooling with stride 2 is supported")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d: odd spatial size {h}x{w}")
    windows = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    windows = windows.reshape(n, c, h // 2, w // 2, 4)
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def back(g):
        routed = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(routed, arg[..., None], g[..., None], axis=-1)
        routed = routed.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (routed.reshape(n, c, h, w),)

    return apply(out, (x,), back)


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    area = h * w
    return apply(x.data.mean(axis=(2, 3)), (x,),
                 lambda g: (np.broadcast_to(g[:, :, None, None] / area, x.shape),))


# --------------------------------------------------------------------------
# Convolution
# --------------------------------------------------------------------------


def conv_output_size(size: int, kernel: int, stride: int, padding: str) -> int:
    if padding == "same":
        return -(-size // stride)
    if padding == "valid":
        return (size - kernel) // stride + 1
    raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")


def _same_padding(size: int, kernel: int, stride: int) -> tuple[int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: str = "same") -> Tensor:
    """Cross-correlation of NCHW input with FCkk weights via im2col."""
    n, c, h, w = x.shape
    f, wc, kh, kw = weight.shape
    if wc != c:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {wc}")
    if bias is not None and bias.shape != (f,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {f} filters")
    if padding == "same":
        (pt, pb), (pl, pr) = _same_padding(h, kh, stride), _same_padding(w, kw, stride)
    elif padding == "valid":
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} does not fit input {h}x{w}")

    xp = x.data
    if pt or pb or pl or pr:
        xp = np.pad(xp, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    xp_nhwc = xp.transpose(0, 2, 3, 1)
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp_nhwc[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
    cols = cols.reshape(n * ho * wo, kh * kw * c)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(f, kh * kw * c)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        gw = (g2.T @ cols).reshape(f, kh, kw, c).transpose(0, 3, 1, 2)
        gcols = (g2 @ wmat).reshape(n, ho, wo, kh, kw, c)
        gxp = np.zeros((n, xp.shape[2], xp.shape[3], c), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gcols[:, :, :, i, j, :]
        gx = gxp[:, pt:pt + h, pl:pl + w, :].transpose(0, 3, 1, 2)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return apply(np.ascontiguousarray(out), inputs, back)


# --------------------------------------------------------------------------
# Batch normalisation
# --------------------------------------------------------------------------


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
                training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation over (N, H, W).

    Training mode normalises with biased batch statistics and moves the
    running estimates by ``momentum`` toward the batch mean and unbiased
    batch variance. Eval mode uses the running estimates.
    """
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: gamma/beta must have shape ({c},)")
    gv = gamma.data.reshape(1, c, 1, 1)
    bv = beta.data.reshape(1, c, 1, 1)

    if not training:
        inv = (1.0 / np.sqrt(state.running_var + eps)).astype(x.dtype).reshape(1, c, 1, 1)
        xhat = (x.data - state.running_mean.reshape(1, c, 1, 1)) * inv
        out = gv * xhat + bv

        def back_eval(g):
            return g * gv * inv, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return apply(out, (x, gamma, beta), back_eval)

    m = n * h * w
    if m < 2:
        raise ShapeError("batchnorm2d: training mode needs at least 2 values per channel")
    mean = x.data.mean(axis=(0, 2, 3))
    centered = x.data - mean.reshape(1, c, 1, 1)
    var = (centered * centered).mean(axis=(0, 2, 3))
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype).reshape(1, c, 1, 1)
    xhat = centered * inv
    out = gv * xhat + bv

    state.running_mean[:] = (1 - momentum) * state.running_mean + momentum * mean
    state.running_var[:] = (1 - momentum) * state.running_var + momentum * var * (m / (m - 1))

    def back(g):
        dxhat = g * gv
        s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        dx = inv / m * (m * dxhat - s1 - xhat * s2)
        return dx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return apply(out, (x, gamma, beta), back)


# --------------------------------------------------------------------------
# Finite-difference check
# --------------------------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], point: Tensor, eps: float = 1e-4) -> float:
    """Max relative disagreement between tape and central-difference gradients.

    ``f`` maps a tensor to a scalar tensor. The comparison per coordinate is
    ``|a - n| / max(1e-8, |a| + |n|)``; run it in float64.
    """
    x = Tensor(np.array(point.data, dtype=np.float64), requires_grad=True)
    with Tape() as tape:
        y = f(x)
    tape.backward(y)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad

    flat = x.data.reshape(-1)
    numeric = np.empty(flat.size)
    for k in range(flat.size):
        keep = flat[k]
        flat[k] = keep + eps
        hi = f(Tensor(x.data.copy())).item()
        flat[k] = keep - eps
        lo = f(Tensor(x.data.copy())).item()
        flat[k] = keep
        numeric[k] = (hi - lo) / (2 * eps)

    a = analytic.reshape(-1)
    err = np.abs(a - numeric) / np.maximum(1e-8, np.abs(a) + np.abs(numeric))
    return float(err.max()) if err.size else 0.0


def he_normal(shape: Sequence[int], fan_in: int, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)
