"""Reverse-mode automatic differentiation on numpy arrays.

A Tensor wraps an ndarray plus an optional backward closure. Ops build a
graph; ``backward`` walks it once in reverse topological order and
accumulates into ``.grad`` (so tensors consumed twice get the sum of both
contributions). Everything runs in the engine's active precision.

Only the ops the model family needs are implemented, but each one handles
the general shapes it advertises, and each differentiable op is covered by
a finite-difference check in the test suite.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from . import engine
from .engine import ShapeError, WindowTooShort


class Tensor:
    """Array node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False) -> None:
        self.data = np.asarray(data, dtype=engine.dtype())
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents: Sequence["Tensor"],
                backward: Callable[[np.ndarray], None]) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out._parents = ()
        out._backward = None
        out.requires_grad = engine.grad_enabled() and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # -- bookkeeping -----------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Populate ``.grad`` on every reachable tensor with requires_grad."""
        if not self.requires_grad:
            raise ShapeError("backward on a tensor that requires no grad")
        if grad is None:
            if self.size != 1:
                raise ShapeError("backward without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.data.shape:
            raise ShapeError(f"seed gradient shape {grad.shape} != {self.data.shape}")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def clip(self, lo, hi):
        return clip(self, lo, hi)


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g back down to ``shape`` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic -----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return Tensor._result(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return Tensor._result(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return Tensor._result(data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return Tensor._result(data, (a, b), backward)


def log(x) -> Tensor:
    x = _coerce(x)
    data = np.log(x.data)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g / x.data)

    return Tensor._result(data, (x,), backward)


def exp(x) -> Tensor:
    x = _coerce(x)
    data = np.exp(x.data)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * data)

    return Tensor._result(data, (x,), backward)


def sqrt(x) -> Tensor:
    x = _coerce(x)
    data = np.sqrt(x.data)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * (0.5 / data))

    return Tensor._result(data, (x,), backward)


def clip(x, lo: float | None, hi: float | None) -> Tensor:
    """Clamp values; gradient passes only where x stayed inside [lo, hi]."""
    x = _coerce(x)
    data = np.clip(x.data, lo, hi)
    inside = np.ones_like(x.data, dtype=bool)
    if lo is not None:
        inside &= x.data >= lo
    if hi is not None:
        inside &= x.data <= hi

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * inside)

    return Tensor._result(data, (x,), backward)


def sigmoid(x) -> Tensor:
    x = _coerce(x)
    # Branch on sign so large |x| never exponentiates to overflow.
    pos = x.data >= 0
    z = np.where(pos, -x.data, x.data)
    ez = np.exp(z)
    data = np.where(pos, 1.0 / (1.0 + ez), ez / (1.0 + ez))

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * data * (1.0 - data))

    return Tensor._result(data, (x,), backward)


def swish(x) -> Tensor:
    """x * sigmoid(x)."""
    x = _coerce(x)
    pos = x.data >= 0
    z = np.where(pos, -x.data, x.data)
    ez = np.exp(z)
    sig = np.where(pos, 1.0 / (1.0 + ez), ez / (1.0 + ez))
    data = x.data * sig

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * (sig + x.data * sig * (1.0 - sig)))

    return Tensor._result(data, (x,), backward)


def softmax(x, axis: int = -1) -> Tensor:
    x = _coerce(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if x.requires_grad:
            inner = (g * data).sum(axis=axis, keepdims=True)
            x._accumulate(data * (g - inner))

    return Tensor._result(data, (x,), backward)


# -- shape ops --------------------------------------------------------------------


def reshape(x, *shape) -> Tensor:
    x = _coerce(x)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    old = x.data.shape
    data = x.data.reshape(shape)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g.reshape(old))

    return Tensor._result(data, (x,), backward)


def transpose(x, axes: tuple[int, ...] | None = None) -> Tensor:
    x = _coerce(x)
    if axes is None:
        axes = tuple(reversed(range(x.data.ndim)))
    axes = tuple(axes)
    data = x.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        if x.requires_grad:
            x._accumulate(g.transpose(inverse))

    return Tensor._result(data, (x,), backward)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    parts = [_coerce(t) for t in tensors]
    if not parts:
        raise ShapeError("concat needs at least one tensor")
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        pieces = np.split(g, splits, axis=axis)
        for p, piece in zip(parts, pieces):
            if p.requires_grad:
                p._accumulate(piece)

    return Tensor._result(data, tuple(parts), backward)


def tensor_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _coerce(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not x.requires_grad:
            return
        if axis is None:
            x._accumulate(np.broadcast_to(g, x.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.data.shape).copy())

    return Tensor._result(np.asarray(data), (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _coerce(x)
    if axis is None:
        n = x.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([x.data.shape[a] for a in axis]))
    else:
        n = x.data.shape[axis]
    return mul(tensor_sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# -- linear algebra -----------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting on leading dims."""
    a, b = _coerce(a), _coerce(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul expects rank >= 2 on both sides")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ b.data.swapaxes(-1, -2)
            a._accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = a.data.swapaxes(-1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.data.shape))

    return Tensor._result(data, (a, b), backward)


def linear(x, w, b=None) -> Tensor:
    """x @ w + b with x (B, F) and w (F, G)."""
    x, w = _coerce(x), _coerce(w)
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ShapeError("linear expects x (B, F) and w (F, G)")
    if x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(f"linear: F mismatch {x.data.shape} vs {w.data.shape}")
    out = matmul(x, w)
    if b is None:
        return out
    b = _coerce(b)
    if b.data.shape != (w.data.shape[1],):
        raise ShapeError("linear bias must have shape (G,)")
    return add(out, b)


# -- windowed ops over time ------------------------------------------------------------


def _window_view(xp: np.ndarray, kernel: int, stride: int, l_out: int) -> np.ndarray:
    # Read-only strided view (B, C, K, L_out); never written through.
    s0, s1, s2 = xp.strides
    return as_strided(xp, shape=(xp.shape[0], xp.shape[1], kernel, l_out),
                      strides=(s0, s1, s2, s2 * stride))


def _check_time_op(x: Tensor, kernel: int, stride: int, padding: int, name: str) -> int:
    if x.data.ndim != 3:
        raise ShapeError(f"{name} expects x (B, C, L), got rank {x.data.ndim}")
    if stride not in (1, 2):
        raise ShapeError(f"{name}: stride must be 1 or 2, got {stride}")
    if padding < 0:
        raise ShapeError(f"{name}: padding must be >= 0")
    l_out = (x.data.shape[2] + 2 * padding - kernel) // stride + 1
    if l_out < 1:
        raise WindowTooShort(
            f"{name}: window too short, length {x.data.shape[2]} with kernel "
            f"{kernel}, stride {stride}, padding {padding} leaves no output")
    return l_out


def conv1d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation over time. x (B, Ci, L), w (Co, Ci, K) -> (B, Co, L_out).

    L_out = floor((L + 2*padding - K) / stride) + 1. Bias optional, shape (Co,).
    """
    x, w = _coerce(x), _coerce(w)
    if w.data.ndim != 3:
        raise ShapeError("conv1d weight must be (Co, Ci, K)")
    co, ci, k = w.data.shape
    l_out = _check_time_op(x, k, stride, padding, "conv1d")
    if x.data.shape[1] != ci:
        raise ShapeError(f"conv1d: Ci mismatch, x has {x.data.shape[1]}, w has {ci}")
    bsz, _, l_in = x.data.shape

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding)))
    else:
        xp = x.data

    # Terms accumulate one (ci, k) tap at a time so every output element sums
    # its products in the same order a plain nested loop would. BLAS-backed
    # contractions reassociate the sum and drift in the last bit.
    data = np.zeros((bsz, co, l_out), dtype=xp.dtype)
    end = (l_out - 1) * stride + 1
    for c_in in range(ci):
        for kk in range(k):
            sl = xp[:, c_in, kk:kk + end:stride]
            data += sl[:, None, :] * w.data[None, :, c_in, kk, None]

    bias = None
    if b is not None:
        bias = _coerce(b)
        if bias.data.shape != (co,):
            raise ShapeError("conv1d bias must have shape (Co,)")
        data = data + bias.data[None, :, None]

    parents = (x, w) if bias is None else (x, w, bias)

    def backward(g):
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2)))
        if w.requires_grad:
            if k == 1:
                xs = xp[:, :, ::stride][:, :, :l_out]
                gw = np.einsum("bol,bcl->oc", g, xs, optimize=True)[:, :, None]
            else:
                win = _window_view(xp, k, stride, l_out)
                gw = np.tensordot(g, win, axes=([0, 2], [0, 3]))
            w._accumulate(gw)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            # dwin (B, Ci, K, L_out), then K scatter-adds undo the window view.
            dwin = np.tensordot(w.data, g, axes=([0], [1])).transpose(2, 0, 1, 3)
            for kk in range(k):
                gxp[:, :, kk:kk + stride * l_out:stride] += dwin[:, :, kk, :]
            if padding:
                gxp = gxp[:, :, padding:padding + l_in]
            x._accumulate(gxp)

    return Tensor._result(data, parents, backward)


def maxpool1d(x, kernel: int = 3, stride: int = 2, padding: int = 1) -> Tensor:
    """Max over sliding windows; padding counts as -inf, ties pick the lowest index."""
    x = _coerce(x)
    l_out = _check_time_op(x, kernel, stride, padding, "maxpool1d")
    l_in = x.data.shape[2]
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding)),
                    constant_values=-np.inf)
    else:
        xp = x.data
    win = _window_view(xp, kernel, stride, l_out)
    arg = win.argmax(axis=2)  # first max wins: lowest index
    data = np.ascontiguousarray(win.max(axis=2))

    def backward(g):
        if not x.requires_grad:
            return
        gxp = np.zeros_like(xp)
        for kk in range(kernel):
            sel = arg == kk
            gxp[:, :, kk:kk + stride * l_out:stride][sel] += g[sel]
        if padding:
            gxp = gxp[:, :, padding:padding + l_in]
        x._accumulate(gxp)

    return Tensor._result(data, (x,), backward)


def adaptive_avgpool1d(x, out_len: int) -> Tensor:
    """Mean over out_len bins with boundaries floor(i * L / out_len)."""
    x = _coerce(x)
    if x.data.ndim != 3:
        raise ShapeError("adaptive_avgpool1d expects x (B, C, L)")
    l_in = x.data.shape[2]
    if out_len < 1 or l_in < out_len:
        raise WindowTooShort(
            f"adaptive_avgpool1d: window too short, length {l_in} for {out_len} bins")
    bounds = [l_in * i // out_len for i in range(out_len + 1)]
    data = np.empty(x.data.shape[:2] + (out_len,), dtype=x.data.dtype)
    for i in range(out_len):
        data[:, :, i] = x.data[:, :, bounds[i]:bounds[i + 1]].mean(axis=2)

    def backward(g):
        if not x.requires_grad:
            return
        gx = np.zeros_like(x.data)
        for i in range(out_len):
            width = bounds[i + 1] - bounds[i]
            gx[:, :, bounds[i]:bounds[i + 1]] += g[:, :, i:i + 1] / width
        x._accumulate(gx)

    return Tensor._result(data, (x,), backward)


# -- normalization and regularization ----------------------------------------------------


def batchnorm1d(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over (batch, time) for x (B, C, L).

    Training mode normalizes with batch statistics and updates the running
    arrays in place (unbiased variance in the running estimate). Eval mode
    uses the running arrays and is a pure affine map.
    """
    x, gamma, beta = _coerce(x), _coerce(gamma), _coerce(beta)
    if x.data.ndim != 3:
        raise ShapeError("batchnorm1d expects x (B, C, L)")
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError("batchnorm1d: gamma/beta must have shape (C,)")
    # accept Tensor buffers or bare arrays; updates must hit the caller's
    # storage, so unwrap before the in-place ops
    rm_arr = running_mean.data if isinstance(running_mean, Tensor) else running_mean
    rv_arr = running_var.data if isinstance(running_var, Tensor) else running_var

    if training:
        axes = (0, 2)
        n = x.data.shape[0] * x.data.shape[2]
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        rm_arr *= 1.0 - momentum
        rm_arr += momentum * mu
        if n > 1:
            rv_arr *= 1.0 - momentum
            rv_arr += momentum * var * (n / (n - 1.0))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu[None, :, None]) * inv[None, :, None]
        data = gamma.data[None, :, None] * xhat + beta.data[None, :, None]

        def backward(g):
            if beta.requires_grad:
                beta._accumulate(g.sum(axis=axes))
            if gamma.requires_grad:
                gamma._accumulate((g * xhat).sum(axis=axes))
            if x.requires_grad:
                dxhat = g * gamma.data[None, :, None]
                s1 = dxhat.sum(axis=axes)
                s2 = (dxhat * xhat).sum(axis=axes)
                gx = (dxhat - (s1[None, :, None] + xhat * s2[None, :, None]) / n)
                gx *= inv[None, :, None]
                x._accumulate(gx)

        return Tensor._result(data, (x, gamma, beta), backward)

    inv = 1.0 / np.sqrt(rv_arr + eps)
    xhat = (x.data - rm_arr[None, :, None]) * inv[None, :, None]
    data = gamma.data[None, :, None] * xhat + beta.data[None, :, None]

    def backward(g):
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=(0, 2)))
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=(0, 2)))
        if x.requires_grad:
            x._accumulate(g * (gamma.data * inv)[None, :, None])

    return Tensor._result(data, (x, gamma, beta), backward)


def dropout(x, p: float, training: bool) -> Tensor:
    """Inverted dropout: scale kept units by 1/(1-p) so eval is the identity."""
    x = _coerce(x)
    if not 0.0 <= p < 1.0:
        raise engine.ConfigError(f"dropout rate must be in [0, 1), got {p}")
    if not training or p == 0.0:
        data = x.data

        def backward_id(g):
            if x.requires_grad:
                x._accumulate(g)

        return Tensor._result(data, (x,), backward_id)

    keep = engine.rng().random(x.data.shape) >= p
    scale = np.asarray(1.0 / (1.0 - p), dtype=x.data.dtype)
    mask = keep.astype(x.data.dtype) * scale
    data = x.data * mask

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * mask)

    return Tensor._result(data, (x,), backward)


# -- gradient checking ------------------------------------------------------------------


def grad_check(f, inputs: Sequence[Tensor], h: float = 1e-5,
               max_samples: int = 64, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f(*inputs)`` must return a scalar Tensor and be deterministic. The step
    per coordinate is h * max(1, |x_i|). Tensors larger than ``max_samples``
    are probed on a seeded random subset of coordinates. The relative error
    denominator is floored at 1e-4 so near-zero gradient pairs compare
    absolutely instead of blowing up.
    """
    if engine.dtype() is not np.float64:
        raise engine.ConfigError("grad_check must run in float64 precision")
    inputs = list(inputs)
    for t in inputs:
        t.grad = None
    out = f(*inputs)
    if not isinstance(out, Tensor) or out.size != 1:
        raise ShapeError("grad_check target must return a scalar Tensor")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy()
                for t in inputs]

    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    worst = 0.0
    for t, ga in zip(inputs, analytic):
        idx = np.arange(t.data.size)
        if t.data.size > max_samples:
            idx = rng.choice(t.data.size, size=max_samples, replace=False)
        for i in idx:
            orig = float(t.data.flat[i])
            step = h * max(1.0, abs(orig))
            with engine.no_grad():
                t.data.flat[i] = orig + step
                hi = float(f(*inputs).data)
                t.data.flat[i] = orig - step
                lo = float(f(*inputs).data)
            t.data.flat[i] = orig
            numeric = (hi - lo) / (2.0 * step)
            a = float(ga.flat[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-4)
            worst = max(worst, err)
    return worst
