"""Minimal define-by-run reverse-mode autodiff over numpy arrays.

Image-like tensors are channels-last. Convolution ops accept either a single
``(H, W, C)`` map or a batch ``(N, H, W, C)``.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
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

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)


class Parameter(Tensor):
    """A named learnable leaf. Frozen parameters are read-only and never updated."""

    __slots__ = ("frozen",)

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data), requires_grad=True, name=name)
        self.frozen = False

    def freeze(self) -> None:
        self.frozen = True
        self.requires_grad = False
        self.grad = None
        self.data.flags.writeable = False


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- pointwise


def add(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


def div(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw)


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form: bounded for any input and much faster than exp-based forms
    out = np.tanh(x * 0.5)
    out += 1.0
    out *= 0.5
    return out


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x); the pointwise nonlinearity used by every network."""
    s = _sigmoid(a.data)
    out = a.data * s
    return _make(out, (a,), lambda g: (g * (s + out * (1.0 - s)),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def stop_gradient(a: Tensor) -> Tensor:
    """Same values, no gradient path back to ``a``."""
    return Tensor(a.data, requires_grad=False)


sg = stop_gradient


def straight_through(source: Tensor, target: Tensor) -> Tensor:
    """Forward yields ``target`` exactly; backward copies the gradient to ``source``."""
    if source.shape != target.shape:
        raise ShapeError(f"straight_through shapes differ: {source.shape} vs {target.shape}")
    return _make(target.data.copy(), (source,), lambda g: (g,))


# --------------------------------------------------------------- reductions


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax_channels(a: Tensor) -> Tensor:
    """Softmax over the trailing (channel) axis with max subtraction."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (a,), bw)


def normalize_channels(a: Tensor, eps: float = 1e-10) -> Tensor:
    """Scale each position's channel vector to unit L2 norm."""
    norm = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True) + eps)
    out = a.data / norm

    def bw(g):
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / norm,)

    return _make(out, (a,), bw)


def gather_rows(table: Tensor, indices: np.ndarray) -> Tensor:
    """``table.data[indices]`` for a 2-D table; gradient scatter-adds into rows."""
    idx = np.asarray(indices)
    out = table.data[idx]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make(out, (table,), bw)


def add_residual(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"residual shapes differ: {a.shape} vs {b.shape}")
    return add(a, b)


# ------------------------------------------------------------- convolutions


def _as_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.data.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.data.ndim != 4:
        raise ShapeError(f"expected (H,W,C) or (N,H,W,C), got {x.shape}")
    return x, False


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation. kernel is (kh, kw, Cin, Cout)."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if padding < 0:
        raise ValueError("padding must be >= 0")
    xb, squeeze = _as_batch(x)
    n, h, w, cin = xb.shape
    kh, kw, kcin, cout = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input {cin}, kernel {kcin}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError("kernel larger than padded input")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    xp = np.pad(xb.data, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else xb.data
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    # (n, ho, wo, cin, kh, kw) -> (n*ho*wo, kh*kw*cin) in kernel order
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, kh * kw * cin)
    k2 = kernel.data.reshape(kh * kw * cin, cout)
    out = cols @ k2
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, cout)

    def bw(g):
        g2 = g.reshape(n * ho * wo, cout)
        gx = gk = gb = None
        if kernel.requires_grad:
            gk = (cols.T @ g2).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        if xb.requires_grad:
            gcols = (g2 @ k2.T).reshape(n, ho, wo, kh, kw, cin)
            if kh * kw > 1:
                gcols = np.ascontiguousarray(gcols.transpose(3, 4, 0, 1, 2, 5))
            else:
                gcols = gcols.reshape(1, 1, n, ho, wo, cin)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gcols[i, j]
            gx = gxp[:, padding:padding + h, padding:padding + w, :] if padding else gxp
        return gx, gk, gb

    parents = (xb, kernel) + ((bias,) if bias is not None else (Tensor(np.zeros(cout, x.dtype)),))
    res = _make(out, parents, bw)
    return reshape(res, res.shape[1:]) if squeeze else res


def conv_transpose2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
                     stride: int = 1, padding: int | None = None) -> Tensor:
    """Adjoint of ``conv2d`` with the same kernel; kernel is (kh, kw, Cout, Cin).

    With the default padding ``(kh - stride) // 2`` the output is exactly
    ``stride`` times larger in each spatial dimension.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    xb, squeeze = _as_batch(x)
    n, h, w, cin = xb.shape
    kh, kw, cout, kcin = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv_transpose2d channel mismatch: input {cin}, kernel {kcin}")
    if padding is None:
        if (kh - stride) % 2 or (kw - stride) % 2 or kh < stride:
            raise ShapeError("kernel/stride combination cannot upsample exactly")
        padding = (kh - stride) // 2
    hf = (h - 1) * stride + kh
    wf = (w - 1) * stride + kw
    ho, wo = hf - 2 * padding, wf - 2 * padding
    x2 = xb.data.reshape(n * h * w, cin)
    # (n*h*w, kh*kw*cout): each input pixel stamps a kh x kw patch
    k2 = kernel.data.reshape(kh * kw * cout, cin)
    stamps = np.ascontiguousarray((x2 @ k2.T).reshape(n, h, w, kh, kw, cout).transpose(3, 4, 0, 1, 2, 5))
    full = np.zeros((n, hf, wf, cout), dtype=stamps.dtype)
    for i in range(kh):
        for j in range(kw):
            full[:, i:i + stride * h:stride, j:j + stride * w:stride, :] += stamps[i, j]
    out = full[:, padding:padding + ho, padding:padding + wo, :]
    if bias is not None:
        out = out + bias.data
    else:
        out = out.copy()

    def bw(g):
        gx = gk = gb = None
        gfull = np.pad(g, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else g
        win = sliding_window_view(gfull, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :h, :w]
        gst = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * h * w, kh * kw * cout)
        if kernel.requires_grad:
            gk = (gst.T @ x2).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = g.reshape(-1, cout).sum(axis=0)
        if xb.requires_grad:
            gx = (gst @ k2).reshape(xb.shape)
        return gx, gk, gb

    parents = (xb, kernel) + ((bias,) if bias is not None else (Tensor(np.zeros(cout, x.dtype)),))
    res = _make(out, parents, bw)
    return reshape(res, res.shape[1:]) if squeeze else res


# ---------------------------------------------------------------- optimizer


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None],
              m: Sequence[np.ndarray], v: Sequence[np.ndarray], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              t: int = 1) -> None:
    """One bias-corrected Adam update applied in place to params, m and v."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, mi, vi in zip(params, grads, m, v):
        if g is None:
            continue
        mi *= beta1
        mi += (1.0 - beta1) * g
        vi *= beta2
        vi += (1.0 - beta2) * (g * g)
        p -= lr * (mi / c1) / (np.sqrt(vi / c2) + eps)


class Adam:
    def __init__(self, params: Iterable[Parameter], lr: float = 2e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = [p for p in params if not p.frozen]
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        grads = [p.grad if not p.frozen else None for p in self.params]
        adam_step([p.data for p in self.params], grads, self.m, self.v, self.lr,
                  self.betas[0], self.betas[1], self.eps, self.t)


def param_count(params: Iterable[Tensor]) -> int:
    return int(math.fsum(p.data.size for p in params))
