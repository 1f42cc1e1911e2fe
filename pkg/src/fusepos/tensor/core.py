"""Reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Tensor` is a node in a computation graph.  Every op records its
parents and a closure mapping the output gradient to parent gradients;
:func:`backward` walks the graph in reverse topological order.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SELU_LAMBDA = 1.0507009873554804934193349852946
SELU_ALPHA = 1.6732632423543772848170429916717

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class IndexedGrad:
    """Gradient that is non-zero only on ``index`` of the parent.

    Lets slicing ops avoid materialising a full zero array per call.
    """

    __slots__ = ("index", "value")

    def __init__(self, index, value):
        self.index = index
        self.value = value


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # --------------------------------------------------------------- operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ------------------------------------------------------------- elementwise ops
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw)


def power(a: Tensor, exponent: float) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _make(a.data**exponent, (a,), bw)


def square(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (0.5 * g / out,))


def sin(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def cos(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _make(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def absolute(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def selu(a: Tensor, lam: float = SELU_LAMBDA, alpha: float = SELU_ALPHA) -> Tensor:
    """Scaled exponential linear unit.

    ``lam * z`` for ``z > 0`` and ``lam * alpha * (exp(z) - 1)`` otherwise.
    """
    a = as_tensor(a)
    x = a.data
    neg = x <= 0
    ex = np.exp(np.where(neg, x, 0.0))
    out = np.where(neg, lam * alpha * (ex - 1.0), lam * x)
    dout = np.where(neg, lam * alpha * ex, lam)
    return _make(out, (a,), lambda g: (g * dout,))


# ------------------------------------------------------------- linear algebra
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if a.ndim > 2 and b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(np.matmul(a.data, b.data), (a, b), bw)


# ------------------------------------------------------------------ reductions
def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape),)

    return _make(np.mean(a.data, axis=axis, keepdims=keepdims), (a,), bw)


def norm(a: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at zero is taken as zero."""
    a = as_tensor(a)
    out = np.sqrt(np.sum(a.data * a.data, axis=axis))

    def bw(g):
        safe = np.where(out > 0, out, 1.0)
        scale = np.where(out > 0, g / safe, 0.0)
        return (a.data * np.expand_dims(scale, axis),)

    return _make(out, (a,), bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _make(out, (a,), bw)


# -------------------------------------------------------------- shape ops
def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a: Tensor, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]

    def bw(g):
        return (IndexedGrad(index, g),)

    return _make(np.array(out, copy=True), (a,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, bw)


def pad(a: Tensor, widths) -> Tensor:
    a = as_tensor(a)
    index = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return _make(np.pad(a.data, widths), (a,), lambda g: (g[index],))


# ---------------------------------------------------------------- recurrent
def lstm_cell(x, h, c, W, U, b) -> tuple[Tensor, Tensor]:
    """One LSTM step with gate order (input, forget, candidate, output).

    ``W``: (in, 4H), ``U``: (H, 4H), ``b``: (4H,).  Returns ``(h', c')``.
    """
    x, h, c = as_tensor(x), as_tensor(h), as_tensor(c)
    hidden = U.shape[0]
    if W.shape[1] != 4 * hidden or b.shape[-1] != 4 * hidden:
        raise ValueError(f"LSTM parameter shapes inconsistent with hidden size {hidden}")
    if x.shape[-1] != W.shape[0] or h.shape[-1] != hidden or c.shape[-1] != hidden:
        raise ValueError(
            f"LSTM input shapes x={x.shape}, h={h.shape}, c={c.shape} do not match "
            f"W={W.shape}, U={U.shape}"
        )
    gates = matmul(x, W) + matmul(h, U) + b
    return lstm_gates(gates, c)


def lstm_gates(gates: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
    """Fused gate nonlinearity: pre-activations (B, 4H) and c (B, H) to (h', c')."""
    c = as_tensor(c)
    H = c.shape[-1]
    z = gates.data
    i = _sigmoid(z[..., :H])
    f = _sigmoid(z[..., H : 2 * H])
    gg = np.tanh(z[..., 2 * H : 3 * H])
    o = _sigmoid(z[..., 3 * H :])
    c_new = f * c.data + i * gg
    tc = np.tanh(c_new)
    h_new = o * tc

    def bw_c(g):
        dz = np.empty_like(z)
        dz[..., :H] = g * gg * i * (1.0 - i)
        dz[..., H : 2 * H] = g * c.data * f * (1.0 - f)
        dz[..., 2 * H : 3 * H] = g * i * (1.0 - gg * gg)
        dz[..., 3 * H :] = 0.0
        return dz, g * f

    c_out = _make(c_new, (gates, c), bw_c)

    def bw_h(g):
        dz = np.zeros_like(z)
        dz[..., 3 * H :] = g * tc * o * (1.0 - o)
        return dz, g * o * (1.0 - tc * tc)

    h_out = _make(h_new, (gates, c_out), bw_h)
    return h_out, c_out


# ---------------------------------------------------------- convolution/pool
def _pair(v) -> tuple[int, int]:
    return (v, v) if isinstance(v, int) else (int(v[0]), int(v[1]))


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x, w, b=None, stride=1, padding=0) -> Tensor:
    """Cross-correlation.  ``x``: (B, C, H, W); ``w``: (O, C, kh, kw); ``b``: (O,)."""
    x, w = as_tensor(x), as_tensor(w)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    B, C, H, W_ = x.shape
    O, Cw, kh, kw = w.shape
    if Cw != C:
        raise ValueError(f"conv2d channel mismatch: input {C}, kernel {Cw}")
    Ho = conv_output_size(H, kh, sh, ph)
    Wo = conv_output_size(W_, kw, sw, pw)
    if Ho <= 0 or Wo <= 0:
        raise ValueError(
            f"conv2d output would be {Ho}x{Wo} for input {H}x{W_}, kernel {kh}x{kw}, "
            f"stride {(sh, sw)}, padding {(ph, pw)}"
        )
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    # (B, Ho, Wo, C*kh*kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B, Ho, Wo, C * kh * kw)
    wmat = w.data.reshape(O, -1)
    out = (cols @ wmat.T).transpose(0, 3, 1, 2)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[None, :, None, None]
        parents.append(b)

    def bw(g):
        gt = g.transpose(0, 2, 3, 1)  # (B, Ho, Wo, O)
        gw = (gt.reshape(-1, O).T @ cols.reshape(-1, C * kh * kw)).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gt @ wmat).reshape(B, Ho, Wo, C, kh, kw)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + sh * Ho : sh, j : j + sw * Wo : sw] += dcols[..., i, j].transpose(0, 3, 1, 2)
            gx = dxp[:, :, ph : ph + H, pw : pw + W_]
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _make(np.ascontiguousarray(out), parents, bw)


def maxpool2d(x, window, stride=None) -> Tensor:
    """Max pooling over (H, W); gradient goes to the lowest flat index on ties."""
    x = as_tensor(x)
    kh, kw = _pair(window)
    sh, sw = _pair(stride if stride is not None else window)
    B, C, H, W_ = x.shape
    Ho = conv_output_size(H, kh, sh, 0)
    Wo = conv_output_size(W_, kw, sw, 0)
    if Ho <= 0 or Wo <= 0:
        raise ValueError(f"maxpool2d output would be {Ho}x{Wo} for input {H}x{W_}, window {kh}x{kw}")
    win = sliding_window_view(x.data, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :Ho, :Wo]
    flat = win.reshape(B, C, Ho, Wo, kh * kw)
    arg = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros_like(x.data)
        di, dj = np.divmod(arg, kw)
        rows = np.arange(Ho)[None, None, :, None] * sh + di
        cols = np.arange(Wo)[None, None, None, :] * sw + dj
        bi = np.arange(B)[:, None, None, None]
        ci = np.arange(C)[None, :, None, None]
        np.add.at(gx, (bi, ci, rows, cols), g)
        return (gx,)

    return _make(out, (x,), bw)


def global_avg_pool(x, axes=(2, 3)) -> Tensor:
    return mean(x, axis=tuple(axes))


# -------------------------------------------------------------------- engine
def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
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
    return order


def _accumulate(grads: dict, owned: set, node: Tensor, g) -> None:
    # never mutate a buffer the engine did not allocate: ops may hand the
    # same array to several parents
    key = id(node)
    cur = grads.get(key)
    if isinstance(g, IndexedGrad):
        if cur is None:
            cur = np.zeros(node.shape)
        elif key not in owned:
            cur = np.array(cur, dtype=np.float64)
        if _has_advanced(g.index):
            np.add.at(cur, g.index, g.value)
        else:
            cur[g.index] += g.value
        grads[key] = cur
        owned.add(key)
        return
    if g.shape != node.shape:
        g = np.broadcast_to(g, node.shape)
    if cur is None:
        grads[key] = g
    elif key in owned:
        cur += g
    else:
        grads[key] = cur + g
        owned.add(key)


def _has_advanced(index) -> bool:
    idx = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in idx)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf that requires grad."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    owned: set[int] = set()
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            g = np.array(g, dtype=np.float64)
            node.grad = g if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is not None and p.requires_grad:
                _accumulate(grads, owned, p, pg)
