"""Dense-tensor kernels with reverse-mode differentiation.

Arrays are numpy-backed, row-major, with image tensors laid out as
(batch, channels, height, width). Every op records a backward closure on
the tape when gradients are required; ``Tensor.backward`` walks the tape
in reverse topological order exactly once. Convolution follows the
cross-correlation convention (no kernel flip).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from .precision import active_dtype

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (forward-only evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-d array of reals plus an optional gradient buffer and tape node.

    Leaf tensors created with ``requires_grad=True`` hold a zero-filled
    ``grad`` buffer from the start, so leaves that never participate in a
    loss read back as zero gradient. Interior nodes allocate their buffer
    lazily during backward.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn",
                 "_op", "_done")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or active_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"
        self._done = False

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0
        elif self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def _accum(self, g: np.ndarray) -> None:
        if not (self.requires_grad or self._backward_fn is not None):
            return  # constant: nothing downstream wants this gradient
        if self.grad is None:
            # copy: `g` may alias a sibling's buffer (e.g. add passes it through)
            self.grad = np.array(g, dtype=self.data.dtype)
            if self.grad.shape != self.data.shape:
                self.grad = np.broadcast_to(self.grad, self.data.shape).copy()
        else:
            self.grad += g

    # -- operators -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, like=self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, like=self), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_tensor(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    # -- backward ------------------------------------------------------------
    def backward(self) -> None:
        """Populate leaf gradients of the graph below this scalar loss."""
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.shape}")
        if self._done:
            raise RuntimeError("backward called twice on the same tape; rebuild the graph")
        self._done = True

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
                if id(p) not in seen:
                    stack.append((p, False))

        self._accum(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)
                node.grad = None  # interior buffer, free once consumed


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else active_dtype()
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str,
          backward_fn: Callable[[np.ndarray], None] | None) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    out._done = False
    needs = _grad_enabled and any(p.requires_grad or p._backward_fn is not None
                                  for p in parents)
    if needs:
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward_fn = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- pointwise ops -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, like=a)

    def bw(g):
        a._accum(_unbroadcast(g, a.shape))
        b._accum(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), "add", bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, like=a)

    def bw(g):
        a._accum(_unbroadcast(g, a.shape))
        b._accum(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), "sub", bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, like=a)

    def bw(g):
        a._accum(_unbroadcast(g * b.data, a.shape))
        b._accum(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), "mul", bw)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    out = a.data / b.data

    def bw(g):
        a._accum(_unbroadcast(g / b.data, a.shape))
        b._accum(_unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), "div", bw)


def scalar_mul(x: Tensor, s: float) -> Tensor:
    return mul(x, float(s))


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.maximum(x.data, 0.0)

    def bw(g):
        x._accum(g * (x.data > 0))

    return _make(out, (x,), "relu", bw)


_GELU_C = 0.7978845608028654  # sqrt(2/pi), tanh approximation
_GELU_K = 0.044715


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    x = _as_tensor(x)
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + _GELU_K * x2))
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_K * x2)
        x._accum(g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner))

    return _make(out, (x,), "gelu", bw)


def exp(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.exp(x.data)

    def bw(g):
        x._accum(g * out)

    return _make(out, (x,), "exp", bw)


def log(x: Tensor) -> Tensor:
    x = _as_tensor(x)

    def bw(g):
        x._accum(g / x.data)

    return _make(np.log(x.data), (x,), "log", bw)


def sqrt(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.sqrt(x.data)

    def bw(g):
        # guard the x == 0 boundary; exact elsewhere
        x._accum(g * 0.5 / np.maximum(out, 1e-30))

    return _make(out, (x,), "sqrt", bw)


def square(x: Tensor) -> Tensor:
    x = _as_tensor(x)

    def bw(g):
        x._accum(g * 2.0 * x.data)

    return _make(x.data * x.data, (x,), "square", bw)


def tanh(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.tanh(x.data)

    def bw(g):
        x._accum(g * (1.0 - out ** 2))

    return _make(out, (x,), "tanh", bw)


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = 1.0 / (1.0 + np.exp(-x.data))

    def bw(g):
        x._accum(g * out * (1.0 - out))

    return _make(out, (x,), "sigmoid", bw)


def absolute(x: Tensor) -> Tensor:
    x = _as_tensor(x)

    def bw(g):
        x._accum(g * np.sign(x.data))

    return _make(np.abs(x.data), (x,), "abs", bw)


def pow_const(x: Tensor, p: float) -> Tensor:
    x = _as_tensor(x)
    out = x.data ** p

    def bw(g):
        x._accum(g * p * x.data ** (p - 1.0))

    return _make(out, (x,), "pow", bw)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes only through the interior."""
    x = _as_tensor(x)
    out = np.clip(x.data, lo, hi)

    def bw(g):
        x._accum(g * ((x.data >= lo) & (x.data <= hi)))

    return _make(out, (x,), "clamp", bw)


def stop_gradient(x: Tensor) -> Tensor:
    return _make(x.data, (), "stop_gradient", None)


# -- matmul / softmax / layer norm --------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading dims broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def bw(g):
        a._accum(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        b._accum(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(out, (a, b), "matmul", bw)


def softmax(x: Tensor, axis: int) -> Tensor:
    """Stable softmax along `axis` (max-subtracted)."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        x._accum(out * (g - dot))

    return _make(out, (x,), "softmax", bw)


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, axis: int = 1,
               eps: float = 1e-5) -> Tensor:
    """Normalize over `axis` (the channel dim), then scale and shift.

    `gain`/`shift` are 1-d of length C and broadcast onto `axis`.
    """
    x, gain, shift = _as_tensor(x), _as_tensor(gain), _as_tensor(shift)
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    ax = axis % x.ndim
    c = x.shape[ax]
    if gain.shape != (c,) or shift.shape != (c,):
        raise ValueError("gain/shift must be 1-d of the channel length")
    bshape = [1] * x.ndim
    bshape[ax] = c
    gb = gain.data.reshape(bshape)
    sb = shift.data.reshape(bshape)

    mu = x.data.mean(axis=ax, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=ax, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y0 = xc * inv
    out = y0 * gb + sb

    def bw(g):
        red = tuple(i for i in range(x.ndim) if i != ax)
        gain._accum((g * y0).sum(axis=red))
        shift._accum(g.sum(axis=red))
        gl = g * gb
        term = gl - gl.mean(axis=ax, keepdims=True) - y0 * (gl * y0).mean(axis=ax, keepdims=True)
        x._accum(term * inv)

    return _make(out, (x, gain, shift), "layer_norm", bw)


# -- reductions ----------------------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)

    def bw(g):
        x._accum(np.broadcast_to(g, x.shape).copy())

    return _make(np.asarray(x.data.sum(), dtype=x.dtype), (x,), "sum_all", bw)


def mean_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size

    def bw(g):
        x._accum(np.broadcast_to(g / n, x.shape).copy())

    return _make(np.asarray(x.data.mean(), dtype=x.dtype), (x,), "mean_all", bw)


def sum_axis(x: Tensor, axis, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)

    def bw(g):
        if not keepdims:
            for ax in sorted(a % x.ndim for a in axes):
                g = np.expand_dims(g, ax)
        x._accum(np.broadcast_to(g, x.shape).copy())

    return _make(x.data.sum(axis=axes, keepdims=keepdims), (x,), "sum_axis", bw)


def mean_axis(x: Tensor, axis, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    n = int(np.prod([x.shape[a % x.ndim] for a in axes]))

    def bw(g):
        if not keepdims:
            for ax in sorted(a % x.ndim for a in axes):
                g = np.expand_dims(g, ax)
        x._accum(np.broadcast_to(g / n, x.shape).copy())

    return _make(x.data.mean(axis=axes, keepdims=keepdims), (x,), "mean_axis", bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """[B,C,H,W] -> [B,C,1,1] spatial mean."""
    if x.ndim != 4:
        raise ValueError("global_avg_pool expects a [B,C,H,W] tensor")
    return mean_axis(x, (2, 3), keepdims=True)


# -- shape ops -----------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(shape)

    def bw(g):
        x._accum(g.reshape(x.shape))

    return _make(x.data.reshape(shape), (x,), "reshape", bw)


def transpose(x: Tensor, axes) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    inv = np.argsort(axes)

    def bw(g):
        x._accum(g.transpose(inv))

    return _make(x.data.transpose(axes), (x,), "transpose", bw)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            key = [slice(None)] * g.ndim
            key[axis] = slice(lo, hi)
            t._accum(g[tuple(key)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis),
                 tensors, "concat", bw)


def slice_tensor(x: Tensor, key) -> Tensor:
    x = _as_tensor(x)

    def bw(g):
        buf = np.zeros_like(x.data)
        buf[key] = g
        x._accum(buf)

    return _make(x.data[key], (x,), "slice", bw)


# convenience aliases used throughout the network code
def flatten_hw(x: Tensor) -> Tensor:
    """[B,C,H,W] -> [B,HW,C] token layout for attention."""
    b, c, h, w = x.shape
    return transpose(reshape(x, (b, c, h * w)), (0, 2, 1))


def unflatten_hw(x: Tensor, h: int, w: int) -> Tensor:
    """[B,HW,C] -> [B,C,H,W]."""
    b, hw, c = x.shape
    return reshape(transpose(x, (0, 2, 1)), (b, c, h, w))
