"""Dense fp64 tensors with a reverse-mode gradient tape.

Every differentiable op builds its result through :func:`_record`, which
attaches a :class:`TapeNode` holding the inputs and a closure mapping the
output gradient to per-input gradients. :meth:`Tensor.backward` walks the
tape once in reverse topological order.

Images and feature maps use channel-last layout, either ``[H, W, C]`` or
batched ``[N, H, W, C]``.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import special

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@dataclass
class TapeNode:
    op_kind: str
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] = field(repr=False)


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if any(n < 1 for n in arr.shape):
            raise ValueError(f"tensor extents must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: TapeNode | None = None

    # -- basic protocol -------------------------------------------------
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

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", op={self.node.op_kind}" if self.node else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators --------------------------------------------------------
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

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axes=None):
        return reduce("sum", self, axes)

    def mean(self, axes=None):
        return reduce("mean", self, axes)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # -- backprop -----------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for t in reversed(order):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t.node is None:
                if t.requires_grad:
                    t.grad = g.copy() if t.grad is None else t.grad + g
                continue
            for inp, gi in zip(t.node.inputs, t.node.backward(g)):
                if gi is None or not _needs_grad(inp):
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t.node is not None


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for inp in t.node.inputs:
                if id(inp) not in seen and _needs_grad(inp):
                    stack.append((inp, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, inputs: Sequence[Tensor], op: str, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out.node = None
    if grad_enabled() and any(_needs_grad(t) for t in inputs):
        out.node = TapeNode(op, tuple(inputs), backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"shapes {a.shape} and {b.shape} are not broadcastable") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _record(a.data + b.data, (a, b), "add",
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _record(a.data - b.data, (a, b), "sub",
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _record(a.data * b.data, (a, b), "mul",
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    out = a.data / b.data
    return _record(out, (a, b), "div",
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    out = a.data ** exponent
    return _record(out, (a,), "pow",
                   lambda g: (g * exponent * a.data ** (exponent - 1),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    return _record(np.maximum(a.data, 0.0), (a,), "relu",
                   lambda g: (g * (a.data > 0),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = special.expit(a.data)
    return _record(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def softsign(a) -> Tensor:
    a = as_tensor(a)
    denom = 1.0 + np.abs(a.data)
    # d/dx x/(1+|x|) = 1/(1+|x|)^2, which is 1 at x = 0.
    return _record(a.data / denom, (a,), "softsign", lambda g: (g / denom ** 2,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record(out, (a,), "tanh", lambda g: (g * (1.0 - out * out),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), "exp", lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _record(np.log(a.data), (a,), "log", lambda g: (g / a.data,))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    return _record(out, (a,), "softplus", lambda g: (g * special.expit(a.data),))


def normal_cdf(a) -> Tensor:
    """Standard normal CDF, Phi(x) = (1 + erf(x / sqrt 2)) / 2."""
    a = as_tensor(a)
    pdf = np.exp(-0.5 * a.data * a.data) / np.sqrt(2.0 * np.pi)
    return _record(special.ndtr(a.data), (a,), "normal_cdf", lambda g: (g * pdf,))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    return _record(np.abs(a.data), (a,), "abs", lambda g: (g * np.sign(a.data),))


def clamp_min(a, floor: float) -> Tensor:
    a = as_tensor(a)
    keep = a.data >= floor
    return _record(np.where(keep, a.data, floor), (a,), "clamp_min",
                   lambda g: (g * keep,))


_UNARY = {"relu": relu, "sigmoid": sigmoid, "softsign": softsign}
_BINARY = {"add": add, "mul": mul, "sub": sub}


def elementwise(op_tag: str, *operands) -> Tensor:
    """Tag-dispatched elementwise op; binary ops need equal shapes or a scalar."""
    if op_tag in _UNARY:
        if len(operands) != 1:
            raise ValueError(f"{op_tag} takes one operand")
        return _UNARY[op_tag](operands[0])
    if op_tag in _BINARY:
        if len(operands) != 2:
            raise ValueError(f"{op_tag} takes two operands")
        a, b = (as_tensor(o) for o in operands)
        if a.shape != b.shape and a.size != 1 and b.size != 1:
            raise ValueError(f"{op_tag}: shapes {a.shape} and {b.shape} differ "
                             "and neither is a scalar")
        return _BINARY[op_tag](a, b)
    raise ValueError(f"unknown elementwise op {op_tag!r}")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def _norm_axes(axes, ndim: int) -> tuple[int, ...] | None:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for ndim {ndim}")
    return tuple(sorted({ax % ndim for ax in axes}))


def reduce(op_tag: str, a, axes=None) -> Tensor:
    """Sum or mean over ``axes`` (all axes when None; an empty list is identity)."""
    a = as_tensor(a)
    if op_tag not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {op_tag!r}")
    axes = _norm_axes(axes, a.ndim)
    if not axes:
        return a
    count = int(np.prod([a.shape[ax] for ax in axes]))
    out = a.data.sum(axis=axes)
    if op_tag == "mean":
        out = out / count
    scale = 1.0 if op_tag == "sum" else 1.0 / count
    kept = tuple(1 if ax in axes else n for ax, n in enumerate(a.shape))

    def backward(g):
        return (np.broadcast_to(g.reshape(kept) * scale, a.shape).copy(),)

    return _record(np.asarray(out, dtype=np.float64), (a,), op_tag, backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _record(a.data.reshape(shape), (a,), "reshape",
                   lambda g: (g.reshape(a.shape),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    basic = all(isinstance(i, (slice, int, type(Ellipsis), type(None)))
                for i in (index if isinstance(index, tuple) else (index,)))

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _record(np.array(a.data[index]), (a,), "getitem", backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if len(ts) == 1:
        return ts[0]
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(np.concatenate([t.data for t in ts], axis=axis), ts, "concat", backward)


def einsum(subscripts: str, a, b) -> Tensor:
    """Two-operand einsum. Every index of an input must appear in the other
    input or in the output, which holds for all contraction patterns used here."""
    a, b = as_tensor(a), as_tensor(b)
    ins, out_s = subscripts.replace(" ", "").split("->")
    sa, sb = ins.split(",")

    def grad_for(src1, arr1, src2, arr2, target, shape):
        if "..." in target or ("..." not in src1 and "..." not in src2):
            return np.einsum(f"{src1},{src2}->{target}", arr1, arr2, optimize=True)
        # numpy will not sum an ellipsis away implicitly; keep it, then reduce.
        full = np.einsum(f"{src1},{src2}->...{target}", arr1, arr2, optimize=True)
        return full.reshape((-1,) + shape).sum(axis=0)

    def backward(g):
        return (grad_for(out_s, g, sb, b.data, sa, a.shape),
                grad_for(out_s, g, sa, a.data, sb, b.shape))

    return _record(np.einsum(subscripts, a.data, b.data, optimize=True), (a, b), "einsum", backward)


def linear(x, w, transpose: bool = False) -> Tensor:
    """``x[..., a] @ w[a, b]`` (or ``@ w.T`` when ``transpose``) via BLAS."""
    x, w = as_tensor(x), as_tensor(w)
    wm = w.data.T if transpose else w.data
    if w.ndim != 2 or x.shape[-1] != wm.shape[0]:
        raise ValueError(f"linear: cannot contract {x.shape} with {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, wm.shape[0])

    def backward(g):
        g2 = g.reshape(-1, wm.shape[1])
        gw = x2.T @ g2
        return (g2 @ wm.T).reshape(x.shape), (gw.T if transpose else gw)

    return _record((x2 @ wm).reshape(lead + (wm.shape[1],)), (x, w), "linear", backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (a,), "softmax", backward)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _out_extent(n: int, stride: int) -> int:
    return -(-n // stride)


def _im2col(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    """Patches ``[N*Ho*Wo, k*k*Cin]`` ordered (row tap, col tap, channel)."""
    if k == 1 and stride == 1:
        return x.reshape(-1, x.shape[-1])
    p = (k - 1) // 2
    n, h, wd, c = x.shape
    ho, wo = _out_extent(h, stride), _out_extent(wd, stride)
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
    cols = np.empty((n, ho, wo, k, k, c))
    span_h, span_w = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    for u in range(k):
        for v in range(k):
            cols[:, :, :, u, v, :] = xp[:, u:u + span_h:stride, v:v + span_w:stride, :]
    return cols.reshape(n * ho * wo, k * k * c)


def _col2im(cols: np.ndarray, shape, k: int, stride: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add patches back to ``shape``."""
    if k == 1 and stride == 1:
        return cols.reshape(shape)
    p = (k - 1) // 2
    n, h, wd, c = shape
    ho, wo = _out_extent(h, stride), _out_extent(wd, stride)
    cols = cols.reshape(n, ho, wo, k, k, c)
    out = np.zeros((n, h + 2 * p + stride, wd + 2 * p + stride, c))
    span_h, span_w = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    for u in range(k):
        for v in range(k):
            out[:, u:u + span_h:stride, v:v + span_w:stride, :] += cols[:, :, :, u, v, :]
    return out[:, p:p + h, p:p + wd, :]


def conv2d(x, kernel, stride: int = 1, transposed: bool = False) -> Tensor:
    """Zero same-padded 2-D cross-correlation, or its exact adjoint.

    ``kernel`` is ``[k, k, Cin, Cout]`` with odd ``k``. The forward op maps
    ``[.., H, W, Cin]`` to ``[.., ceil(H/s), ceil(W/s), Cout]``; the transposed
    op maps ``[.., H, W, Cout]`` to ``[.., H*s, W*s, Cin]``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1] or kernel.shape[0] % 2 == 0:
        raise ValueError(f"kernel must be [k, k, Cin, Cout] with odd k, got {kernel.shape}")
    if stride < 1:
        raise ValueError("stride must be positive")
    if x.ndim not in (3, 4):
        raise ValueError(f"input must be [H, W, C] or [N, H, W, C], got {x.shape}")
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    w = kernel.data
    k = w.shape[0]
    chan_in = w.shape[3] if transposed else w.shape[2]
    if xd.shape[-1] != chan_in:
        raise ValueError(f"channel mismatch: input has {xd.shape[-1]} channels, "
                         f"kernel {kernel.shape} expects {chan_in}")

    cin, cout = w.shape[2], w.shape[3]
    w2 = w.reshape(k * k * cin, cout)
    n = xd.shape[0]
    if not transposed:
        ho, wo = _out_extent(xd.shape[1], stride), _out_extent(xd.shape[2], stride)
        cols = _im2col(xd, k, stride)
        out = (cols @ w2).reshape(n, ho, wo, cout)

        def backward(g):
            g2 = (g[None] if single else g).reshape(-1, cout)
            gx = _col2im(g2 @ w2.T, xd.shape, k, stride)
            gw = (cols.T @ g2).reshape(w.shape)
            return (gx[0] if single else gx), gw
    else:
        big = (n, xd.shape[1] * stride, xd.shape[2] * stride, cin)
        x2 = xd.reshape(-1, cout)
        out = _col2im(x2 @ w2.T, big, k, stride)

        def backward(g):
            g4 = g[None] if single else g
            gcols = _im2col(g4, k, stride)
            gx = (gcols @ w2).reshape(xd.shape)
            gw = (gcols.T @ x2).reshape(w.shape)
            return (gx[0] if single else gx), gw

    if single:
        out = out[0]
    return _record(np.ascontiguousarray(out), (x, kernel),
                   "conv2d_t" if transposed else "conv2d", backward)
