"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Every primitive that touches a tensor requiring gradients appends a node to
the active :class:`Tape`. :func:`backward` walks that tape once in reverse,
deposits gradients on leaf tensors and clears the tape.

Model compute runs in float32. Tensors built from float64 arrays stay in
float64, which is what the finite-difference checks use.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from ._kernels import col2im, im2col

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


class AutodiffError(Exception):
    """Base class for autodiff failures."""


class ShapeError(AutodiffError, ValueError):
    """Operand shapes do not conform for a primitive."""

    def __init__(self, primitive: str, *shapes, detail: str = ""):
        self.primitive = primitive
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{primitive}: incompatible shapes {', '.join(map(str, self.shapes))}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteError(AutodiffError, FloatingPointError):
    """A tensor holds NaN or Inf where finite values are required."""


class Tensor:
    """Dense array that can take part in gradient recording.

    Args:
        data: array-like payload. Float64 ndarrays keep their precision,
            anything else is stored as float32.
        requires_grad: record operations on this tensor and collect a
            gradient for it on :func:`backward`.
        name: optional label used in error messages and checkpoints.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_is_leaf")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = np.float64 if arr.dtype == np.float64 and isinstance(data, np.ndarray) \
                else np.float32
        arr = np.asarray(data, dtype=dtype)
        # np.ascontiguousarray would promote 0-d arrays to 1-d
        self.data = arr if arr.flags.c_contiguous else arr.copy(order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._is_leaf = True

    # -- basic accessors -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._is_leaf

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape, detail="tensor is not scalar")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


# -- tape ------------------------------------------------------------------

class Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op: str, inputs: tuple, output: Tensor, backward: Callable):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended in execution order, so inputs always precede their
    consumers and a single reversed pass is a valid topological sweep.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes = []

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ShapeError("backward", loss.shape, detail="loss must be a scalar")
        if not self.nodes:
            raise AutodiffError("backward: tape is empty; nothing was recorded")
        grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
        try:
            for node in reversed(self.nodes):
                g = grads.pop(id(node.output), None)
                if g is None:
                    continue
                in_grads = node.backward(g)
                for inp, gi in zip(node.inputs, in_grads):
                    if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                        continue
                    if inp._is_leaf:
                        gi = np.asarray(gi, dtype=inp.dtype).reshape(inp.shape)
                        if inp.grad is None:
                            inp.grad = gi.copy()
                        else:
                            inp.grad = inp.grad + gi
                    else:
                        key = id(inp)
                        prev = grads.get(key)
                        grads[key] = gi if prev is None else prev + gi
        finally:
            self.clear()


_state = threading.local()


def _tape() -> Tape:
    tape = getattr(_state, "tape", None)
    if tape is None:
        tape = _state.tape = Tape()
    return tape


def current_tape() -> Tape:
    """Tape owned by the calling thread."""
    return _tape()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable recording inside the block (inference, metric evaluation)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that ``loss`` depends on, then clear the tape."""
    _tape().backward(loss)


def reset_tape() -> None:
    """Drop any recorded operations without differentiating."""
    _tape().clear()


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x, dtype=dtype)


def _make(op: str, data: np.ndarray, inputs: tuple, backward_fn: Callable) -> Tensor:
    needs = grad_enabled() and any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(data, dtype=data.dtype)
    if needs:
        out.requires_grad = True
        out._is_leaf = False
        _tape().record(Node(op, inputs, out, backward_fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    ndim_extra = g.ndim - len(shape)
    if ndim_extra:
        g = g.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape, detail="not broadcastable") from None


# -- elementwise arithmetic -------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("div", a, b)
    return _make("div", a.data / b.data, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, _as_tensor(b, like=a)
    b = _as_tensor(b)
    return _as_tensor(a, like=b), b


def square(a: Tensor) -> Tensor:
    return _make("square", a.data * a.data, (a,), lambda g: (2 * g * a.data,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make("relu", np.maximum(a.data, 0), (a,), lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    scale = np.where(a.data > 0, 1.0, slope).astype(a.dtype)
    return _make("leaky_relu", a.data * scale, (a,), lambda g: (g * scale,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(a.dtype)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), lambda g: (g * (1 - out * out),))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    e = np.exp(-np.abs(x))
    sig = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(a.dtype)
    return _make("softplus", out.astype(a.dtype), (a,), lambda g: (g * sig,))


def clamp(a: Tensor, lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    out = np.clip(a.data, lo, hi)
    mask = np.ones(a.shape, dtype=bool)
    if lo is not None:
        mask &= a.data >= lo
    if hi is not None:
        mask &= a.data <= hi
    return _make("clamp", out, (a,), lambda g: (g * mask,))


# -- reductions and shape ops ----------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", np.asarray(out, dtype=a.dtype), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).astype(a.dtype),)

    return _make("mean", np.asarray(out, dtype=a.dtype), (a,), bw)


def l2_norm(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Euclidean norm over ``axis``; the gradient at a zero vector is taken as zero."""
    axes = _norm_axis(axis, a.ndim)
    nrm = np.sqrt((a.data * a.data).sum(axis=axes, keepdims=True))

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        safe = np.where(nrm > 0, nrm, 1)
        return ((g * np.where(nrm > 0, a.data / safe, 0)).astype(a.dtype),)

    out = nrm if keepdims else np.squeeze(nrm, axis=axes)
    return _make("l2_norm", np.asarray(out, dtype=a.dtype), (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    return _make("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


# -- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return _make("matmul", a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w.T + b`` with ``w`` of shape (out, in)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError("linear", x.shape, w.shape)
    wd = w.data
    out = x.data @ wd.T
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ShapeError("linear", w.shape, b.shape, detail="bias length")
        out = out + b.data

    def bw(g):
        gb = g.sum(axis=0) if b is not None and b.requires_grad else None
        gw = g.T @ x.data if w.requires_grad else None
        return g @ wd if x.requires_grad else None, gw, gb

    return _make("linear", out, (x, w, b) if b is not None else (x, w), bw)


def _check_conv(op, x, w, expect_in):
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[expect_in]:
        raise ShapeError(op, x.shape, w.shape)


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlation of (N, C, H, W) input with (F, C, kh, kw) filters."""
    _check_conv("conv2d", x, w, 1)
    N, C, H, W = x.shape
    F, _, kh, kw = w.shape
    oh = (H + 2 * padding - kh) // stride + 1
    ow = (W + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError("conv2d", x.shape, w.shape, detail="kernel larger than padded input")
    cols = im2col(x.data, kh, kw, stride, padding)
    wmat = w.data.reshape(F, -1)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(N, oh, ow, F).transpose(0, 3, 1, 2))

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, F)
        gw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = col2im(g2 @ wmat, x.shape, kh, kw, stride, padding) if x.requires_grad else None
        gb = g2.sum(axis=0) if b is not None and b.requires_grad else None
        return gx, gw, gb

    return _make("conv2d", out, (x, w, b) if b is not None else (x, w), bw)


def conv_transpose2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1,
                     padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d`; ``w`` has shape (C_in, C_out, kh, kw)."""
    _check_conv("conv_transpose2d", x, w, 0)
    N, C, H, W = x.shape
    _, F, kh, kw = w.shape
    oh = (H - 1) * stride - 2 * padding + kh
    ow = (W - 1) * stride - 2 * padding + kw
    if oh < 1 or ow < 1:
        raise ShapeError("conv_transpose2d", x.shape, w.shape, detail="empty output")
    xm = x.data.transpose(0, 2, 3, 1).reshape(-1, C)
    wmat = w.data.reshape(C, -1)
    out = col2im(xm @ wmat, (N, F, oh, ow), kh, kw, stride, padding)
    if b is not None:
        out += b.data.reshape(1, F, 1, 1)

    def bw(g):
        gcols = im2col(g, kh, kw, stride, padding)
        gw = (xm.T @ gcols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gx = np.ascontiguousarray((gcols @ wmat.T).reshape(N, H, W, C).transpose(0, 3, 1, 2))
        gb = g.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        return gx, gw, gb

    return _make("conv_transpose2d", out, (x, w, b) if b is not None else (x, w), bw)


def avg_pool2d(x: Tensor, k: int = 2) -> Tensor:
    if x.ndim != 4 or x.shape[2] % k or x.shape[3] % k:
        raise ShapeError("avg_pool2d", x.shape, detail=f"spatial dims must divide by {k}")
    N, C, H, W = x.shape
    # strided slice sums are much faster than reshape().mean() here
    out = np.zeros((N, C, H // k, W // k), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            out += x.data[:, :, i::k, j::k]
    out *= x.dtype.type(1.0 / (k * k))

    def bw(g):
        g = (g * x.dtype.type(1.0 / (k * k)))[:, :, :, None, :, None]
        return (np.broadcast_to(g, (N, C, H // k, k, W // k, k)).reshape(x.shape),)

    return _make("avg_pool2d", out, (x,), bw)


def max_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k x k max pooling; ties send the gradient to the first maximum."""
    if x.ndim != 4 or x.shape[2] % k or x.shape[3] % k:
        raise ShapeError("max_pool2d", x.shape, detail=f"spatial dims must divide by {k}")
    N, C, H, W = x.shape
    out = x.data[:, :, 0::k, 0::k].copy()
    arg = np.zeros(out.shape, dtype=np.int8)
    for i in range(k):
        for j in range(k):
            if i == j == 0:
                continue
            v = x.data[:, :, i::k, j::k]
            better = v > out
            out = np.where(better, v, out)
            arg[better] = i * k + j

    def bw(g):
        gx = np.zeros(x.shape, dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                gx[:, :, i::k, j::k] = np.where(arg == i * k + j, g, 0)
        return (gx,)

    return _make("max_pool2d", out, (x,), bw)


# -- probabilities -----------------------------------------------------------

def _log_softmax_np(z: np.ndarray, axis: int = -1) -> np.ndarray:
    m = z.max(axis=axis, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    out = np.exp(_log_softmax_np(a.data, axis))

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make("softmax", out, (a,), bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    out = _log_softmax_np(a.data, axis)
    p = np.exp(out)
    return _make("log_softmax", out, (a,),
                 lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Mean (or per-item with ``reduction='none'``) of ``-log softmax(logits)[label]``."""
    if logits.ndim != 2:
        raise ShapeError("cross_entropy", logits.shape, detail="logits must be (N, C)")
    labels = np.asarray(labels)
    N, C = logits.shape
    if labels.shape != (N,):
        raise ShapeError("cross_entropy", logits.shape, labels.shape, detail="one label per row")
    if labels.size and (labels.min() < 0 or labels.max() >= C or
                        not np.issubdtype(labels.dtype, np.integer)):
        raise ValueError(f"cross_entropy: labels must be integers in [0, {C})")
    logp = _log_softmax_np(logits.data, axis=1)
    rows = np.arange(N)
    per_item = -logp[rows, labels]
    p = np.exp(logp)

    if reduction == "none":
        def bw(g):
            gz = p.copy()
            gz[rows, labels] -= 1
            return (gz * g[:, None],)
        return _make("cross_entropy", per_item.astype(logits.dtype), (logits,), bw)
    if reduction != "mean":
        raise ValueError(f"unknown reduction {reduction!r}")

    def bw(g):
        gz = p.copy()
        gz[rows, labels] -= 1
        return (gz * (g / N),)

    return _make("cross_entropy", np.asarray(per_item.mean(), dtype=logits.dtype), (logits,), bw)


# -- checks ------------------------------------------------------------------

def check_finite(t: Union[Tensor, np.ndarray], what: str = "tensor") -> None:
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if not np.all(np.isfinite(data)):
        bad = int(np.size(data) - np.count_nonzero(np.isfinite(data)))
        raise NonFiniteError(f"{what}: {bad} non-finite value(s)")


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def numerical_grad(fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-3,
                   indices: Optional[Iterable[int]] = None) -> np.ndarray:
    """Central finite differences of scalar ``fn`` at ``x`` (float64 recommended).

    ``indices`` restricts the probe to selected flat positions; the rest of
    the returned gradient is left at zero.
    """
    x = np.array(x, dtype=np.float64 if x.dtype == np.float64 else x.dtype, copy=True)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(x)
        flat[i] = orig - h
        fm = fn(x)
        flat[i] = orig
        grad[i] = (fp - fm) / (2 * h)
    return grad.reshape(x.shape)
