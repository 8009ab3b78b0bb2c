"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op builds its result with :func:`_node`, recording the parent tensors and
a closure mapping the upstream gradient to one gradient per parent. Graph
construction is skipped entirely when no input requires a gradient.

The non-differentiable primitives of the correlation operators (sign, abs,
binarize) carry surrogate backward rules. Inside :func:`smoothed` their
forward pass switches to the antiderivative of the surrogate, which is what
finite-difference checks compare against.
"""

from __future__ import annotations

import contextvars
import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels

DEFAULT_STEEPNESS = 10.0
STE_CLIP = 1.0

_SMOOTH = contextvars.ContextVar("opsearch_smooth_forward", default=False)
_GRAD = contextvars.ContextVar("opsearch_grad_enabled", default=True)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextmanager
def smoothed():
    """Evaluate surrogate ops with the smooth forward matching their backward."""
    token = _SMOOTH.set(True)
    try:
        yield
    finally:
        _SMOOTH.reset(token)


@contextmanager
def no_grad():
    """Build no graph inside the block (evaluation passes)."""
    token = _GRAD.set(False)
    try:
        yield
    finally:
        _GRAD.reset(token)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- basic accessors ----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar -----------------------------------------------------

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
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        if exponent != 2:
            raise ValueError("only squaring is supported")
        return mul(self, self)

    def __getitem__(self, index):
        return index_select(self, index)

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

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def tanh(self):
        return tanh(self)

    # -- backward -----------------------------------------------------------

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.broadcast_to(np.asarray(grad, dtype=np.float64), self.shape).copy()
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
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


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
    """Reset ``params`` gradients, backpropagate ``loss`` and return the gradients.

    Parameters the loss does not depend on get an explicit zero gradient.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss.backward()
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    return [p.grad for p in params]


# ---------------------------------------------------------------- plumbing


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if _GRAD.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: operand shapes {a.shape} and {b.shape} are not broadcastable") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _node(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "relu": relu,
    "exp": exp,
    "tanh": tanh,
    "negate": neg,
}


def elementwise(op_kind: str, a, b=None) -> Tensor:
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op_kind!r}") from None
    if op_kind in ("add", "sub", "mul"):
        if b is None:
            raise ValueError(f"{op_kind} needs two operands")
        return fn(a, b)
    return fn(a)


# ---------------------------------------------------------------- linear algebra & shape


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ ({a.shape[1]} vs {b.shape[0]})")
    ad, bd = a.data, b.data
    return _node(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), back)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {old} into {tuple(shape)}") from None
    return _node(out, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inverse = None if axes is None else tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def index_select(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _node(np.array(a.data[index]), (a,), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat along axis {axis}: incompatible shapes {shapes}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _node(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


# ---------------------------------------------------------------- probability


def _check_finite(name: str, data: np.ndarray) -> None:
    if not np.all(np.isfinite(data)):
        raise ValueError(f"{name}: input contains NaN or Inf")


def softmax(v, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with max-subtraction for stability."""
    v = as_tensor(v)
    _check_finite("softmax", v.data)
    z = np.exp(v.data - v.data.max(axis=axis, keepdims=True))
    s = z / z.sum(axis=axis, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _node(s, (v,), back)


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(``logits``)."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [batch, classes] logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    batch, classes = logits.shape
    if labels.shape[0] != batch:
        raise ShapeError(f"cross_entropy: {batch} rows but {labels.shape[0]} labels")
    bad = (labels < 0) | (labels >= classes)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise ValueError(f"label {int(labels[i])} at row {i} outside [0, {classes})")
    x = logits.data
    shifted = x - x.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(batch)
    loss = np.mean(logz - shifted[rows, labels])

    def back(g):
        p = np.exp(shifted - logz[:, None])
        p[rows, labels] -= 1.0
        return (g * p / batch,)

    return _node(np.asarray(loss), (logits,), back)


# ---------------------------------------------------------------- surrogate primitives


def sign_pm1(x: np.ndarray) -> np.ndarray:
    """Sign with sign(0) = +1."""
    return np.where(x >= 0, 1.0, -1.0)


_TWO_OVER_SQRT_PI = 2.0 / math.sqrt(math.pi)


def surrogate_sign(x, k: float = DEFAULT_STEEPNESS) -> Tensor:
    """Exact sign forward; backward is the Gaussian (2k/sqrt(pi)) exp(-(kx)^2)."""
    x = as_tensor(x)
    xd = x.data
    if _SMOOTH.get():
        from scipy.special import erf

        out = erf(k * xd)
    else:
        out = sign_pm1(xd)
    return _node(out, (x,), lambda g: (g * (_TWO_OVER_SQRT_PI * k) * np.exp(-((k * xd) ** 2)),))


def surrogate_abs(x, k: float = DEFAULT_STEEPNESS) -> Tensor:
    """Exact |x| forward; backward is tanh(kx)."""
    x = as_tensor(x)
    xd = x.data
    if _SMOOTH.get():
        kx = np.abs(k * xd)
        out = (kx + np.log1p(np.exp(-2.0 * kx)) - math.log(2.0)) / k
    else:
        out = np.abs(xd)
    return _node(out, (x,), lambda g: (g * np.tanh(k * xd),))


def ste_binarize(w, clip: float = STE_CLIP) -> Tensor:
    """±1 forward (sign(0)=+1); backward passes the gradient where |w| <= clip."""
    w = as_tensor(w)
    wd = w.data
    out = np.clip(wd, -clip, clip) if _SMOOTH.get() else sign_pm1(wd)
    mask = np.abs(wd) <= clip
    return _node(out, (w,), lambda g: (g * mask,))


# ---------------------------------------------------------------- windows


def im2col(x, kh: int, kw: int, stride: int = 1, pad: int = 0) -> Tensor:
    """[N, C, H, W] -> [N*OH*OW, C*kh*kw]; columns ordered (channel, row, col)."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"im2col expects [N, C, H, W], got {x.shape}")
    n, c, h, w = x.shape
    if _kernels.output_size(h, kh, stride, pad) < 1 or _kernels.output_size(w, kw, stride, pad) < 1:
        raise ShapeError(f"kernel {kh}x{kw} (stride {stride}, pad {pad}) does not fit input {h}x{w}")
    shape = x.shape
    cols = _kernels.im2col(x.data, kh, kw, stride, pad)
    return _node(cols, (x,), lambda g: (_kernels.col2im(g, shape, kh, kw, stride, pad),))


def _pool(x, k: int, stride: int, reduce: str) -> Tensor:
    x = as_tensor(x)
    n, c, h, w = x.shape
    oh = _kernels.output_size(h, k, stride, 0)
    ow = _kernels.output_size(w, k, stride, 0)
    if oh < 1 or ow < 1:
        raise ShapeError(f"pool {k}x{k} does not fit input {h}x{w}")
    flat = x.data.reshape(n * c, 1, h, w)
    cols = _kernels.im2col(flat, k, k, stride, 0)
    if reduce == "max":
        arg = cols.argmax(axis=1)
        out = cols[np.arange(cols.shape[0]), arg]
    else:
        out = cols.mean(axis=1)
    out = out.reshape(n, c, oh, ow)

    def back(g):
        gcols = np.zeros_like(cols)
        if reduce == "max":
            gcols[np.arange(cols.shape[0]), arg] = g.reshape(-1)
        else:
            gcols[:] = g.reshape(-1, 1) / (k * k)
        return (_kernels.col2im(gcols, (n * c, 1, h, w), k, k, stride, 0).reshape(n, c, h, w),)

    return _node(out, (x,), back)


def maxpool2d(x, k: int = 2, stride: int | None = None) -> Tensor:
    return _pool(x, k, stride or k, "max")


def avgpool2d(x, k: int = 2, stride: int | None = None) -> Tensor:
    return _pool(x, k, stride or k, "avg")


def global_avgpool(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avgpool expects [N, C, H, W], got {x.shape}")
    return mean(x, axis=(2, 3))
