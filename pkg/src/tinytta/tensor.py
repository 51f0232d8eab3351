"""Reverse-mode autodiff over dense float64 arrays.

The operator set is exactly what the dual-encoder forward passes and the
adaptation losses need, nothing more. Arrays are numpy float64 end to end;
graphs are built eagerly and become garbage once the outputs go out of scope.
All ops are deterministic: same inputs, same bits.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

LAYER_NORM_EPS = 1e-5

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Operand shapes incompatible for an op."""


def _shape_error(op: str, *shapes) -> ShapeError:
    listed = " and ".join(str(tuple(s)) for s in shapes)
    return ShapeError(f"{op}: incompatible shapes {listed}")


class Tensor:
    """Dense float64 array plus an optional gradient buffer.

    Tensors produced by ops remember their parents and a backward closure;
    backward() on a scalar fills .grad for every reachable tensor that
    requires_grad. Gradients accumulate additively, so fan-out is handled
    by repeated += into the same buffer.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all lift plain numbers/arrays to constant tensors
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __neg__(self):
        return scale(self, -1.0)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, axes=None) -> "Tensor":
        return transpose(self, axes)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    """Wrap an array as a graph constant (no gradient)."""
    return _lift(x)


def _from_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        raise _shape_error("grad-accumulate", g.shape, t.data.shape)
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape`, inverting numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar loss through the graph below it."""
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward() on a tensor with no graph attached")

    # iterative topological order; recursion would overflow on deep graphs
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise _shape_error(op, a.shape, b.shape) from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)

    def back(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.shape))

    return _from_op(a.data + b.data, (a, b), back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)

    def back(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.shape))

    return _from_op(a.data - b.data, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)

    def back(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _from_op(a.data * b.data, (a, b), back)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("div", a, b)

    def back(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _from_op(a.data / b.data, (a, b), back)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def back(g):
        _accumulate(a, g * c)

    return _from_op(a.data * c, (a,), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise _shape_error("matmul", a.shape, b.shape)
    if a.shape[-1] != b.shape[-2]:
        raise _shape_error("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise _shape_error("matmul", a.shape, b.shape) from None

    def back(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            _accumulate(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            _accumulate(b, _unbroadcast(gb, b.shape))

    return _from_op(a.data @ b.data, (a, b), back)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def back(g):
        _accumulate(a, g * out_data)

    return _from_op(out_data, (a,), back)


def log(a: Tensor) -> Tensor:
    def back(g):
        _accumulate(a, g / a.data)

    return _from_op(np.log(a.data), (a,), back)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def back(g):
        _accumulate(a, g * 0.5 / out_data)

    return _from_op(out_data, (a,), back)


def xlogx(a: Tensor) -> Tensor:
    """x*log(x) with the 0*log(0)=0 convention; gradient is 0 where x == 0."""
    positive = a.data > 0.0
    safe = np.where(positive, a.data, 1.0)
    out_data = np.where(positive, a.data * np.log(safe), 0.0)

    def back(g):
        _accumulate(a, g * np.where(positive, np.log(safe) + 1.0, 0.0))

    return _from_op(out_data, (a,), back)


def _axis_tuple(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _axis_tuple(axis, a.ndim)
    out_data = a.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axes) if axes else gg
        _accumulate(a, np.broadcast_to(gg, a.shape).copy())

    return _from_op(out_data, (a,), back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axis_tuple(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    out_data = a.data.mean(axis=axes, keepdims=keepdims)

    def back(g):
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axes) if axes else gg
        _accumulate(a, np.broadcast_to(gg, a.shape) / count)

    return _from_op(out_data, (a,), back)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        _accumulate(a, out_data * (g - inner))

    return _from_op(out_data, (a,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, axis: int = -1) -> Tensor:
    """Normalize along `axis` with population variance, then affine scale/shift.

    Epsilon (1e-5) is added to the variance before the square root.
    """
    ax = axis % x.ndim
    n = x.shape[ax]
    if gain.data.size != n or bias.data.size != n:
        raise _shape_error("layer_norm", x.shape, gain.shape, bias.shape)
    bshape = [1] * x.ndim
    bshape[ax] = n
    gshaped = gain.data.reshape(bshape)
    bshaped = bias.data.reshape(bshape)

    mu = x.data.mean(axis=ax, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=ax, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = xc * inv
    out_data = xhat * gshaped + bshaped

    def back(g):
        if gain.requires_grad:
            _accumulate(gain, _unbroadcast(g * xhat, tuple(bshape)).reshape(gain.shape))
        if bias.requires_grad:
            _accumulate(bias, _unbroadcast(g, tuple(bshape)).reshape(bias.shape))
        if x.requires_grad:
            gxhat = g * gshaped
            m1 = gxhat.mean(axis=ax, keepdims=True)
            m2 = (gxhat * xhat).mean(axis=ax, keepdims=True)
            _accumulate(x, inv * (gxhat - m1 - xhat * m2))

    return _from_op(out_data, (x, gain, bias), back)


def gelu(a: Tensor) -> Tensor:
    """Exact erf-based GELU."""
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    out_data = a.data * cdf

    def back(g):
        pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT_2PI
        _accumulate(a, g * (cdf + a.data * pdf))

    return _from_op(out_data, (a,), back)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(ax % a.ndim for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise _shape_error(f"transpose(axes={axes})", a.shape)
    inverse = tuple(np.argsort(axes))

    def back(g):
        _accumulate(a, np.transpose(g, inverse))

    return _from_op(np.transpose(a.data, axes), (a,), back)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out_data = a.data.reshape(shape)
    except ValueError:
        raise _shape_error(f"reshape(to={shape})", a.shape) from None

    def back(g):
        _accumulate(a, g.reshape(a.shape))

    return _from_op(out_data, (a,), back)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = list(tensors)
    if not parts:
        raise ValueError("concat: need at least one tensor")
    ax = axis % parts[0].ndim
    base = list(parts[0].shape)
    for p in parts[1:]:
        other = list(p.shape)
        if len(other) != len(base) or other[:ax] + other[ax + 1:] != base[:ax] + base[ax + 1:]:
            raise _shape_error("concat", parts[0].shape, p.shape)
    sizes = [p.shape[ax] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for p, start, stop in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(int(start), int(stop))
                _accumulate(p, g[tuple(sl)])

    return _from_op(np.concatenate([p.data for p in parts], axis=ax), tuple(parts), back)


def take(a: Tensor, index: int, axis: int) -> Tensor:
    """Select one slice along `axis` (the axis is removed)."""
    ax = axis % a.ndim
    if not 0 <= index < a.shape[ax]:
        raise _shape_error(f"take(index={index}, axis={axis})", a.shape)
    sl = [slice(None)] * a.ndim
    sl[ax] = index

    def back(g):
        ga = np.zeros_like(a.data)
        ga[tuple(sl)] = g
        _accumulate(a, ga)

    return _from_op(a.data[tuple(sl)].copy(), (a,), back)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of `length` along `axis` (axis kept)."""
    ax = axis % a.ndim
    if start < 0 or length < 1 or start + length > a.shape[ax]:
        raise _shape_error(f"narrow(axis={axis}, start={start}, length={length})", a.shape)
    sl = [slice(None)] * a.ndim
    sl[ax] = slice(start, start + length)

    def back(g):
        ga = np.zeros_like(a.data)
        ga[tuple(sl)] = g
        _accumulate(a, ga)

    return _from_op(a.data[tuple(sl)].copy(), (a,), back)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup into `table` by integer ids; gradient scatter-adds."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError(f"embedding: ids must be integers, got {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding: id out of range for table of {table.shape[0]} rows")

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        _accumulate(table, gt)

    return _from_op(table.data[ids].copy(), (table,), back)


def l2_normalize(a: Tensor, axis: int = -1) -> Tensor:
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    out_data = a.data / norm

    def back(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        _accumulate(a, (g - out_data * inner) / norm)

    return _from_op(out_data, (a,), back)


class Adam:
    """Adam with bias correction over named parameters.

    step() applies one update in parameter order, then zeroes the grads it
    consumed. A parameter with no grad is an error, named in the message.
    """

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params: list[tuple[str, Tensor]] = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.first_moment = {name: np.zeros_like(t.data) for name, t in self.params}
        self.second_moment = {name: np.zeros_like(t.data) for name, t in self.params}

    def step(self) -> None:
        for name, t in self.params:
            if t.grad is None:
                raise RuntimeError(f"adam: parameter '{name}' has no gradient")
        self.step_count += 1
        b1c = 1.0 - self.beta1 ** self.step_count
        b2c = 1.0 - self.beta2 ** self.step_count
        for name, t in self.params:
            g = t.grad
            m = self.first_moment[name]
            v = self.second_moment[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            t.data -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            t.grad = None
