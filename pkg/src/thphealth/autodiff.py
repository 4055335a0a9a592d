"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every primitive records its parents and a closure mapping the output
gradient to parent gradients; the graph is rebuilt on each forward pass and
walked in reverse topological order by :func:`backward`. Only the primitives
the Hawkes transformer needs are provided.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op")

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not a supported primitive")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def backward(self):
        backward(self)


class Parameter(Tensor):
    """A named leaf tensor that accumulates gradients."""

    __slots__ = ("grad", "name")

    def __init__(self, value, name=""):
        super().__init__(np.array(value, dtype=np.float64), requires_grad=True)
        self.grad = np.zeros_like(self.data)
        self.name = name

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward_fn, op) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op} produced non-finite values")
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward_fn, op)
    return Tensor(data, op=op)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# elementwise and linear primitives


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}") from None
    return _result(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def neg(a) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}") from None
    return _result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes (numpy broadcasting)."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def _bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), _bw, "matmul")


def sin(a) -> Tensor:
    return _result(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


def cos(a) -> Tensor:
    return _result(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), "cos")


def exp(a) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _result(out, (a,), lambda g: (g / a.data,), "log")


def sigmoid_np(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


_TINY = np.finfo(np.float64).tiny


def softplus_np(x, beta=1.0):
    """(1/beta) * log(1 + exp(beta * x)) without overflow.

    The result is floored at the smallest normal double so it stays strictly
    positive where exp(beta * x) would underflow.
    """
    z = beta * np.asarray(x, dtype=np.float64)
    out = (np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))) / beta
    return np.maximum(out, _TINY)


def softplus(a, beta=1.0) -> Tensor:
    if not beta > 0:
        raise ValueError("softplus temperature must be positive")
    out = softplus_np(a.data, beta)
    return _result(out, (a,), lambda g: (g * sigmoid_np(beta * a.data),), "softplus")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """tanh-approximated GELU (smooth, so finite-difference checks stay exact)."""
    x = a.data
    u = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def _bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du),)

    return _result(out, (a,), _bw, "gelu")


def square(a) -> Tensor:
    return _result(a.data**2, (a,), lambda g: (2.0 * g * a.data,), "square")


def squared_error(pred, target) -> Tensor:
    pred, target = _lift(pred), _lift(target)
    return square(pred - target)


# reductions and normalizations


def tsum(a, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), _bw, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def softmax(a, axis=-1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), _bw, "softmax")


def layer_norm(a, scale, shift, eps=1e-5) -> Tensor:
    """Normalize over the last axis, then apply elementwise scale and shift."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc**2).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * scale.data + shift.data
    n = x.shape[-1]

    def _bw(g):
        gx_hat = g * scale.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, scale.shape), _unbroadcast(g, shift.shape)

    if scale.shape != (n,) or shift.shape != (n,):
        raise ValueError("layer_norm: scale/shift must match the last axis")
    return _result(out, (a, scale, shift), _bw, "layer_norm")


# indexing and shape


def embedding(table, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    out = table.data[idx]

    def _bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _result(out, (table,), _bw, "embedding")


def getitem(a, index) -> Tensor:
    out = a.data[index]
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in parts)

    def _bw(g):
        ga = np.zeros_like(a.data)
        if basic:
            ga[index] = g
        else:
            np.add.at(ga, index, g)
        return (ga,)

    return _result(np.array(out), (a,), _bw, "getitem")


def masked_fill(a, mask, value) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, value, a.data)
    return _result(out, (a,), lambda g: (_unbroadcast(np.where(mask, 0.0, g), a.shape),), "masked_fill")


def reshape(a, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def dropout(a, rate, rng, training) -> Tensor:
    """Inverted dropout; identity when not training or rate is 0."""
    if not training or rate <= 0:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _result(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


# reverse pass


def _topological(root: Tensor) -> list[Tensor]:
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(parameter) into every reachable Parameter.grad.

    Gradients add to whatever is already stored, so call ``zero_grad``
    between optimizer steps.
    """
    if loss.data.size != 1:
        raise ValueError("backward requires a scalar loss")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad = node.grad + g
            continue
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


def zero_grad(params) -> None:
    for p in params:
        p.zero_grad()


def finite_diff_check(loss_fn, params, eps=1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` takes no arguments and returns a scalar Tensor computed from
    ``params``. The relative error per coordinate is
    ``|analytic - numeric| / max(1e-8, |numeric|)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    params = list(params)
    if not params:
        return 0.0
    zero_grad(params)
    loss = loss_fn()
    with no_grad():
        again = loss_fn().item()
    if again != loss.item():
        raise RuntimeError("loss_fn is not deterministic")
    backward(loss)
    worst = 0.0
    with no_grad():
        for p in params:
            flat = p.data.reshape(-1)
            analytic = p.grad.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
                numeric = (up - down) / (2 * eps)
                worst = max(worst, abs(analytic[i] - numeric) / max(1e-8, abs(numeric)))
    return worst
