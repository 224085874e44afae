"""Dense float64 tensors with a reverse-mode tape.

Every primitive records a forward closure and a vector-Jacobian closure, so a
recorded computation can be differentiated (:func:`grad`) or re-executed
(:meth:`Tape.replay`).  Values are numpy arrays that are never mutated in
place once wrapped.
"""

from __future__ import annotations

import math
import warnings
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Adam",
    "Gradients",
    "NumericalError",
    "Tape",
    "Tensor",
    "add",
    "cayley",
    "cross_entropy",
    "embedding",
    "exp",
    "gelu",
    "getitem",
    "grad",
    "layer_norm",
    "log",
    "log_softmax",
    "matmul",
    "mean",
    "mul",
    "reshape",
    "sigmoid",
    "softmax",
    "sub",
    "tensor",
    "transpose",
    "sum",
]


class NumericalError(ArithmeticError):
    """Raised when an op produces a non-finite value or a singular solve."""


_ACTIVE_TAPES: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "op", "parents", "_fwd", "_vjp", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.op: str | None = None
        self.parents: tuple[Tensor, ...] = ()
        self._fwd: Callable | None = None
        self._vjp: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}{tag})"

    # operator sugar
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
            raise TypeError("division by a Tensor is not a primitive; multiply by a reciprocal")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NumericalError(f"non-finite value produced by {op}")


def _node(op: str, fwd: Callable, vjp: Callable, parents: Sequence[Tensor]) -> Tensor:
    """Run ``fwd`` on parent values and wrap the result as a tape node."""
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        out = fwd(*[p.data for p in parents])
    _check_finite(op, out)  # raises instead of warning
    node = Tensor.__new__(Tensor)
    node.data = out
    node.requires_grad = any(p.requires_grad for p in parents)
    node.op = op
    node.parents = tuple(parents)
    node._fwd = fwd
    node._vjp = vjp
    node.name = None
    for t in _ACTIVE_TAPES:
        t.nodes.append(node)
    return node


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(
        "add",
        np.add,
        lambda g, x, y, out: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        (a, b),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(
        "sub",
        np.subtract,
        lambda g, x, y, out: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
        (a, b),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(
        "mul",
        np.multiply,
        lambda g, x, y, out: (_unbroadcast(g * y, sa), _unbroadcast(g * x, sb)),
        (a, b),
    )


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    sa, sb = a.shape, b.shape

    if b.ndim == 2 and a.ndim > 2:
        # shared weight matrix: fold the batch axes into one 2-D product
        def fwd(x, y):
            return (x.reshape(-1, x.shape[-1]) @ y).reshape(x.shape[:-1] + (y.shape[-1],))

        def vjp(g, x, y, out):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ y.T).reshape(x.shape)
            gb = x.reshape(-1, x.shape[-1]).T @ g2
            return ga, gb

        return _node("matmul", fwd, vjp, (a, b))

    def vjp(g, x, y, out):
        ga = g @ np.swapaxes(y, -1, -2)
        gb = np.swapaxes(x, -1, -2) @ g
        return _unbroadcast(ga, sa), _unbroadcast(gb, sb)

    return _node("matmul", np.matmul, vjp, (a, b))


def sum(x, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = _as_tensor(x)
    shape = x.shape

    def fwd(v):
        return np.sum(v, axis=axis, keepdims=keepdims)

    def vjp(g, v, out):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node("sum", fwd, vjp, (x,))


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = _as_tensor(x)
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = math.prod(x.shape[a] for a in axes)
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    orig = x.shape
    shape = tuple(shape)
    return _node(
        "reshape",
        lambda v: v.reshape(shape),
        lambda g, v, out: (g.reshape(orig),),
        (x,),
    )


def transpose(x, axes=None) -> Tensor:
    x = _as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(
        "transpose",
        lambda v: np.transpose(v, axes),
        lambda g, v, out: (np.transpose(g, inv),),
        (x,),
    )


def getitem(x, key) -> Tensor:
    """Indexing with a constant key (basic or advanced); scatter-add backward."""
    x = _as_tensor(x)
    shape = x.shape

    def vjp(g, v, out):
        full = np.zeros(shape)
        np.add.at(full, key, g)
        return (full,)

    return _node("getitem", lambda v: v[key], vjp, (x,))


def embedding(weight, ids) -> Tensor:
    """Row gather ``weight[ids]``; ``ids`` is a constant integer array."""
    weight = _as_tensor(weight)
    ids = np.asarray(ids, dtype=np.int64)
    shape = weight.shape

    def vjp(g, w, out):
        full = np.zeros(shape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (full,)

    return _node("embedding", lambda w: w[ids], vjp, (weight,))


def exp(x) -> Tensor:
    return _node("exp", np.exp, lambda g, v, out: (g * out,), (_as_tensor(x),))


def log(x) -> Tensor:
    def fwd(v):
        if (v <= 0).any():
            raise NumericalError("log of a non-positive value")
        return np.log(v)

    return _node("log", fwd, lambda g, v, out: (g / v,), (_as_tensor(x),))


def sigmoid(x) -> Tensor:
    def fwd(v):
        return 0.5 * (1.0 + np.tanh(0.5 * v))

    return _node("sigmoid", fwd, lambda g, v, out: (g * out * (1.0 - out),), (_as_tensor(x),))


def softmax(x, axis: int = -1) -> Tensor:
    def fwd(v):
        z = np.exp(v - v.max(axis=axis, keepdims=True))
        return z / z.sum(axis=axis, keepdims=True)

    def vjp(g, v, out):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node("softmax", fwd, vjp, (_as_tensor(x),))


def log_softmax(x, axis: int = -1) -> Tensor:
    def fwd(v):
        s = v - v.max(axis=axis, keepdims=True)
        return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))

    def vjp(g, v, out):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node("log_softmax", fwd, vjp, (_as_tensor(x),))


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    sg, sb = gain.shape, bias.shape

    def fwd(v, w, b):
        mu = v.mean(axis=-1, keepdims=True)
        var = ((v - mu) ** 2).mean(axis=-1, keepdims=True)
        return (v - mu) / np.sqrt(var + eps) * w + b

    def vjp(g, v, w, b, out):
        n = v.shape[-1]
        mu = v.mean(axis=-1, keepdims=True)
        xc = v - mu
        inv = 1.0 / np.sqrt((xc**2).mean(axis=-1, keepdims=True) + eps)
        xhat = xc * inv
        gx_hat = g * w
        gx = inv / n * (n * gx_hat - gx_hat.sum(-1, keepdims=True) - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, sg), _unbroadcast(g, sb)

    return _node("layer_norm", fwd, vjp, (x, gain, bias))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """tanh-approximated GELU."""

    def fwd(v):
        return 0.5 * v * (1.0 + np.tanh(_GELU_C * (v + 0.044715 * (v * v * v))))

    def vjp(g, v, out):
        v2 = v * v
        t = np.tanh(_GELU_C * (v + 0.044715 * (v2 * v)))
        du = _GELU_C * (1.0 + 3 * 0.044715 * v2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t**2) * du),)

    return _node("gelu", fwd, vjp, (_as_tensor(x),))


def cross_entropy(logits, targets, weights=None) -> Tensor:
    """Weighted mean of ``-log softmax(logits)[target]`` over rows.

    ``logits`` is (N, C); ``targets`` (N,) integer classes; ``weights`` (N,)
    optional non-negative row weights (normalised by their sum).
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    n = logits.shape[0]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        raise ValueError("cross_entropy needs a positive total weight")
    rows = np.arange(n)

    def fwd(v):
        s = v - v.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(s).sum(axis=-1))
        return np.array((w * (lse - s[rows, targets])).sum() / total)

    def vjp(g, v, out):
        s = v - v.max(axis=-1, keepdims=True)
        p = np.exp(s)
        p /= p.sum(axis=-1, keepdims=True)
        p[rows, targets] -= 1.0
        return (g * p * (w / total)[:, None],)

    return _node("cross_entropy", fwd, vjp, (logits,))


def cayley(skew_params) -> Tensor:
    """Orthogonal matrix ``(I - A/2)^-1 (I + A/2)`` with ``A = U - U^T``.

    Only the strictly upper-triangular entries of ``skew_params`` are used.
    """
    skew_params = _as_tensor(skew_params)
    d = skew_params.shape[0]
    if skew_params.shape != (d, d):
        raise ValueError("cayley expects a square parameter block")
    eye = np.eye(d)

    def fwd(p):
        u = np.triu(p, 1)
        a = u - u.T
        m = eye - 0.5 * a
        if np.linalg.cond(m) > 1e12:
            raise NumericalError("singular (I - A/2) in cayley")
        return np.linalg.solve(m, eye + 0.5 * a)

    def vjp(g, p, out):
        u = np.triu(p, 1)
        m = eye - 0.5 * (u - u.T)
        ga = np.linalg.solve(m.T, g) @ (eye + out.T) * 0.5
        return (np.triu(ga - ga.T, 1),)

    return _node("cayley", fwd, vjp, (skew_params,))


# ---------------------------------------------------------------- tape / grad


class Tape:
    """Records every node created while active, in execution order."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.remove(self)

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]

    def replay(self, feed: dict[Tensor, np.ndarray] | None = None) -> dict[Tensor, np.ndarray]:
        """Re-execute the recorded ops, optionally with substituted leaf values.

        Returns a map node -> recomputed value.  Nodes are never modified.
        """
        values: dict[int, np.ndarray] = {}
        if feed:
            for t, v in feed.items():
                values[id(t)] = np.asarray(v, dtype=np.float64)
        out = {}
        for node in self.nodes:
            args = [values.get(id(p), p.data) for p in node.parents]
            v = node._fwd(*args)
            _check_finite(node.op, v)
            values[id(node)] = v
            out[node] = v
        return out


class Gradients(dict):
    """param -> gradient Tensor; ``missing`` lists params not reached by the loss."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.missing: list[Tensor] = []


def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
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
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def grad(loss: Tensor, params: Iterable[Tensor]) -> Gradients:
    """Reverse-mode derivatives of a scalar ``loss`` w.r.t. ``params``."""
    if loss.data.size != 1:
        raise ValueError(f"grad needs a scalar loss, got shape {loss.shape}")
    params = list(params)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if loss.requires_grad:
        for node in reversed(_topo(loss)):
            g = grads.get(id(node))
            if g is None or node._vjp is None:
                continue
            parent_grads = node._vjp(g, *[p.data for p in node.parents], node.data)
            for p, pg in zip(node.parents, parent_grads):
                if not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg
    result = Gradients()
    for p in params:
        g = grads.get(id(p))
        if g is None:
            result.missing.append(p)
            g = np.zeros_like(p.data)
        result[p] = Tensor(g)
    if result.missing:
        warnings.warn(f"{len(result.missing)} parameter(s) not on the loss path; zero gradient returned")
    return result


class Adam:
    """Adam with bias correction; replaces ``param.data`` with fresh arrays."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: dict[Tensor, Tensor]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for i, p in enumerate(self.params):
            g = grads[p].data
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
