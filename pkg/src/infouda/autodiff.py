"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Graphs are built define-by-run: every operation on a tape-attached
:class:`Tensor` records a :class:`Node` holding its parents and a local
vector-Jacobian rule.  The rules are themselves written with Tensor ops, so
running them with ``create_graph=True`` yields a differentiable gradient and
therefore exact Hessian-vector products.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Suspend tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def _grad_mode(enabled: bool):
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = enabled
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@dataclass(eq=False)
class Node:
    op: str
    parents: tuple["Tensor", ...]
    vjp: Callable[["Tensor"], tuple["Tensor | None", ...]] | None


class Tensor:
    """Dense float64 array, optionally attached to a tape."""

    __slots__ = ("data", "node", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.node: Node | None = Node("leaf", (), None) if requires_grad else None

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
    def requires_grad(self) -> bool:
        return self.node is not None

    @property
    def is_leaf(self) -> bool:
        return self.node is not None and self.node.op == "leaf"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = ", tape" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    # operator sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, o): return matmul(self, o)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self): return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, parents: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.node = None
    if _GRAD_ENABLED and any(p.node is not None for p in parents):
        out.node = Node(op, parents, vjp)
    return out


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


# ----------------------------------------------------------------------------
# broadcasting helpers (differentiable pair)


def sum_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reduce a broadcast result back to ``shape``."""
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1
    )
    data = x.data.sum(axis=axes, keepdims=True)
    if lead:
        data = data.reshape(data.shape[lead:])
    data = data.reshape(shape)
    src = x.shape
    return _make(data, "sum_to", (x,), lambda g: (broadcast_to(g, src),))


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    src = x.shape
    data = np.broadcast_to(x.data, shape).copy()
    return _make(data, "broadcast_to", (x,), lambda g: (sum_to(g, src),))


# ----------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, "add", (a, b), lambda g: (sum_to(g, sa), sum_to(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, "sub", (a, b), lambda g: (sum_to(g, sa), sum_to(neg(g), sb)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, "neg", (a,), lambda g: (neg(g),))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data * b.data, "mul", (a, b),
                 lambda g: (sum_to(mul(g, b), sa), sum_to(mul(g, a), sb)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    _check_finite("div", out)
    sa, sb = a.shape, b.shape

    def vjp(g):
        ga = sum_to(div(g, b), sa)
        gb = sum_to(neg(div(mul(g, a), mul(b, b))), sb)
        return ga, gb

    return _make(out, "div", (a, b), vjp)


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, "square", (a,), lambda g: (mul(g, mul(a, 2.0)),))


def _check_finite(op: str, data: np.ndarray):
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op}: non-finite result")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    _check_finite("exp", out)
    res = _make(out, "exp", (a,), None)
    if res.node is not None:
        res.node.vjp = lambda g: (mul(g, exp(a)),)
    return res


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise FloatingPointError("log: argument has non-positive entries")
    return _make(np.log(a.data), "log", (a,), lambda g: (div(g, a),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = (a.data > 0).astype(np.float64)
    return _make(a.data * mask, "relu", (a,), lambda g: (mul(g, mask),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def vjp(g):
        s = sigmoid(a)
        return (mul(g, mul(s, sub(1.0, s))),)

    return _make(out, "sigmoid", (a,), vjp)


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _make(out, "softplus", (a,), lambda g: (mul(g, sigmoid(a)),))


# ----------------------------------------------------------------------------
# reductions and shape ops


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    src = a.shape
    kept = tuple(1 if i in axes else s for i, s in enumerate(src))

    def vjp(g):
        return (broadcast_to(reshape(g, kept), src),)

    return _make(np.asarray(out, dtype=np.float64), "sum", (a,), vjp)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(tsum(a, axis, keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from None
    src = a.shape
    return _make(out, "reshape", (a,), lambda g: (reshape(g, src),))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D tensor, got shape {a.shape}")
    return _make(a.data.T.copy(), "transpose", (a,), lambda g: (transpose(g),))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    out = np.array(a.data[idx], dtype=np.float64)
    src = a.shape
    return _make(out, "getitem", (a,), lambda g: (scatter(g, src, idx),))


def scatter(g, shape, idx) -> Tensor:
    """Place ``g`` at ``idx`` inside a zero tensor of ``shape`` (adjoint of getitem)."""
    g = as_tensor(g)
    out = np.zeros(shape)
    np.add.at(out, idx, g.data)
    return _make(out, "scatter", (g,), lambda h: (getitem(h, idx),))


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def vjp(g):
        res = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(int(lo), int(hi))
            res.append(getitem(g, tuple(sl)))
        return tuple(res)

    return _make(out, "concat", tuple(parts), vjp)


# ----------------------------------------------------------------------------
# linear algebra and composite losses


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expected 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, "matmul", (a, b),
                 lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)))


def logsumexp(a, axis=-1, keepdims=False) -> Tensor:
    a = as_tensor(a)
    ax = axis % a.ndim
    m = np.max(a.data, axis=ax, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(a.data - m), axis=ax, keepdims=True)) + m
    res = out if keepdims else np.squeeze(out, axis=ax)
    src = a.shape

    def vjp(g):
        lse = logsumexp(a, ax, keepdims=True)
        gk = g if keepdims else reshape(g, tuple(1 if i == ax else s for i, s in enumerate(src)))
        return (mul(broadcast_to(gk, src), exp(sub(a, lse))),)

    return _make(res, "logsumexp", (a,), vjp)


def softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    return exp(sub(a, logsumexp(a, axis, keepdims=True)))


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under row-wise softmax of ``logits``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be 2-D, got {logits.shape}")
    if labels.shape != (logits.shape[0],):
        raise ShapeError(
            f"softmax_cross_entropy: {logits.shape[0]} logit rows but labels of shape {labels.shape}")
    target = one_hot(labels, logits.shape[1])
    picked = tsum(mul(logits, target), axis=1)
    return mean(sub(logsumexp(logits, axis=1), picked))


def l2_norm_sq(a) -> Tensor:
    return tsum(square(a))


LOG_2PI = math.log(2.0 * math.pi)


def gaussian_log_density(x, mean_, std) -> Tensor:
    """Diagonal-Gaussian log density, summed over the last axis (broadcasting)."""
    x, mean_, std = as_tensor(x), as_tensor(mean_), as_tensor(std)
    z = div(sub(x, mean_), std)
    d = np.broadcast_shapes(x.shape, mean_.shape, std.shape)[-1]
    quad = tsum(square(z), axis=-1)
    logdet = tsum(log(broadcast_to(std, np.broadcast_shapes(x.shape, mean_.shape, std.shape))), axis=-1)
    return sub(mul(quad, -0.5), add(logdet, 0.5 * d * LOG_2PI))


# ----------------------------------------------------------------------------
# tape and backward


class Tape:
    """Topologically ordered view of the graph below a root.

    ``nodes[k]``'s parents always precede it; a backward sweep walks the list in
    reverse and visits each node once.
    """

    def __init__(self, order: list[Tensor]):
        self.order = order

    @property
    def nodes(self) -> list[Node]:
        return [t.node for t in self.order]

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen or t.node is None:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for p in t.node.parents:
                if p.node is not None and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def is_topological(self) -> bool:
        pos = {id(t): k for k, t in enumerate(self.order)}
        return all(
            pos[id(p)] < pos[id(t)]
            for t in self.order
            for p in t.node.parents
            if p.node is not None
        )


def _accumulate(grads: dict[int, Tensor], t: Tensor, g: Tensor):
    prev = grads.get(id(t))
    grads[id(t)] = g if prev is None else add(prev, g)


def grad(root: Tensor, wrt: Iterable[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of scalar ``root`` with respect to each tensor in ``wrt``.

    Tensors not reachable from ``root`` receive zeros.  With ``create_graph``
    the returned gradients are themselves tape-attached.
    """
    wrt = list(wrt)
    if root.size != 1:
        raise ShapeError(f"backward: root must be a scalar, got shape {root.shape}")
    if root.node is None:
        return [Tensor(np.zeros(w.shape)) for w in wrt]
    tape = Tape.from_root(root)
    grads: dict[int, Tensor] = {id(root): Tensor(np.ones(root.shape))}
    with _grad_mode(create_graph):
        for t in reversed(tape.order):
            g = grads.get(id(t))
            if g is None or t.node.vjp is None:
                continue
            for p, gp in zip(t.node.parents, t.node.vjp(g)):
                if gp is not None and p.node is not None:
                    _accumulate(grads, p, gp)
    out = []
    for w in wrt:
        g = grads.get(id(w))
        out.append(g if g is not None else Tensor(np.zeros(w.shape)))
    return out


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Map every leaf reachable from ``root`` to d root / d leaf."""
    tape = Tape.from_root(root)
    leaves = [t for t in tape.order if t.is_leaf]
    return {leaf: g.data for leaf, g in zip(leaves, grad(root, leaves))}


def value_and_grad(fn: Callable[[Tensor], Tensor], w: np.ndarray) -> tuple[float, np.ndarray]:
    wt = Tensor(w, requires_grad=True)
    out = fn(wt)
    (g,) = grad(out, [wt])
    return out.item(), g.data


def hessian_vector_product(loss_fn: Callable[[Tensor], Tensor], w, v, mode: str = "fd",
                           eps: float | None = None) -> np.ndarray:
    """H(w) @ v for the scalar ``loss_fn``.

    ``mode="exact"`` differentiates the gradient a second time; ``mode="fd"``
    takes a central difference of gradients along ``v``.
    """
    w = np.asarray(w.data if isinstance(w, Tensor) else w, dtype=np.float64)
    v = np.asarray(v.data if isinstance(v, Tensor) else v, dtype=np.float64)
    if v.shape != w.shape:
        raise ShapeError(f"hessian_vector_product: v has shape {v.shape}, w has {w.shape}")
    vnorm = float(np.linalg.norm(v))
    if vnorm == 0.0:
        return np.zeros_like(w)
    if mode == "exact":
        wt = Tensor(w, requires_grad=True)
        (g,) = grad(loss_fn(wt), [wt], create_graph=True)
        (hv,) = grad(tsum(mul(g, v)), [wt])
        return hv.data
    if mode != "fd":
        raise ValueError(f"unknown HVP mode {mode!r}")
    if eps is None:
        eps = math.sqrt(np.finfo(np.float64).eps) * (1.0 + float(np.linalg.norm(w))) / max(vnorm, 1e-12)
    _, gp = value_and_grad(loss_fn, w + eps * v)
    _, gm = value_and_grad(loss_fn, w - eps * v)
    return (gp - gm) / (2.0 * eps)
