"""Small reverse-mode autodiff engine over float64 numpy arrays.

A :class:`Node` wraps an array value together with the nodes it was computed
from and a closure mapping the output gradient to parent gradients.  Only the
handful of operations needed by the toy transformers are provided.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

NEG_INF = -np.inf


class Node:
    __slots__ = ("value", "parents", "backward", "name")

    def __init__(self, value, parents: Sequence["Node"] = (), backward=None, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self.backward = backward
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node{label}(shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Node):
            raise TypeError("division by a Node is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def constant(x) -> Node:
    return Node(np.array(x, dtype=np.float64, copy=True))


def parameter(x, name: str) -> Node:
    return Node(np.array(x, dtype=np.float64, copy=True), name=name)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    sa, sb = a.value.shape, b.value.shape
    return Node(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a) -> Node:
    a = as_node(a)
    return Node(-a.value, (a,), lambda g: (-g,))


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    return Node(av * bv, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def exp(a) -> Node:
    a = as_node(a)
    out = np.exp(a.value)
    return Node(out, (a,), lambda g: (g * out,))


def log(a) -> Node:
    a = as_node(a)
    av = a.value
    return Node(np.log(av), (a,), lambda g: (g / av,))


def relu(a) -> Node:
    a = as_node(a)
    keep = a.value > 0
    return Node(np.where(keep, a.value, 0.0), (a,), lambda g: (g * keep,))


def sigmoid(a) -> Node:
    a = as_node(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return Node(out, (a,), lambda g: (g * out * (1.0 - out),))


def clip(a, lo: float, hi: float) -> Node:
    """Clamp values; gradient is passed only where the input was inside [lo, hi]."""
    a = as_node(a)
    inside = (a.value >= lo) & (a.value <= hi)
    return Node(np.clip(a.value, lo, hi), (a,), lambda g: (g * inside,))


# ------------------------------------------------------------------ reshaping


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value

    def backward(g):
        if bv.ndim == 1:
            ga = np.multiply.outer(g, bv)
        else:
            ga = g @ np.swapaxes(bv, -1, -2)
        if av.ndim == 1:
            gb = np.multiply.outer(av, g)
        else:
            gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return Node(av @ bv, (a, b), backward)


def reshape(a, shape) -> Node:
    a = as_node(a)
    old = a.value.shape
    return Node(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes) -> Node:
    a = as_node(a)
    inverse = np.argsort(axes)
    return Node(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inverse),))


def take(a, index) -> Node:
    """Numpy indexing (basic or advanced) with a scatter-add backward."""
    a = as_node(a)
    shape = a.value.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return Node(a.value[index], (a,), backward)


def gather_rows(a, index: np.ndarray) -> Node:
    """Select rows of a 2-D node by integer index; ``-1`` yields a zero row."""
    a = as_node(a)
    index = np.asarray(index)
    valid = index >= 0
    safe = np.where(valid, index, 0)
    if a.value.shape[0] == 0:
        value = np.zeros(index.shape + a.value.shape[1:])
    else:
        value = a.value[safe] * valid[..., None]

    def backward(g):
        out = np.zeros_like(a.value)
        np.add.at(out, safe[valid], g[valid])
        return (out,)

    return Node(value, (a,), backward)


def concat(nodes: Sequence, axis: int = 0) -> Node:
    nodes = [as_node(n) for n in nodes]
    sizes = [n.value.shape[axis] for n in nodes]
    cuts = np.cumsum(sizes)[:-1]
    return Node(
        np.concatenate([n.value for n in nodes], axis=axis),
        nodes,
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


# ----------------------------------------------------------------- reductions


def sum_(a, axis=None, keepdims: bool = False) -> Node:
    a = as_node(a)
    shape = a.value.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Node(a.value.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis=None) -> Node:
    a = as_node(a)
    count = a.value.size if axis is None else a.value.shape[axis]
    return sum_(a, axis=axis) * (1.0 / count)


def logsumexp(a, axis: int = -1) -> Node:
    """Log-sum-exp reduction; rows that are entirely ``-inf`` reduce to ``-inf``
    and receive zero gradient."""
    a = as_node(a)
    av = a.value
    peak = np.max(av, axis=axis, keepdims=True)
    finite_peak = np.where(np.isfinite(peak), peak, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(av - finite_peak), axis=axis, keepdims=True)) + finite_peak

    def backward(g):
        g = np.expand_dims(g, axis)
        with np.errstate(invalid="ignore"):
            weights = np.where(np.isfinite(out), np.exp(av - out), 0.0)
        return (g * weights,)

    return Node(np.squeeze(out, axis=axis), (a,), backward)


def log_softmax(a, axis: int = -1) -> Node:
    a = as_node(a)
    av = a.value
    shifted = av - av.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probs = np.exp(out)
    return Node(out, (a,), lambda g: (g - probs * g.sum(axis=axis, keepdims=True),))


def masked_softmax(scores, mask) -> Node:
    """Softmax over the last axis restricted to entries where ``mask`` is true.

    Disallowed entries come out exactly zero.  A row with no allowed entry
    raises ``ValueError`` since it means the query has nothing to attend to.
    """
    scores = as_node(scores)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), scores.value.shape)
    if not mask.any(axis=-1).all():
        raise ValueError("attention mask has a fully masked row")
    masked = np.where(mask, scores.value, NEG_INF)
    shifted = masked - masked.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    return Node(out, (scores,), lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),))


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Node:
    a, gain, bias = as_node(a), as_node(gain), as_node(bias)
    av = a.value
    mu = av.mean(axis=-1, keepdims=True)
    centered = av - mu
    inv = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    gv = gain.value

    def backward(g):
        gx = g * gv
        ga = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        gg = _unbroadcast(g * xhat, gv.shape)
        gb = _unbroadcast(g, bias.value.shape)
        return ga, gg, gb

    return Node(xhat * gv + bias.value, (a, gain, bias), backward)


# ------------------------------------------------------------------- backward


def _topological(root: Node) -> list[Node]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node.parents):
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backprop(loss: Node) -> dict[int, np.ndarray]:
    """Gradients of a scalar ``loss`` keyed by ``id(node)``."""
    if loss.value.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(_topological(loss)):
        g = grads.get(id(node))
        if g is None or node.backward is None:
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return grads


def gradient(loss: Node, params: Mapping[str, Node]) -> dict[str, np.ndarray]:
    """d loss / d param for every tracked parameter; untouched ones get zeros."""
    grads = backprop(loss)
    out = {}
    for name, node in params.items():
        g = grads.get(id(node))
        out[name] = np.zeros_like(node.value) if g is None else np.asarray(g, dtype=np.float64).reshape(node.value.shape)
    return out


def make_parameters(arrays: Mapping[str, np.ndarray]) -> dict[str, Node]:
    return {name: parameter(value, name) for name, value in arrays.items()}


def finite_difference_check(
    loss_fn: Callable[[Mapping[str, Node]], Node],
    params: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Compare :func:`gradient` against central differences.

    The error for each named tensor is ``max|analytic - numeric|`` divided by
    ``max(max|analytic|, max|numeric|, 1e-12)``; the largest over tensors is
    returned.  ``max_entries`` limits how many coordinates per tensor are
    probed (chosen with a seeded generator).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}

    def evaluate(arrays) -> float:
        value = loss_fn(make_parameters(arrays)).value
        if value.size != 1:
            raise ValueError("loss must be scalar")
        return float(value)

    nodes = make_parameters(base)
    loss = loss_fn(nodes)
    analytic = gradient(loss, nodes)
    if evaluate(base) != float(loss.value) or evaluate(base) != float(loss.value):
        raise RuntimeError("loss_fn is not deterministic")

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, value in base.items():
        flat_count = value.size
        coords = np.arange(flat_count)
        if max_entries is not None and flat_count > max_entries:
            coords = np.sort(rng.choice(flat_count, size=max_entries, replace=False))
        numeric = np.empty(len(coords))
        for n, c in enumerate(coords):
            idx = np.unravel_index(c, value.shape)
            orig = value[idx]
            value[idx] = orig + eps
            up = evaluate(base)
            value[idx] = orig - eps
            down = evaluate(base)
            value[idx] = orig
            numeric[n] = (up - down) / (2 * eps)
        a = analytic[name].reshape(-1)[coords]
        scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(numeric), initial=0.0), 1e-12)
        worst = max(worst, float(np.max(np.abs(a - numeric), initial=0.0) / scale))
    return worst


def all_finite(arrays: Iterable[np.ndarray]) -> bool:
    return all(np.isfinite(a).all() for a in arrays)
