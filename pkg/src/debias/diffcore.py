"""Reverse-mode automatic differentiation over dense float64 arrays.

The graph is built eagerly: every operation allocates a DiffNode holding the
computed value, references to its parents, and a vector-Jacobian callback.
Values are numpy float64 arrays treated as immutable once wrapped. A node can
only reference nodes created before it, so graphs are acyclic by construction,
and the backward pass walks nodes in descending creation order. That fixes the
reduction order and makes runs bit-reproducible.

Shapes are checked eagerly and violations raise ValueError. Elementwise ops
require identical shapes, except mul/div which accept a 0-d operand on either
side (scalar broadcast, needed for map normalization).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

LOG_GUARD = 1e-12

_counter = itertools.count()


def as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class DiffNode:
    """One value in the evaluation graph.

    `vjp` maps the cotangent arriving at this node to a tuple of cotangents
    for the parents (None entries carry no gradient). `requires` is true when
    some tracked leaf is reachable through differentiable edges.
    """

    __slots__ = ("value", "parents", "vjp", "requires", "idx", "name", "grad")

    def __init__(self, value, parents=(), vjp=None, requires=False, name=None):
        self.value = as_f64(value)
        self.parents = tuple(parents)
        self.vjp = vjp
        self.requires = bool(requires)
        self.idx = next(_counter)
        self.name = name
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        tag = self.name or "node"
        return f"DiffNode({tag}, shape={self.value.shape}, idx={self.idx})"


def leaf(value, name=None) -> DiffNode:
    """Gradient-tracked input."""
    return DiffNode(value, requires=True, name=name)


def constant(value, name=None) -> DiffNode:
    """Input that never receives gradient."""
    return DiffNode(value, requires=False, name=name)


def _node(value, parents, vjp) -> DiffNode:
    req = any(p.requires for p in parents)
    return DiffNode(value, parents=parents, vjp=vjp, requires=req)


def _same_shape(a: DiffNode, b: DiffNode, opname: str):
    if a.value.shape != b.value.shape:
        raise ValueError(
            f"{opname}: shape mismatch {a.value.shape} vs {b.value.shape}"
        )


# ---------------------------------------------------------------------------
# ops


def matmul(a: DiffNode, b: DiffNode) -> DiffNode:
    av, bv = a.value, b.value
    if av.ndim not in (1, 2) or bv.ndim not in (1, 2):
        raise ValueError("matmul supports 1-d and 2-d operands only")
    if av.shape[-1] != (bv.shape[0] if bv.ndim >= 1 else None):
        raise ValueError(f"matmul: inner dims {av.shape} @ {bv.shape}")
    out = av @ bv

    def vjp(g):
        if av.ndim == 2 and bv.ndim == 2:
            return g @ bv.T, av.T @ g
        if av.ndim == 2 and bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        if av.ndim == 1 and bv.ndim == 2:
            return bv @ g, np.outer(av, g)
        return g * bv, g * av  # dot product

    return _node(out, (a, b), vjp)


def add(a: DiffNode, b: DiffNode) -> DiffNode:
    _same_shape(a, b, "add")
    return _node(a.value + b.value, (a, b), lambda g: (g, g))


def scale(a: DiffNode, s: float) -> DiffNode:
    s = float(s)
    return _node(a.value * s, (a,), lambda g: (g * s,))


def sub(a: DiffNode, b: DiffNode) -> DiffNode:
    return add(a, scale(b, -1.0))


def _bcast_pair(a: DiffNode, b: DiffNode, opname: str):
    # identical shapes, or a 0-d scalar on either side
    if a.value.shape == b.value.shape:
        return
    if a.value.ndim == 0 or b.value.ndim == 0:
        return
    raise ValueError(f"{opname}: shape mismatch {a.value.shape} vs {b.value.shape}")


def _reduce_to(g, shape):
    if g.shape == shape:
        return g
    return as_f64(np.sum(g))  # only 0-d targets are ever reduced


def mul(a: DiffNode, b: DiffNode) -> DiffNode:
    _bcast_pair(a, b, "mul")
    av, bv = a.value, b.value
    out = av * bv

    def vjp(g):
        return _reduce_to(g * bv, av.shape), _reduce_to(g * av, bv.shape)

    return _node(out, (a, b), vjp)


def div(a: DiffNode, b: DiffNode) -> DiffNode:
    _bcast_pair(a, b, "div")
    av, bv = a.value, b.value
    out = av / bv

    def vjp(g):
        ga = _reduce_to(g / bv, av.shape)
        gb = _reduce_to(-g * av / (bv * bv), bv.shape)
        return ga, gb

    return _node(out, (a, b), vjp)


def relu(a: DiffNode) -> DiffNode:
    av = a.value
    out = np.maximum(av, 0.0)
    # subgradient 0 at the kink
    return _node(out, (a,), lambda g: (g * (av > 0.0),))


def sigmoid_values(v: np.ndarray) -> np.ndarray:
    # clip keeps exp() in range; inactive for |v| <= 40 so gradient checks
    # on ordinary magnitudes are exact
    return 1.0 / (1.0 + np.exp(-np.clip(v, -40.0, 40.0)))


def sigmoid(a: DiffNode) -> DiffNode:
    s = sigmoid_values(a.value)
    return _node(s, (a,), lambda g: (g * s * (1.0 - s),))


def log(a: DiffNode) -> DiffNode:
    """log(max(v, LOG_GUARD)); flat (zero gradient) below the guard."""
    av = a.value
    guarded = np.maximum(av, LOG_GUARD)
    out = np.log(guarded)
    return _node(out, (a,), lambda g: (g * (av > LOG_GUARD) / guarded,))


def absval(a: DiffNode) -> DiffNode:
    av = a.value
    return _node(np.abs(av), (a,), lambda g: (g * np.sign(av),))


def sum_all(a: DiffNode) -> DiffNode:
    av = a.value
    return _node(np.sum(av), (a,), lambda g: (np.broadcast_to(g, av.shape).copy(),))


def mean_all(a: DiffNode) -> DiffNode:
    av = a.value
    n = av.size
    return _node(
        np.mean(av), (a,), lambda g: (np.broadcast_to(g / n, av.shape).copy(),)
    )


def max_all(a: DiffNode) -> DiffNode:
    """Scalar max over all elements; gradient split evenly across ties."""
    av = a.value
    m = np.max(av)

    def vjp(g):
        mask = av == m
        return (g * mask / mask.sum(),)

    return _node(m, (a,), vjp)


def _check_blocked(a: DiffNode, block: int, opname: str):
    if a.value.ndim != 2:
        raise ValueError(f"{opname} expects a 2-d array")
    if block <= 0 or a.value.shape[0] % block:
        raise ValueError(f"{opname}: {a.value.shape[0]} rows not divisible by {block}")


def gap_rows(a: DiffNode, block: int) -> DiffNode:
    """Mean over each consecutive group of `block` rows: (G*block, C) -> (G, C).

    With per-sample feature maps flattened to rows this is global average
    pooling over the spatial grid.
    """
    _check_blocked(a, block, "gap_rows")
    av = a.value
    groups = av.shape[0] // block
    out = av.reshape(groups, block, av.shape[1]).mean(axis=1)
    return _node(out, (a,), lambda g: (np.repeat(g, block, axis=0) / block,))


def max_rows(a: DiffNode, block: int) -> DiffNode:
    """Max over each consecutive group of `block` rows; ties split evenly."""
    _check_blocked(a, block, "max_rows")
    av = a.value
    groups = av.shape[0] // block
    cols = av.shape[1]
    m = av.reshape(groups, block, cols).max(axis=1)

    def vjp(g):
        rep = np.repeat(m, block, axis=0)
        mask = av == rep
        counts = mask.reshape(groups, block, cols).sum(axis=1)
        return (mask * np.repeat(g / counts, block, axis=0),)

    return _node(m, (a,), vjp)


def repeat_rows(a: DiffNode, times: int) -> DiffNode:
    """Repeat each row `times` times: (G, C) -> (G*times, C)."""
    if a.value.ndim != 2:
        raise ValueError("repeat_rows expects a 2-d array")
    if times <= 0:
        raise ValueError("repeat_rows: times must be positive")
    av = a.value
    groups, cols = av.shape
    out = np.repeat(av, times, axis=0)

    def vjp(g):
        return (g.reshape(groups, times, cols).sum(axis=1),)

    return _node(out, (a,), vjp)


def take(a: DiffNode, indices, axis: int = 0) -> DiffNode:
    """Gather rows (axis 0) or columns (axis 1); covers row slicing."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ValueError("take: indices must be 1-d")
    if axis not in (0, 1) or axis >= a.value.ndim:
        raise ValueError(f"take: bad axis {axis} for shape {a.value.shape}")
    av = a.value
    out = np.take(av, idx, axis=axis)

    def vjp(g):
        full = np.zeros_like(av)
        if axis == 0:
            np.add.at(full, idx, g)
        else:
            np.add.at(full.T, idx, g.T)  # duplicate-safe column scatter
        return (full,)

    return _node(out, (a,), vjp)


def concat(nodes, axis: int = 0) -> DiffNode:
    nodes = list(nodes)
    if not nodes:
        raise ValueError("concat of zero nodes")
    vals = [n.value for n in nodes]
    out = np.concatenate(vals, axis=axis)
    sizes = [v.shape[axis] for v in vals]
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.array(p) for p in np.split(g, bounds, axis=axis))

    return _node(out, tuple(nodes), vjp)


def reshape(a: DiffNode, shape) -> DiffNode:
    av = a.value
    out = av.reshape(shape)
    return _node(out, (a,), lambda g: (g.reshape(av.shape),))


def stop_gradient(a: DiffNode) -> DiffNode:
    """Identity on values, barrier for gradients.

    The parent link is kept so nodes behind the barrier still show up in the
    gradient map, with all-zero gradients.
    """
    return DiffNode(
        a.value, parents=(a,), vjp=lambda g: (None,), requires=False, name=a.name
    )


# ---------------------------------------------------------------------------
# backward pass


def eval_backward(root: DiffNode) -> dict:
    """Reverse-mode sweep from a scalar root.

    Returns {leaf DiffNode: gradient array} for every gradient-tracked leaf
    reachable from the root, including leaves cut off by stop_gradient (those
    get zeros). Also fills `.grad` on every reachable tracked node.
    """
    if root.value.ndim != 0:
        raise ValueError(f"backward root must be scalar, got shape {root.value.shape}")

    reachable = []
    seen = set()
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        reachable.append(node)
        stack.extend(node.parents)

    # parents always precede children in creation order
    reachable.sort(key=lambda n: n.idx, reverse=True)

    grads: dict[int, np.ndarray] = {id(root): np.ones(())}
    for node in reachable:
        g = grads.get(id(node))
        if g is None or node.vjp is None or not node.parents:
            continue
        if not any(p.requires for p in node.parents):
            continue
        parts = node.vjp(g)
        for parent, pg in zip(node.parents, parts):
            if pg is None or not parent.requires:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg

    out = {}
    for node in reachable:
        if not node.requires:
            continue
        node.grad = grads.get(id(node))
        if node.grad is None:
            node.grad = np.zeros_like(node.value)
        if not node.parents:
            out[node] = node.grad
    return out


# ---------------------------------------------------------------------------
# gradient checking and SGD


def finite_diff_check(build, params: dict, eps: float = 1e-5, wrt=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    `build` maps {name: DiffNode} to a scalar DiffNode and must be
    deterministic. `params` holds the base point as float64 arrays. `wrt`
    restricts the check to a subset of names (useful when some parameter is
    deliberately behind a stop_gradient and its analytic gradient is zero by
    design rather than by calculus).
    """
    if not 0.0 < eps <= 1e-3:
        raise ValueError("eps must be in (0, 1e-3]")
    base = {k: as_f64(v) for k, v in params.items()}
    names = sorted(base) if wrt is None else list(wrt)

    leaves = {k: leaf(v, name=k) for k, v in base.items()}
    root = build(leaves)
    gmap = eval_backward(root)
    analytic = {k: gmap[leaves[k]] for k in names}

    def value_at(point) -> float:
        r = build({k: leaf(v, name=k) for k, v in point.items()})
        v = float(r.value)
        if not math.isfinite(v):
            raise ValueError("non-finite loss during finite-difference probe")
        return v

    worst = 0.0
    for k in names:
        flat = base[k].reshape(-1)
        aflat = as_f64(analytic[k]).reshape(-1)
        for i in range(flat.size):
            plus = base[k].copy().reshape(-1)
            plus[i] += eps
            minus = base[k].copy().reshape(-1)
            minus[i] -= eps
            fp = value_at({**base, k: plus.reshape(base[k].shape)})
            fm = value_at({**base, k: minus.reshape(base[k].shape)})
            numeric = (fp - fm) / (2.0 * eps)
            a = aflat[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
            worst = max(worst, rel)
    return worst


def sgd_step(params: dict, grads: dict, lr: float) -> dict:
    """p <- p - lr * g for every entry; keys and shapes must line up."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    out = {}
    for k, p in params.items():
        g = grads[k]
        if np.shape(g) != np.shape(p):
            raise ValueError(f"sgd_step: grad shape {np.shape(g)} vs param {np.shape(p)} for {k!r}")
        out[k] = p - lr * as_f64(g)
    return out


@dataclass(frozen=True)
class SgdConfig:
    initial_lr: float
    decay_factor: float
    decay_every: int

    def __post_init__(self):
        if self.initial_lr <= 0:
            raise ValueError("initial_lr must be positive")
        if not 0.0 < self.decay_factor < 1.0:
            raise ValueError("decay_factor must be in (0, 1)")
        if self.decay_every <= 0:
            raise ValueError("decay_every must be a positive epoch count")

    def lr_at(self, epoch: int) -> float:
        return self.initial_lr * self.decay_factor ** (epoch // self.decay_every)
