"""Minimal reverse-mode automatic differentiation on dense float64 tensors.

A :class:`Graph` is an append-only tape. Every operation appends a
:class:`Node` and returns its integer id; ``backward`` sweeps the tape once in
reverse id order. Values are plain ``numpy`` arrays marked read-only.

Only scalar-tensor broadcasting is supported. Anything else that needs a
shape change goes through an explicit op (``repeat``, ``reshape``, ``matmul``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = ["AutodiffError", "Graph", "Node", "gradcheck"]


class AutodiffError(ValueError):
    """Raised for invalid graph construction (shapes, domains, roots)."""


def _freeze(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    arr.flags.writeable = False
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum()).reshape(shape)


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Node:
    id: int
    value: np.ndarray
    op: str
    parents: tuple[int, ...]
    requires_grad: bool
    grad: Optional[np.ndarray] = None
    backward_fn: Optional[BackwardFn] = field(default=None, repr=False)


class Graph:
    """Tape of tensor operations.

    ``seed`` is recorded for provenance and seeds ``graph.rng``, which callers
    may use when an op needs randomness tied to this graph.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self.rng = np.random.default_rng(self.seed)
        self.nodes: list[Node] = []
        self.last_backward_visits = 0

    def __len__(self) -> int:
        return len(self.nodes)

    # -- bookkeeping -----------------------------------------------------

    def _push(self, op, value, parents=(), backward_fn=None, requires_grad=None) -> int:
        if requires_grad is None:
            requires_grad = any(self.nodes[p].requires_grad for p in parents)
        node = Node(
            id=len(self.nodes),
            value=_freeze(value),
            op=op,
            parents=tuple(parents),
            requires_grad=requires_grad,
            backward_fn=backward_fn if requires_grad else None,
        )
        self.nodes.append(node)
        return node.id

    def value(self, node_id: int) -> np.ndarray:
        return self.nodes[node_id].value

    def grad(self, node_id: int) -> np.ndarray:
        node = self.nodes[node_id]
        if node.grad is None:
            return np.zeros_like(node.value)
        return node.grad

    def shape(self, node_id: int) -> tuple:
        return self.nodes[node_id].value.shape

    def zero_grad(self) -> None:
        for node in self.nodes:
            node.grad = None

    # -- leaves ----------------------------------------------------------

    def leaf(self, tensor, requires_grad: bool = False) -> int:
        value = np.asarray(tensor, dtype=np.float64)
        if value.size == 0:
            raise AutodiffError(f"empty tensor of shape {value.shape}")
        if not np.all(np.isfinite(value)):
            raise AutodiffError("leaf values must be finite")
        return self._push("leaf", value, requires_grad=bool(requires_grad))

    def constant(self, tensor) -> int:
        return self.leaf(tensor, requires_grad=False)

    # -- elementwise -----------------------------------------------------

    def _binary_shapes(self, op, a, b):
        sa, sb = self.shape(a), self.shape(b)
        if sa != sb and self.nodes[a].value.size != 1 and self.nodes[b].value.size != 1:
            raise AutodiffError(f"{op}: shape mismatch {sa} vs {sb}")
        return sa, sb

    def add(self, a: int, b: int) -> int:
        sa, sb = self._binary_shapes("add", a, b)

        def backward(g):
            return _unbroadcast(g, sa), _unbroadcast(g, sb)

        return self._push("add", self.value(a) + self.value(b), (a, b), backward)

    def sub(self, a: int, b: int) -> int:
        sa, sb = self._binary_shapes("sub", a, b)

        def backward(g):
            return _unbroadcast(g, sa), _unbroadcast(-g, sb)

        return self._push("sub", self.value(a) - self.value(b), (a, b), backward)

    def mul(self, a: int, b: int) -> int:
        sa, sb = self._binary_shapes("mul", a, b)
        va, vb = self.value(a), self.value(b)

        def backward(g):
            return _unbroadcast(g * vb, sa), _unbroadcast(g * va, sb)

        return self._push("mul", va * vb, (a, b), backward)

    def neg(self, a: int) -> int:
        return self._push("neg", -self.value(a), (a,), lambda g: (-g,))

    def scale(self, a: int, factor: float) -> int:
        """Multiply by a Python constant."""
        factor = float(factor)
        return self._push("scale", self.value(a) * factor, (a,), lambda g: (g * factor,))

    def exp(self, a: int) -> int:
        # may overflow to inf for inputs above ~709
        out = np.exp(self.value(a))
        return self._push("exp", out, (a,), lambda g: (g * out,))

    def log(self, a: int) -> int:
        va = self.value(a)
        if np.any(va <= 0):
            raise AutodiffError("log of non-positive value")
        return self._push("log", np.log(va), (a,), lambda g: (g / va,))

    def relu(self, a: int) -> int:
        mask = (self.value(a) > 0).astype(np.float64)
        return self._push("relu", self.value(a) * mask, (a,), lambda g: (g * mask,))

    def sigmoid(self, a: int) -> int:
        out = 0.5 * (1.0 + np.tanh(0.5 * self.value(a)))
        return self._push("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))

    def tanh(self, a: int) -> int:
        out = np.tanh(self.value(a))
        return self._push("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))

    def elementwise(self, op: str, *operands: int) -> int:
        """Dispatch by op name: add, sub, mul, neg, exp, log, relu, sigmoid, tanh."""
        fn = {
            "add": self.add, "sub": self.sub, "mul": self.mul, "neg": self.neg,
            "exp": self.exp, "log": self.log, "relu": self.relu, "sigmoid": self.sigmoid,
            "tanh": self.tanh,
        }.get(op)
        if fn is None:
            raise AutodiffError(f"unknown elementwise op {op!r}")
        return fn(*operands)

    # -- linear algebra and reductions -------------------------------------

    def matmul(self, a: int, b: int) -> int:
        va, vb = self.value(a), self.value(b)
        if va.ndim != 2 or vb.ndim != 2 or va.shape[1] != vb.shape[0]:
            raise AutodiffError(f"matmul: incompatible shapes {va.shape} @ {vb.shape}")

        def backward(g):
            return g @ vb.T, va.T @ g

        return self._push("matmul", va @ vb, (a, b), backward)

    def sum(self, a: int, axis: Optional[int] = None) -> int:
        va = self.value(a)
        shape = va.shape

        def backward(g):
            if axis is None:
                return (np.broadcast_to(g, shape).copy(),)
            return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

        return self._push("sum", va.sum(axis=axis), (a,), backward)

    def mean(self, a: int, axis: Optional[int] = None) -> int:
        va = self.value(a)
        n = va.size if axis is None else va.shape[axis]
        return self.scale(self.sum(a, axis), 1.0 / n)

    def softmax(self, a: int, axis: int = -1) -> int:
        va = self.value(a)
        z = va - va.max(axis=axis, keepdims=True)
        e = np.exp(z)
        out = e / e.sum(axis=axis, keepdims=True)

        def backward(g):
            return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

        return self._push("softmax", out, (a,), backward)

    def logsumexp(self, a: int, axis: int = -1) -> int:
        va = self.value(a)
        m = va.max(axis=axis, keepdims=True)
        e = np.exp(va - m)
        s = e.sum(axis=axis, keepdims=True)
        out = (m + np.log(s)).squeeze(axis)
        probs = e / s

        def backward(g):
            return (np.expand_dims(g, axis) * probs,)

        return self._push("logsumexp", out, (a,), backward)

    def cross_entropy(self, logits: int, labels) -> int:
        """Softmax cross-entropy.

        A 1-D ``logits`` takes a single integer label; a 2-D ``(B, C)`` batch
        takes ``B`` labels and returns the batch mean.
        """
        v = self.value(logits)
        labels_arr = np.atleast_1d(np.asarray(labels))
        if not np.issubdtype(labels_arr.dtype, np.integer):
            raise AutodiffError("labels must be integers")
        batch = v.reshape(1, -1) if v.ndim == 1 else v
        if v.ndim not in (1, 2) or labels_arr.shape != (batch.shape[0],):
            raise AutodiffError(f"cross_entropy: labels {labels_arr.shape} vs logits {v.shape}")
        n_cls = batch.shape[1]
        if np.any(labels_arr < 0) or np.any(labels_arr >= n_cls):
            raise AutodiffError("label index out of range")
        m = batch.max(axis=1, keepdims=True)
        e = np.exp(batch - m)
        s = e.sum(axis=1, keepdims=True)
        lse = (m + np.log(s))[:, 0]
        rows = np.arange(batch.shape[0])
        losses = lse - batch[rows, labels_arr]
        probs = e / s
        probs[rows, labels_arr] -= 1.0
        probs /= batch.shape[0]

        def backward(g):
            return ((g * probs).reshape(v.shape),)

        return self._push("cross_entropy", losses.mean(), (logits,), backward)

    # -- shape plumbing --------------------------------------------------

    def reshape(self, a: int, shape) -> int:
        va = self.value(a)
        old = va.shape
        return self._push("reshape", va.reshape(shape), (a,), lambda g: (g.reshape(old),))

    def transpose(self, a: int) -> int:
        va = self.value(a)
        if va.ndim != 2:
            raise AutodiffError("transpose expects a matrix")
        return self._push("transpose", va.T, (a,), lambda g: (g.T,))

    def concat(self, ids: Sequence[int], axis: int = 0) -> int:
        values = [self.value(i) for i in ids]
        try:
            out = np.concatenate(values, axis=axis)
        except ValueError as exc:
            raise AutodiffError(f"concat: {exc}") from None
        splits = np.cumsum([v.shape[axis] for v in values])[:-1]

        def backward(g):
            return tuple(np.split(g, splits, axis=axis))

        return self._push("concat", out, tuple(ids), backward)

    def repeat(self, a: int, repeats: int, axis: int = 0) -> int:
        """Repeat each slice along ``axis`` (``np.repeat`` semantics)."""
        va = self.value(a)
        shape = va.shape
        ax = axis % va.ndim

        def backward(g):
            split_shape = shape[:ax] + (shape[ax], repeats) + shape[ax + 1:]
            return (g.reshape(split_shape).sum(axis=ax + 1),)

        return self._push("repeat", np.repeat(va, repeats, axis=ax), (a,), backward)

    # -- gradient routing --------------------------------------------------

    def detach(self, a: int) -> int:
        return self._push("detach", self.value(a), (a,), requires_grad=False)

    def straight_through(self, surrogate: int, hard) -> int:
        """Forward value ``hard``; backward passes the gradient to ``surrogate`` unchanged."""
        hard = np.asarray(hard, dtype=np.float64)
        if hard.shape != self.shape(surrogate):
            raise AutodiffError(
                f"straight_through: hard {hard.shape} vs surrogate {self.shape(surrogate)}"
            )
        return self._push("straight_through", hard, (surrogate,), lambda g: (g,))

    # -- backward ----------------------------------------------------------

    def backward(self, root: int) -> None:
        """Accumulate d(root)/d(node) into ``node.grad`` for every node that requires grad."""
        root_node = self.nodes[root]
        if root_node.value.size != 1:
            raise AutodiffError(f"backward root must be scalar, got shape {root_node.value.shape}")
        adjoints: dict[int, np.ndarray] = {root: np.ones_like(root_node.value)}
        visits = 0
        for nid in range(root, -1, -1):
            visits += 1
            g = adjoints.pop(nid, None)
            if g is None:
                continue
            node = self.nodes[nid]
            if not node.requires_grad:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node.backward_fn is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not self.nodes[parent].requires_grad:
                    continue
                if parent in adjoints:
                    adjoints[parent] = adjoints[parent] + pg
                else:
                    adjoints[parent] = pg
        self.last_backward_visits = visits


def gradcheck(
    fn: Callable[[Graph, int], int],
    point,
    step: float = 1e-5,
) -> float:
    """Compare autodiff against central differences.

    ``fn(graph, x_id)`` must build a scalar from the leaf ``x_id``. Returns
    ``max |autodiff - numeric| / max(1, |numeric|)`` over all coordinates.
    """
    if not step > 0:
        raise ValueError(f"step must be positive, got {step}")
    x = np.array(point, dtype=np.float64)
    g = Graph()
    xid = g.leaf(x, requires_grad=True)
    out = fn(g, xid)
    g.backward(out)
    analytic = g.grad(xid)

    def evaluate(p):
        h = Graph()
        return float(h.value(fn(h, h.leaf(p))).reshape(()))

    numeric = np.empty_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        plus, minus = flat.copy(), flat.copy()
        plus[i] += step
        minus[i] -= step
        numeric.reshape(-1)[i] = (
            evaluate(plus.reshape(x.shape)) - evaluate(minus.reshape(x.shape))
        ) / (2 * step)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))
