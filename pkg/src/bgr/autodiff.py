"""Reverse-mode differentiation over the handful of primitives the pipeline uses.

Values on the tape are 2-D float64 arrays; scalars are (1, 1). Nodes are
appended in creation order, which is a topological order of the DAG, so
``backward`` is a single reverse sweep accumulating adjoints by summation
into pre-zeroed buffers. ``stop_grad`` passes its value forward and blocks
the sweep: nothing upstream of it receives gradient through that edge.

Gradient bookkeeping is lazy: a node carries a gradient buffer only when a
trainable input is among its ancestors, so constant subgraphs cost nothing
on the way back.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import ShapeError

_BCE_CLAMP = 1e-12


class Node:
    __slots__ = ("op", "parents", "value", "grad", "aux", "needs_grad", "consumers")

    def __init__(self, op, parents, value, aux=None, needs_grad=False):
        self.op = op
        self.parents = parents
        self.value = value
        self.aux = aux
        self.needs_grad = needs_grad
        self.grad = None
        self.consumers = 0

    def __repr__(self):
        return f"Node({self.op}, shape={self.value.shape})"


def _as_value(value) -> np.ndarray:
    value = np.asarray(value, dtype=np.float64)
    if value.ndim == 1:
        value = value[:, None]
    if value.ndim != 2:
        raise ShapeError(f"tape values must be 2-D, got shape {value.shape}")
    return value


class Tape:
    """Records primitives in creation order; one tape per forward/backward pass."""

    def __init__(self):
        self.nodes: list[Node] = []

    def _push(self, op, parents, value, aux=None, needs_grad=None):
        if needs_grad is None:
            needs_grad = any(p.needs_grad for p in parents)
        node = Node(op, parents, value, aux, needs_grad)
        for parent in parents:
            parent.consumers += 1
        self.nodes.append(node)
        return node

    # ------------------------------------------------------------------
    # primitives
    # ------------------------------------------------------------------

    def input(self, value, trainable: bool = False) -> Node:
        return self._push("input", (), _as_value(value), needs_grad=trainable)

    def matmul(self, a: Node, b: Node, transpose_a=False, transpose_b=False) -> Node:
        av = a.value.T if transpose_a else a.value
        bv = b.value.T if transpose_b else b.value
        if av.shape[1] != bv.shape[0]:
            raise ShapeError(f"matmul: inner dimensions differ, {av.shape} @ {bv.shape}")
        return self._push("matmul", (a, b), av @ bv, aux=(transpose_a, transpose_b))

    def add(self, a: Node, b: Node) -> Node:
        if a.value.shape != b.value.shape:
            raise ShapeError(f"add: shapes differ, {a.value.shape} vs {b.value.shape}")
        return self._push("add", (a, b), a.value + b.value)

    def mul(self, a: Node, b: Node) -> Node:
        if a.value.shape != b.value.shape:
            raise ShapeError(f"mul: shapes differ, {a.value.shape} vs {b.value.shape}")
        return self._push("mul", (a, b), a.value * b.value)

    def scale(self, a: Node, factor: float) -> Node:
        factor = float(factor)
        return self._push("scale", (a,), a.value * factor, aux=factor)

    def row_scale(self, a: Node, s: Node) -> Node:
        if s.value.shape != (a.value.shape[0], 1):
            raise ShapeError(
                f"row_scale: scales {s.value.shape} for {a.value.shape[0]} rows"
            )
        return self._push("row_scale", (a, s), a.value * s.value)

    def relu(self, a: Node) -> Node:
        return self._push("relu", (a,), np.maximum(a.value, 0.0))

    def sigmoid(self, a: Node) -> Node:
        z = a.value
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1.0 + ez)
        return self._push("sigmoid", (a,), out)

    def rsqrt_clamp(self, a: Node, eps: float) -> Node:
        """1 / sqrt(max(a, eps)); zero gradient where a <= eps."""
        if eps <= 0:
            raise ValueError("eps must be > 0")
        value = 1.0 / np.sqrt(np.maximum(a.value, eps))
        return self._push("rsqrt_clamp", (a,), value, aux=eps)

    def reduce_row_sum(self, a: Node) -> Node:
        return self._push("reduce_row_sum", (a,), a.value.sum(axis=1, keepdims=True))

    def reshape(self, a: Node, shape: tuple[int, int]) -> Node:
        return self._push("reshape", (a,), a.value.reshape(shape).copy())

    def slice_rows(self, a: Node, start: int, stop: int) -> Node:
        if not 0 <= start < stop <= a.value.shape[0]:
            raise ShapeError(f"slice [{start}:{stop}] out of range for {a.value.shape}")
        return self._push("slice_rows", (a,), a.value[start:stop], aux=(start, stop))

    def concat_rows(self, parts: list[Node]) -> Node:
        if not parts:
            raise ShapeError("concat_rows needs at least one part")
        cols = parts[0].value.shape[1]
        if any(p.value.shape[1] != cols for p in parts):
            raise ShapeError("concat_rows: column counts differ")
        offsets = np.cumsum([0] + [p.value.shape[0] for p in parts])
        value = np.concatenate([p.value for p in parts], axis=0)
        return self._push("concat_rows", tuple(parts), value, aux=offsets)

    def concat_cols(self, parts: list[Node]) -> Node:
        if not parts:
            raise ShapeError("concat_cols needs at least one part")
        rows = parts[0].value.shape[0]
        if any(p.value.shape[0] != rows for p in parts):
            raise ShapeError("concat_cols: row counts differ")
        offsets = np.cumsum([0] + [p.value.shape[1] for p in parts])
        value = np.concatenate([p.value for p in parts], axis=1)
        return self._push("concat_cols", tuple(parts), value, aux=offsets)

    def stop_grad(self, a: Node) -> Node:
        return self._push("stop_grad", (a,), a.value, needs_grad=False)

    def softmax_ce(self, logits: Node, labels: np.ndarray) -> Node:
        """Mean softmax cross-entropy against integer labels; scalar output."""
        labels = np.asarray(labels).reshape(-1)
        z = logits.value
        if labels.shape[0] != z.shape[0]:
            raise ShapeError(f"{labels.shape[0]} labels for {z.shape[0]} rows")
        shifted = z - z.max(axis=1, keepdims=True)
        expz = np.exp(shifted)
        probs = expz / expz.sum(axis=1, keepdims=True)
        picked = shifted[np.arange(z.shape[0]), labels] - np.log(
            expz.sum(axis=1)
        )
        value = np.array([[-picked.mean()]])
        return self._push("softmax_ce", (logits,), value, aux=(labels, probs))

    def bce(self, pred: Node, target: np.ndarray) -> Node:
        """Mean binary cross-entropy; scalar output.

        Predictions are clamped away from {0, 1} before the logs so saturated
        sigmoids yield finite loss and gradient.
        """
        target = _as_value(target)
        if target.shape != pred.value.shape:
            raise ShapeError(f"shapes differ, {target.shape} vs {pred.value.shape}")
        p = np.clip(pred.value, _BCE_CLAMP, 1.0 - _BCE_CLAMP)
        terms = target * np.log(p) + (1.0 - target) * np.log1p(-p)
        value = np.array([[-terms.mean()]])
        return self._push("bce", (pred,), value, aux=(target, p))

    # ------------------------------------------------------------------
    # composites
    # ------------------------------------------------------------------

    def sum_all(self, a: Node) -> Node:
        """Scalar sum of all entries, composed from listed primitives."""
        rows = self.reduce_row_sum(a)
        flat = self.reshape(rows, (1, rows.value.shape[0]))
        ones = self.input(np.ones((flat.value.shape[1], 1)))
        return self.matmul(flat, ones)

    def affine(self, x: Node, weight: Node, bias: Node, ones_col: Node) -> Node:
        """x @ weight + bias broadcast over rows; bias is a (1, k) row."""
        return self.add(self.matmul(x, weight), self.matmul(ones_col, bias))

    # ------------------------------------------------------------------
    # backward
    # ------------------------------------------------------------------

    def backward(self, loss: Node) -> None:
        """Populate ``grad`` on every trainable-reachable node; loss must be (1, 1)."""
        if loss.value.shape != (1, 1):
            raise ValueError(f"loss must be a (1, 1) scalar, got {loss.value.shape}")
        for node in self.nodes:
            node.grad = None
        loss.grad = np.ones((1, 1))
        for node in reversed(self.nodes):
            if node.grad is None or not node.parents:
                continue
            _ADJOINTS[node.op](node)
        # unreachable trainable inputs still expose a (zero) gradient
        for node in self.nodes:
            if node.needs_grad and node.grad is None and node.op == "input":
                node.grad = np.zeros_like(node.value)


def _acc(parent: Node, grad, own: bool) -> None:
    """Accumulate into a lazily created buffer.

    ``own`` marks a freshly allocated array this call may hand over. A
    borrowed gradient (a view of another node's buffer) may still be adopted
    without copying when this is the parent's only consumer, because then no
    further accumulation will ever mutate it.
    """
    if not parent.needs_grad:
        return
    if parent.grad is None:
        parent.grad = grad if own or parent.consumers == 1 else grad.copy()
    else:
        parent.grad += grad


def _adj_matmul(node: Node) -> None:
    a, b = node.parents
    ta, tb = node.aux
    g = node.grad
    av = a.value.T if ta else a.value
    bv = b.value.T if tb else b.value
    if a.needs_grad:
        da = g @ bv.T
        _acc(a, da.T if ta else da, own=True)
    if b.needs_grad:
        db = av.T @ g
        _acc(b, db.T if tb else db, own=True)


def _adj_add(node: Node) -> None:
    a, b = node.parents
    _acc(a, node.grad, own=False)
    _acc(b, node.grad, own=False)


def _adj_mul(node: Node) -> None:
    a, b = node.parents
    if a.needs_grad:
        _acc(a, node.grad * b.value, own=True)
    if b.needs_grad:
        _acc(b, node.grad * a.value, own=True)


def _adj_scale(node: Node) -> None:
    _acc(node.parents[0], node.grad * node.aux, own=True)


def _adj_row_scale(node: Node) -> None:
    a, s = node.parents
    if a.needs_grad:
        _acc(a, node.grad * s.value, own=True)
    if s.needs_grad:
        _acc(s, (node.grad * a.value).sum(axis=1, keepdims=True), own=True)


def _adj_relu(node: Node) -> None:
    if node.parents[0].needs_grad:
        _acc(node.parents[0], node.grad * (node.value > 0.0), own=True)


def _adj_sigmoid(node: Node) -> None:
    y = node.value
    if node.parents[0].needs_grad:
        _acc(node.parents[0], node.grad * (y * (1.0 - y)), own=True)


def _adj_rsqrt_clamp(node: Node) -> None:
    a = node.parents[0]
    if a.needs_grad:
        live = a.value > node.aux
        _acc(a, node.grad * (-0.5 * node.value**3) * live, own=True)


def _adj_reduce_row_sum(node: Node) -> None:
    parent = node.parents[0]
    if not parent.needs_grad:
        return
    if parent.grad is None:
        parent.grad = np.broadcast_to(node.grad, parent.value.shape).copy()
    else:
        parent.grad += node.grad


def _adj_reshape(node: Node) -> None:
    parent = node.parents[0]
    _acc(parent, node.grad.reshape(parent.value.shape), own=False)


def _adj_slice_rows(node: Node) -> None:
    parent = node.parents[0]
    if not parent.needs_grad:
        return
    start, stop = node.aux
    if parent.grad is None:
        parent.grad = np.zeros_like(parent.value)
    parent.grad[start:stop] += node.grad


def _adj_concat_rows(node: Node) -> None:
    offsets = node.aux
    for i, parent in enumerate(node.parents):
        _acc(parent, node.grad[offsets[i] : offsets[i + 1]], own=False)


def _adj_concat_cols(node: Node) -> None:
    offsets = node.aux
    for i, parent in enumerate(node.parents):
        _acc(parent, node.grad[:, offsets[i] : offsets[i + 1]], own=False)


def _adj_softmax_ce(node: Node) -> None:
    logits = node.parents[0]
    if not logits.needs_grad:
        return
    labels, probs = node.aux
    g = node.grad[0, 0] / probs.shape[0]
    d = probs.copy()
    d[np.arange(probs.shape[0]), labels] -= 1.0
    d *= g
    _acc(logits, d, own=True)


def _adj_bce(node: Node) -> None:
    pred = node.parents[0]
    if not pred.needs_grad:
        return
    target, p = node.aux
    g = node.grad[0, 0] / p.size
    _acc(pred, g * (p - target) / (p * (1.0 - p)), own=True)


_ADJOINTS = {
    "matmul": _adj_matmul,
    "add": _adj_add,
    "mul": _adj_mul,
    "scale": _adj_scale,
    "row_scale": _adj_row_scale,
    "relu": _adj_relu,
    "sigmoid": _adj_sigmoid,
    "rsqrt_clamp": _adj_rsqrt_clamp,
    "reduce_row_sum": _adj_reduce_row_sum,
    "reshape": _adj_reshape,
    "slice_rows": _adj_slice_rows,
    "concat_rows": _adj_concat_rows,
    "concat_cols": _adj_concat_cols,
    "stop_grad": lambda node: None,
    "softmax_ce": _adj_softmax_ce,
    "bce": _adj_bce,
}


def finite_diff_check(
    f: Callable[[dict[str, np.ndarray]], tuple[float, dict[str, np.ndarray]]],
    params: dict[str, np.ndarray],
    h: float = 1e-5,
    max_coords_per_param: int = 40,
    seed: int = 0,
) -> float:
    """Max relative error between analytic gradients and central differences.

    ``f(params)`` returns (loss, grads); the numeric side uses only the loss.
    Coordinates are checked exhaustively for small parameters and sampled
    deterministically otherwise. The error measure is
    |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    if h <= 0:
        raise ValueError("step must be > 0")
    _, grads = f(params)
    rng = np.random.Generator(np.random.Philox(seed))
    worst = 0.0
    for name in sorted(params):
        arr = params[name]
        if arr.size <= max_coords_per_param:
            coords = np.arange(arr.size)
        else:
            coords = rng.choice(arr.size, size=max_coords_per_param, replace=False)
        gforname = grads[name]
        for idx in coords:
            orig = arr.flat[idx]
            arr.flat[idx] = orig + h
            up, _ = f(params)
            arr.flat[idx] = orig - h
            down, _ = f(params)
            arr.flat[idx] = orig
            numeric = (up - down) / (2.0 * h)
            analytic = gforname.flat[idx]
            err = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
            worst = max(worst, err)
    return worst
