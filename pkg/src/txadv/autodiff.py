"""Reverse-mode automatic differentiation over small dense numpy graphs.

Operations are recorded on a tape owned by a :class:`Graph`; creation order
doubles as a topological order, so the backward pass is a single reverse
sweep over the tape. Everything is dense float64. At the scale this package
operates (vocabularies of a few hundred tokens, hidden sizes well under a
thousand) sparsity or operator fusion would be pure overhead, and 64-bit
precision keeps argmax-style decisions reproducible.
"""
from __future__ import annotations

import numpy as np

__all__ = ["Tensor", "Graph", "grad_check"]


class Tensor:
    """Dense float64 array plus an optional gradient of identical shape."""

    __slots__ = ("values", "grad", "requires_grad")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.values.shape

    def item(self) -> float:
        return float(self.values)

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"


class _IndexGrad:
    """Row-scatter gradient emitted by gather; avoids materializing a full table."""

    __slots__ = ("ids", "values")

    def __init__(self, ids, values):
        self.ids = ids
        self.values = values


class _Node:
    __slots__ = ("out", "parents", "backward_fn")

    def __init__(self, out, parents, backward_fn):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _accumulate(tensor: Tensor, grad) -> None:
    if tensor.grad is None:
        tensor.grad = np.zeros(tensor.values.shape, dtype=np.float64)
    if isinstance(grad, _IndexGrad):
        np.add.at(tensor.grad, grad.ids, grad.values)
    else:
        tensor.grad += _unbroadcast(np.asarray(grad, dtype=np.float64), tensor.values.shape)


class Graph:
    """Tape of recorded operations; the tape order is the evaluation order.

    A graph built with ``record=False`` skips all bookkeeping, which makes
    pure inference passes cheap; ``backward`` is then unavailable.
    """

    def __init__(self, record: bool = True):
        self.nodes: list[_Node] = []
        self.record = record

    def _make(self, values, parents, backward_fn) -> Tensor:
        needs = self.record and any(p.requires_grad for p in parents)
        out = Tensor(values, requires_grad=needs)
        if needs:
            self.nodes.append(_Node(out, parents, backward_fn))
        return out

    # ------------------------------------------------------------------
    # operations

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.values.ndim != 2 or b.values.ndim != 2:
            raise ValueError("matmul expects 2-D operands")
        if a.values.shape[1] != b.values.shape[0]:
            raise ValueError(
                f"matmul dimension mismatch: {a.values.shape} x {b.values.shape}"
            )

        def backward(g):
            return g @ b.values.T, a.values.T @ g

        return self._make(a.values @ b.values, (a, b), backward)

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        def backward(g):
            return g, g

        return self._make(a.values + b.values, (a, b), backward)

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        def backward(g):
            return g, -g

        return self._make(a.values - b.values, (a, b), backward)

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        def backward(g):
            return g * b.values, g * a.values

        return self._make(a.values * b.values, (a, b), backward)

    def tanh(self, x: Tensor) -> Tensor:
        out_vals = np.tanh(x.values)

        def backward(g):
            return (g * (1.0 - out_vals * out_vals),)

        return self._make(out_vals, (x,), backward)

    def sigmoid(self, x: Tensor) -> Tensor:
        out_vals = 1.0 / (1.0 + np.exp(-x.values))

        def backward(g):
            return (g * out_vals * (1.0 - out_vals),)

        return self._make(out_vals, (x,), backward)

    def relu(self, x: Tensor) -> Tensor:
        mask = x.values > 0.0

        def backward(g):
            return (g * mask,)

        return self._make(np.where(mask, x.values, 0.0), (x,), backward)

    def maximum(self, a: Tensor, b: Tensor) -> Tensor:
        # Ties route the gradient to the first operand.
        take_a = a.values >= b.values

        def backward(g):
            return g * take_a, g * ~take_a

        return self._make(np.where(take_a, a.values, b.values), (a, b), backward)

    def concat(self, parts: list[Tensor], axis: int = -1) -> Tensor:
        sizes = [p.values.shape[axis] for p in parts]
        splits = np.cumsum(sizes)[:-1]

        def backward(g):
            return tuple(np.split(g, splits, axis=axis))

        return self._make(
            np.concatenate([p.values for p in parts], axis=axis), tuple(parts), backward
        )

    def narrow(self, x: Tensor, axis: int, start: int, stop: int) -> Tensor:
        index = [slice(None)] * x.values.ndim
        index[axis] = slice(start, stop)
        index = tuple(index)

        def backward(g):
            full = np.zeros(x.values.shape, dtype=np.float64)
            full[index] = g
            return (full,)

        return self._make(x.values[index], (x,), backward)

    def gather(self, table: Tensor, ids) -> Tensor:
        """Stack table rows given by `ids`; backward scatter-adds into the table.

        The gradient of the output holds the per-row input gradients, which
        is what embedding-space perturbation needs.
        """
        ids = np.asarray(ids, dtype=np.intp)
        if ids.size and (ids.min() < 0 or ids.max() >= table.values.shape[0]):
            raise IndexError("gather id out of range")

        def backward(g):
            return (_IndexGrad(ids, g),)

        return self._make(table.values[ids], (table,), backward)

    def sum(self, x: Tensor) -> Tensor:
        def backward(g):
            return (np.full(x.values.shape, float(g)),)

        return self._make(x.values.sum(), (x,), backward)

    def mean(self, x: Tensor) -> Tensor:
        n = x.values.size

        def backward(g):
            return (np.full(x.values.shape, float(g) / n),)

        return self._make(x.values.mean(), (x,), backward)

    def softmax_cross_entropy(self, logits: Tensor, labels, sample_weight=None) -> Tensor:
        """Weighted-mean negative log softmax probability of the labels.

        `logits` is (C,) with a scalar label, or (B, C) with B labels. The
        optional weights select which rows count (masked-LM style); the loss
        is sum(w_i * nll_i) / sum(w_i).
        """
        vals = np.atleast_2d(logits.values)
        labels = np.atleast_1d(np.asarray(labels, dtype=np.intp))
        n_rows, n_classes = vals.shape
        if labels.shape != (n_rows,):
            raise ValueError("labels must match the number of logit rows")
        if labels.min() < 0 or labels.max() >= n_classes:
            raise IndexError("label out of range")
        if sample_weight is None:
            weights = np.ones(n_rows)
        else:
            weights = np.asarray(sample_weight, dtype=np.float64)
            if weights.shape != (n_rows,):
                raise ValueError("sample_weight must match the number of logit rows")
        total = weights.sum()
        if total <= 0.0:
            raise ValueError("sample_weight sums to zero")

        shifted = vals - vals.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
        softmax = exp / exp.sum(axis=1, keepdims=True)
        rows = np.arange(n_rows)
        nll = np.log(exp.sum(axis=1)) - shifted[rows, labels]
        loss = float((nll * weights).sum() / total)

        def backward(g):
            d = softmax.copy()
            d[rows, labels] -= 1.0
            d *= (weights / total)[:, None] * float(g)
            return (d.reshape(logits.values.shape),)

        return self._make(loss, (logits,), backward)

    # ------------------------------------------------------------------

    def backward(self, loss: Tensor) -> None:
        """Reverse sweep from `loss`, filling `.grad` on every reachable tensor.

        Grads of everything recorded on this tape are reset first, so calling
        backward twice on one graph is idempotent.
        """
        if loss.values.shape != ():
            raise ValueError("backward requires a scalar loss")
        if not self.record:
            raise ValueError("graph was built with record=False")
        for node in self.nodes:
            node.out.grad = None
            for parent in node.parents:
                parent.grad = None
        loss.grad = np.ones((), dtype=np.float64)
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if parent.requires_grad and pg is not None:
                    _accumulate(parent, pg)


def grad_check(build, params: list[Tensor], h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `build` must construct a fresh graph from the current parameter values
    and return ``(graph, loss)``. Non-differentiable points (relu at 0, max
    ties) are the caller's responsibility to avoid.
    """
    graph, loss = build()
    graph.backward(loss)
    analytic = [
        np.zeros(p.values.shape) if p.grad is None else p.grad.copy() for p in params
    ]
    worst = 0.0
    for param, grads in zip(params, analytic):
        flat = param.values.reshape(-1)
        flat_grads = grads.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + h
            up = build()[1].item()
            flat[i] = saved - h
            down = build()[1].item()
            flat[i] = saved
            numeric = (up - down) / (2.0 * h)
            err = abs(flat_grads[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
