"""Define-by-run reverse-mode differentiation over dense float64 arrays.

A :class:`Graph` is an append-only tape. Every :class:`Tensor` owns one record
on the tape; operations append a record holding the parent indices and a
vector-Jacobian closure. :func:`backward` walks the tape once, in reverse.

Only the operations needed by small multilayer perceptrons and by the feature
augmentation are provided.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Graph",
    "Tensor",
    "Gradients",
    "ShapeError",
    "NonFiniteError",
    "matmul",
    "add_bias",
    "relu",
    "elementwise_mul",
    "add",
    "scale",
    "sum_all",
    "take_rows",
    "pick",
    "softmax_cross_entropy",
    "binary_cross_entropy_with_logits",
    "backward",
    "logit_grads_wrt",
    "finite_difference",
    "numeric_rel_error",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """A forward value or a gradient contains NaN or Inf."""


VJP = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class _Record:
    op: str
    parents: tuple[int, ...]
    vjp: Optional[VJP]
    requires_grad: bool


class Tensor:
    """A float64 array bound to one record of a :class:`Graph`."""

    __slots__ = ("value", "graph", "index")

    def __init__(self, value: np.ndarray, graph: "Graph", index: int):
        self.value = value
        self.graph = graph
        self.index = index

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def requires_grad(self) -> bool:
        return self.graph.records[self.index].requires_grad

    @property
    def op(self) -> str:
        return self.graph.records[self.index].op

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape})"


class Graph:
    """Append-only tape of operation records."""

    def __init__(self) -> None:
        self.records: list[_Record] = []

    def __len__(self) -> int:
        return len(self.records)

    def _append(self, value, op, parents=(), vjp=None, requires_grad=False) -> Tensor:
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(f"non-finite output from {op!r}")
        self.records.append(_Record(op, tuple(parents), vjp, requires_grad))
        return Tensor(value, self, len(self.records) - 1)

    def param(self, value) -> Tensor:
        """Leaf that receives gradients."""
        return self._append(_as_array(value), "param", requires_grad=True)

    def constant(self, value) -> Tensor:
        """Leaf that never receives gradients."""
        return self._append(_as_array(value), "constant")


def _as_array(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(())
    return arr


def _graph_of(*tensors: Tensor) -> Graph:
    graph = tensors[0].graph
    for t in tensors[1:]:
        if t.graph is not graph:
            raise ValueError("operands belong to different graphs")
    return graph


def _emit(op: str, value: np.ndarray, parents: Sequence[Tensor], vjp: VJP) -> Tensor:
    graph = _graph_of(*parents)
    needs = any(p.requires_grad for p in parents)
    return graph._append(
        value,
        op,
        parents=[p.index for p in parents],
        vjp=vjp if needs else None,
        requires_grad=needs,
    )


# --------------------------------------------------------------------------
# operations
# --------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def vjp(g):
        return g @ bv.T, av.T @ g

    return _emit("matmul", av @ bv, (a, b), vjp)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    if x.value.ndim != 2 or bias.value.ndim != 1 or x.shape[1] != bias.shape[0]:
        raise ShapeError(f"add_bias shape mismatch: {x.shape} + {bias.shape}")

    def vjp(g):
        return g, g.sum(axis=0)

    return _emit("add_bias", x.value + bias.value, (x, bias), vjp)


def relu(x: Tensor) -> Tensor:
    active = x.value > 0.0

    def vjp(g):
        return (np.where(active, g, 0.0),)

    return _emit("relu", np.where(active, x.value, 0.0), (x,), vjp)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op} requires identical shapes, got {a.shape} and {b.shape}")


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("elementwise_mul", a, b)
    av, bv = a.value, b.value

    def vjp(g):
        return g * bv, g * av

    return _emit("mul", av * bv, (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit("add", a.value + b.value, (a, b), lambda g: (g, g))


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _emit("scale", x.value * factor, (x,), lambda g: (g * factor,))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit(
        "sum", np.array(x.value.sum()), (x,), lambda g: (np.full(shape, float(g)),)
    )


def take_rows(x: Tensor, index) -> Tensor:
    """Gather rows ``x[index]``; repeated indices accumulate in backward."""
    index = np.asarray(index, dtype=np.int64)
    if x.value.ndim != 2:
        raise ShapeError("take_rows expects a 2-D tensor")
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise IndexError("row index out of range")
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _emit("take_rows", x.value[index], (x,), vjp)


def _check_labels(labels, rows: int, width: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (rows,):
        raise ShapeError(f"expected {rows} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= width):
        raise ValueError(f"label out of range [0, {width})")
    return labels


def pick(x: Tensor, selected) -> Tensor:
    """Vector of ``x[b, selected[b]]``."""
    if x.value.ndim != 2:
        raise ShapeError("pick expects a 2-D tensor")
    sel = _check_labels(selected, x.shape[0], x.shape[1])
    rows = np.arange(x.shape[0])
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        out[rows, sel] = g
        return (out,)

    return _emit("pick", x.value[rows, sel], (x,), vjp)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[label]``."""
    if logits.value.ndim != 2:
        raise ShapeError("logits must be 2-D")
    b, c = logits.shape
    labels = _check_labels(labels, b, c)
    shifted = logits.value - logits.value.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(b)
    loss = float(np.mean(log_norm - shifted[rows, labels]))

    def vjp(g):
        probs = np.exp(shifted - log_norm[:, None])
        probs[rows, labels] -= 1.0
        return (probs * (float(g) / b),)

    return _emit("softmax_xent", np.array(loss), (logits,), vjp)


def binary_cross_entropy_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean over all entries of the elementwise sigmoid cross-entropy."""
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise ShapeError(f"targets {t.shape} do not match logits {logits.shape}")
    x = logits.value
    # log(1 + exp(-|x|)) form avoids overflow for large |x|
    per = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    n = x.size

    def vjp(g):
        sig = 0.5 * (1.0 + np.tanh(0.5 * x))
        return ((sig - t) * (float(g) / n),)

    return _emit("bce_logits", np.array(per.mean()), (logits,), vjp)


# --------------------------------------------------------------------------
# backward
# --------------------------------------------------------------------------


@dataclass
class Gradients:
    """Gradient map returned by :func:`backward`.

    Indexing with a tensor of the same graph returns its gradient; tensors the
    root does not depend on get zeros.
    """

    graph: Graph
    _grads: list = field(repr=False)

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        if tensor.graph is not self.graph:
            raise KeyError("tensor is not part of this graph")
        g = self._grads[tensor.index] if tensor.index < len(self._grads) else None
        return np.zeros(tensor.shape) if g is None else g


def backward(root: Tensor, graph: Optional[Graph] = None) -> Gradients:
    """Reverse accumulation from scalar ``root`` over its graph."""
    graph = root.graph if graph is None else graph
    if root.graph is not graph:
        raise ValueError("root does not belong to the graph")
    if root.value.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
    grads: list[Optional[np.ndarray]] = [None] * (root.index + 1)
    grads[root.index] = np.ones(root.shape)
    records = graph.records
    for idx in range(root.index, -1, -1):
        g = grads[idx]
        rec = records[idx]
        if g is None or rec.vjp is None:
            continue
        for parent, pg in zip(rec.parents, rec.vjp(g)):
            if pg is None or not records[parent].requires_grad:
                continue
            if grads[parent] is None:
                grads[parent] = pg
            else:
                grads[parent] = grads[parent] + pg
    return Gradients(graph, grads)


def _depends_on(graph: Graph, root: int, target: int) -> bool:
    seen = {root}
    stack = [root]
    while stack:
        idx = stack.pop()
        if idx == target:
            return True
        for p in graph.records[idx].parents:
            if p >= target and p not in seen:
                seen.add(p)
                stack.append(p)
    return False


def logit_grads_wrt(features: Tensor, logits: Tensor, selected) -> np.ndarray:
    """Row b holds d logits[b, selected[b]] / d features[b, :].

    One backward pass from the sum of the selected logits suffices because the
    head is applied row by row, so cross-sample derivatives vanish. The result
    is a detached array.
    """
    if features.graph is not logits.graph or not _depends_on(
        logits.graph, logits.index, features.index
    ):
        raise ValueError("logits are not downstream of features")
    if not features.requires_grad:
        raise ValueError("features must require gradients")
    root = sum_all(pick(logits, selected))
    return backward(root)[features].copy()


def numeric_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm relative error of a gradient tensor."""
    denom = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))))
    if denom == 0.0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric))) / denom


def finite_difference(fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5):
    """Central differences of scalar ``fn`` at ``x`` (x is restored afterwards)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        up = fn(x)
        flat[k] = orig - h
        down = fn(x)
        flat[k] = orig
        gflat[k] = (up - down) / (2.0 * h)
    return grad
