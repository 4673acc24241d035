"""Reverse-mode automatic differentiation over float64 numpy arrays.

Define-by-run: every operation appends a record to the active Graph and
the recorded closures are replayed in reverse by :func:`backward`.  The
engine is deliberately small -- it provides exactly the primitives the
planning/generation model needs, all in 64-bit floats so that central
finite differences can certify every backward rule.

Broadcasting for binary elementwise ops is limited to numpy-compatible
cases where one operand has a size-1 axis (or fewer leading axes); the
gradient is summed back over the broadcast axes.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(ValueError):
    """Input lies outside an op's mathematical domain (e.g. log(x<=0))."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class ParameterError(ValueError):
    """An op hyperparameter (temperature, bin count, ...) is invalid."""


_node_counter = itertools.count()


class Tensor:
    """Shape + float64 values + accumulated gradient.

    ``values`` and ``grad`` are flat views over the underlying shaped
    storage; mutating them in place is supported (the optimizer and the
    finite-difference harness rely on it).  ``grad`` is all-zero right
    after creation and after :meth:`zero_grad`.
    """

    __slots__ = ("data", "requires_grad", "node_id", "_grad")

    def __init__(self, data: np.ndarray, requires_grad: bool = False):
        self.data = data
        self.requires_grad = requires_grad
        self.node_id = next(_node_counter)
        self._grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        return self.data.reshape(-1)

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad.reshape(-1)

    def grad_matrix(self) -> np.ndarray:
        """Gradient with the tensor's own shape (optimizer convenience)."""
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def _accumulate(self, g: np.ndarray) -> None:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        self._grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class OpRecord:
    """One node of the computation graph (append order = topological order)."""

    __slots__ = ("kind", "input_ids", "output_id", "out", "backward_fn")

    def __init__(self, kind: str, inputs: Sequence[Tensor], out: Tensor,
                 backward_fn: Callable[[np.ndarray], None]):
        self.kind = kind
        self.input_ids = tuple(t.node_id for t in inputs)
        self.output_id = out.node_id
        self.out = out
        self.backward_fn = backward_fn


class Graph:
    """Append-only tape of OpRecords, rebuilt for every forward pass."""

    def __init__(self):
        self.nodes: list[OpRecord] = []

    def zero_grads(self) -> None:
        """Clear gradients of every tensor recorded on this graph."""
        for rec in self.nodes:
            rec.out.zero_grad()


_active_graph = Graph()
_grad_enabled = True


def active_graph() -> Graph:
    return _active_graph


def new_graph() -> Graph:
    """Replace the active graph with a fresh one (define-by-run reset)."""
    global _active_graph
    _active_graph = Graph()
    return _active_graph


@contextmanager
def graph_scope(graph: Graph | None = None):
    """Temporarily record onto ``graph`` (a fresh one by default)."""
    global _active_graph
    prev = _active_graph
    _active_graph = graph if graph is not None else Graph()
    try:
        yield _active_graph
    finally:
        _active_graph = prev


@contextmanager
def no_grad():
    """Disable recording; ops produce constant tensors (fast forward)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(values, shape=None) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if shape is not None:
        arr = arr.reshape(shape)
    return arr


def tensor(values, shape=None, requires_grad: bool = False) -> Tensor:
    return Tensor(_as_array(values, shape), requires_grad=requires_grad)


def param(values, shape=None) -> Tensor:
    return tensor(values, shape, requires_grad=True)


def const(values, shape=None) -> Tensor:
    return tensor(values, shape, requires_grad=False)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float64))


def _make(kind: str, inputs: Sequence[Tensor], data: np.ndarray,
          backward_fn: Callable[[np.ndarray], None] | None) -> Tensor:
    track = _grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track and backward_fn is not None:
        _active_graph.nodes.append(OpRecord(kind, inputs, out, backward_fn))
    return out


def record(kind: str, inputs: Sequence[Tensor], out: Tensor,
           backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    """Manually append a node (used by tests to inject corrupted rules)."""
    out.requires_grad = _grad_enabled and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        _active_graph.nodes.append(OpRecord(kind, inputs, out, backward_fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes the forward pass broadcast."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    data = a.data + b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make("add", (a, b), data, bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    data = a.data - b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(-_unbroadcast(g, b.shape))

    return _make("sub", (a, b), data, bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    data = a.data * b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make("mul", (a, b), data, bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "div")
    data = a.data / b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make("div", (a, b), data, bw)


def neg(a: Tensor) -> Tensor:
    def bw(g):
        if a.requires_grad:
            a._accumulate(-g)

    return _make("neg", (a,), -a.data, bw)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * (1.0 - data * data))

    return _make("tanh", (a,), data, bw)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * data * (1.0 - data))

    return _make("sigmoid", (a,), data, bw)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * data)

    return _make("exp", (a,), data, bw)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        bad = float(a.data.min())
        raise DomainError(f"log of non-positive value (min entry {bad})")
    data = np.log(a.data)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _make("log", (a,), data, bw)


# ---------------------------------------------------------------------------
# reductions / structure


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make("matmul", (a, b), data, bw)


def sum_(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if not a.requires_grad:
            return
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        a._accumulate(np.broadcast_to(gg, a.shape).copy())

    return _make("sum", (a,), data, bw)


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return _make("reshape", (a,), data, bw)


def swap_last2(a: Tensor) -> Tensor:
    if a.data.ndim < 2:
        raise ShapeError(f"swap_last2 needs >=2-d input, got {a.shape}")
    data = np.swapaxes(a.data, -1, -2).copy()

    def bw(g):
        if a.requires_grad:
            a._accumulate(np.swapaxes(g, -1, -2))

    return _make("swap_last2", (a,), data, bw)


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for p, start, stop in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(start, stop)
                p._accumulate(g[tuple(idx)])

    return _make("concat", tuple(parts), data, bw)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    data = a.data[idx].copy()

    def bw(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[idx] = g
            a._accumulate(full)

    return _make("narrow", (a,), data, bw)


def take_rows(a: Tensor, indices) -> Tensor:
    """Gather rows along axis 0 (embedding lookup); scatter-add backward."""
    idx = np.asarray(indices, dtype=np.intp)
    data = a.data[idx]

    def bw(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            a._accumulate(full)

    return _make("take_rows", (a,), data, bw)


def gather_last(a: Tensor, indices) -> Tensor:
    """Pick one entry per row of a 2-d tensor; returns shape (rows, 1)."""
    if a.data.ndim != 2:
        raise ShapeError(f"gather_last expects a 2-d tensor, got {a.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    rows = np.arange(a.shape[0])
    data = a.data[rows, idx].reshape(-1, 1)

    def bw(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, (rows, idx), g[:, 0])
            a._accumulate(full)

    return _make("gather_last", (a,), data, bw)


# ---------------------------------------------------------------------------
# normalizers / sampling


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``; entries sum to 1 within 1e-9."""
    if not np.all(np.isfinite(a.data)):
        raise NumericError("softmax input contains NaN or infinity")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        if a.requires_grad:
            dot = (g * data).sum(axis=axis, keepdims=True)
            a._accumulate(data * (g - dot))

    return _make("softmax", (a,), data, bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not np.all(np.isfinite(a.data)):
        raise NumericError("log_softmax input contains NaN or infinity")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    data = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bw(g):
        if a.requires_grad:
            a._accumulate(g - np.exp(data) * g.sum(axis=axis, keepdims=True))

    return _make("log_softmax", (a,), data, bw)


def gumbel_softmax_sample(logits: Tensor, temperature: float, noise) -> Tensor:
    """softmax((logits + noise) / temperature); gradient reaches logits only.

    ``noise`` holds standard Gumbel draws, injected explicitly so tests and
    reruns are reproducible; it is treated as a constant.
    """
    if temperature <= 0.0:
        raise ParameterError(f"gumbel temperature must be positive, got {temperature}")
    n = noise.data if isinstance(noise, Tensor) else np.asarray(noise, dtype=np.float64)
    z = (logits.data + n) / temperature
    if not np.all(np.isfinite(z)):
        raise NumericError("gumbel_softmax_sample produced non-finite logits")
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        if logits.requires_grad:
            dot = (g * data).sum(axis=-1, keepdims=True)
            logits._accumulate(data * (g - dot) / temperature)

    return _make("gumbel_softmax", (logits,), data, bw)


def sample_gumbel(rng: np.random.Generator, shape) -> np.ndarray:
    """Standard Gumbel draws via -log(-log(U)), U uniform on (0, 1)."""
    u = rng.random(shape)
    return -np.log(-np.log(np.clip(u, 1e-300, 1.0 - 1e-16)))


# ---------------------------------------------------------------------------
# backward / verification


def backward(root: Tensor, graph: Graph | None = None) -> None:
    """Reverse traversal seeding d(root)/d(root) = 1.

    Every leaf reachable from ``root`` with requires_grad gets its grad
    populated; unreachable leaves keep zero grad.  Gradients accumulate, so
    call zero_grad (or Graph.zero_grads) between repeated passes.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
    g = graph if graph is not None else _active_graph
    root._accumulate(np.ones_like(root.data))
    for rec in reversed(g.nodes):
        if rec.out._grad is None:
            continue
        rec.backward_fn(rec.out._grad)


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor],
               step: float = 1e-5) -> float:
    """Max over parameters of the relative error between the analytic and
    central-difference gradients, compared per parameter tensor:
    ||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-8).

    The norm-level comparison is deliberate: double-precision forward
    round-off (~1e-9 absolute after thousands of ops) swamps individual
    coordinates whose true gradient is legitimately tiny, while any wrong
    backward rule still shows up at O(1).  ``f`` must rebuild the scalar
    loss from scratch on every call and be deterministic given the current
    parameter values.
    """
    with graph_scope() as g:
        loss = f()
        for p in params:
            p.zero_grad()
        backward(loss, g)
        analytic = [p.grad.copy() for p in params]

    worst = 0.0
    with no_grad():
        for p, ana in zip(params, analytic):
            flat = p.values
            numeric = np.zeros_like(ana)
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + step
                f_plus = f().item()
                flat[i] = keep - step
                f_minus = f().item()
                flat[i] = keep
                numeric[i] = (f_plus - f_minus) / (2.0 * step)
            gap = float(np.linalg.norm(ana - numeric))
            scale = max(float(np.linalg.norm(ana)), float(np.linalg.norm(numeric)), 1e-8)
            worst = max(worst, gap / scale)
    return worst


def clip_global_norm(tensors: Sequence[Tensor], max_norm: float) -> float:
    """Scale all grads so their joint L2 norm is at most ``max_norm``."""
    total = 0.0
    for t in tensors:
        if t._grad is not None:
            total += float((t._grad * t._grad).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for t in tensors:
            if t._grad is not None:
                t._grad *= scale
    return norm
