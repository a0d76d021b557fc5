"""Reverse-mode automatic differentiation over dense float64 arrays.

Tensors hold numpy float64 data. Operations executed inside a ``with Graph()``
block are recorded on the tape in execution order (which is a topological
order); ``Graph.backward`` replays the tape in reverse and accumulates exact
gradients into every ``requires_grad`` leaf. Outside a graph the same
operations run as plain numpy computations, which is what inference paths use.

Also provides the two optimizers used by the trainer (plain SGD and
bias-corrected Adam) and a central-finite-difference gradient checker.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

# Set True in tests to assert finiteness after every primitive.
CHECK_FINITE = False


class ShapeError(ValueError):
    """Operation rejected because input shapes violate its shape rule."""


class GraphError(RuntimeError):
    """Tape misuse: backward before forward, cross-graph tensors, etc."""


_ACTIVE: list["Graph"] = []


def _active_tape():
    return _ACTIVE[-1] if _ACTIVE else None


class Tensor:
    """Dense float64 n-dimensional value with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "tape", "nid")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("Tensor data must be finite (no NaN/Inf)")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.tape = None
        self.nid = -1

    @classmethod
    def _make(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.tape = None
        t.nid = -1
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not scalar")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._make(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; delegates to the primitive ops below.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class Node:
    """One recorded operation: kind, ids of input nodes, output tensor(s)."""

    __slots__ = ("kind", "in_ids", "outs", "bwd")

    def __init__(self, kind, in_ids, outs, bwd):
        self.kind = kind
        self.in_ids = in_ids
        self.outs = outs
        self.bwd = bwd


class Graph:
    """Define-by-run tape. Rebuilt for every forward pass.

    Node order is the construction order, which is topological by
    construction: an operation can only consume tensors that already exist.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._leaf_ids: dict[int, int] = {}
        self._ran_backward = False

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _ACTIVE.pop()
        assert popped is self
        return False

    def _register_leaf(self, t: Tensor) -> int:
        nid = self._leaf_ids.get(id(t))
        if nid is None:
            nid = len(self.nodes)
            self.nodes.append(Node("leaf", (), (t,), None))
            self._leaf_ids[id(t)] = nid
        return nid

    def _input_id(self, t: Tensor) -> int:
        if t.tape is self:
            return t.nid
        if t.tape is not None:
            raise GraphError("tensor produced on a different graph used here")
        if t.requires_grad:
            return self._register_leaf(t)
        return -1

    def _record(self, kind: str, inputs, outs, bwd) -> None:
        in_ids = tuple(self._input_id(t) for t in inputs)
        nid = len(self.nodes)
        for out in outs:
            out.tape = self
            out.nid = nid
        self.nodes.append(Node(kind, in_ids, outs, bwd))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into every requires_grad leaf's .grad."""
        if loss.tape is not self:
            raise GraphError("backward before forward: loss was not produced on this graph")
        if loss.data.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            bwd = node.bwd
            if bwd is None:
                continue
            outs = node.outs
            if len(outs) == 1:
                g = outs[0].grad
                if g is None:
                    continue
                bwd(g)
                outs[0].grad = None  # non-leaf grads are discarded
            else:
                gs = tuple(o.grad for o in outs)
                if all(g is None for g in gs):
                    continue
                bwd(gs)
                for o in outs:
                    o.grad = None
        self._ran_backward = True

    def clear(self) -> None:
        for node in self.nodes:
            for out in node.outs:
                out.tape = None
                out.nid = -1
        self.nodes.clear()
        self._leaf_ids.clear()


def record_custom(kind: str, inputs: Sequence[Tensor], outs: Sequence[Tensor], bwd) -> None:
    """Record a fused kernel with a hand-written backward on the active tape.

    ``bwd`` receives the output gradient (single output) or a tuple of
    per-output gradients with None for unused outputs (multiple outputs), and
    must accumulate into the inputs via ``accumulate_grad``. No-op when no
    tape is active or no input participates in the graph.
    """
    tape = _active_tape()
    if tape is None:
        return
    for t in inputs:
        if _tracked(t, tape):
            tape._record(kind, inputs, tuple(outs), bwd)
            return


def _tracked(t: Tensor, tape) -> bool:
    return t.requires_grad or t.tape is tape


def _acc(t: Tensor, g: np.ndarray) -> None:
    # Never mutate an existing grad buffer in place: it may alias another
    # node's buffer (views from reshape/transpose backward).
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finish(kind: str, inputs: tuple, out_data: np.ndarray, make_bwd) -> Tensor:
    """Shared op epilogue: wrap output, record on the active tape if needed."""
    if CHECK_FINITE and not np.all(np.isfinite(out_data)):
        raise FloatingPointError(f"{kind}: non-finite output")
    out = Tensor._make(out_data)
    if _ACTIVE:
        tape = _ACTIVE[-1]
        for t in inputs:
            if t.requires_grad or t.tape is tape:
                tape._record(kind, inputs, (out,), make_bwd(out))
                break
    return out


accumulate_grad = _acc  # public name for fused-kernel backward functions


# ---------------------------------------------------------------------------
# Primitive operations
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    """Elementwise add. Shapes must match, or b is a bias vector (M,) added
    to every row of a (N, M)."""
    a, b = _as_tensor(a), _as_tensor(b)
    bias = a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]
    if not bias and a.shape != b.shape:
        raise ShapeError(f"add: incompatible shapes {a.shape} + {b.shape}")
    out_data = a.data + b.data

    def make_bwd(out):
        ta, tb = _needs(a), _needs(b)

        def bwd(g):
            if ta:
                _acc(a, g)
            if tb:
                _acc(b, g.sum(axis=0) if bias else g)

        return bwd

    return _finish("add", (a, b), out_data, make_bwd)


def sub(a, b) -> Tensor:
    """Elementwise subtract; same shape rule as add."""
    a, b = _as_tensor(a), _as_tensor(b)
    bias = a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]
    if not bias and a.shape != b.shape:
        raise ShapeError(f"sub: incompatible shapes {a.shape} - {b.shape}")
    out_data = a.data - b.data

    def make_bwd(out):
        ta, tb = _needs(a), _needs(b)

        def bwd(g):
            if ta:
                _acc(a, g)
            if tb:
                _acc(b, -(g.sum(axis=0) if bias else g))

        return bwd

    return _finish("sub", (a, b), out_data, make_bwd)


def mul(a, b) -> Tensor:
    """Elementwise multiply. Shapes must match, or one operand is a column
    (N, 1) scaling every column of the other (N, M)."""
    a, b = _as_tensor(a), _as_tensor(b)
    col_a = a.ndim == 2 and b.ndim == 2 and a.shape == (b.shape[0], 1) and b.shape[1] != 1
    col_b = a.ndim == 2 and b.ndim == 2 and b.shape == (a.shape[0], 1) and a.shape[1] != 1
    if not (col_a or col_b) and a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} * {b.shape}")
    out_data = a.data * b.data

    def make_bwd(out):
        ta, tb = _needs(a), _needs(b)

        def bwd(g):
            if ta:
                ga = g * b.data
                if col_a:
                    ga = ga.sum(axis=1, keepdims=True)
                _acc(a, ga)
            if tb:
                gb = g * a.data
                if col_b:
                    gb = gb.sum(axis=1, keepdims=True)
                _acc(b, gb)

        return bwd

    return _finish("mul", (a, b), out_data, make_bwd)


def scale(a, s: float) -> Tensor:
    """Multiply by a python scalar constant."""
    a = _as_tensor(a)
    s = float(s)
    out_data = a.data * s

    def make_bwd(out):
        def bwd(g):
            _acc(a, g * s)

        return bwd

    return _finish("scale", (a,), out_data, make_bwd)


def matmul(a, b) -> Tensor:
    """2-D matrix product (N, K) @ (K, M)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def make_bwd(out):
        ta, tb = _needs(a), _needs(b)

        def bwd(g):
            if ta:
                _acc(a, g @ b.data.T)
            if tb:
                _acc(b, a.data.T @ g)

        return bwd

    return _finish("matmul", (a, b), out_data, make_bwd)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.tanh(a.data)

    def make_bwd(out):
        def bwd(g):
            _acc(a, g * (1.0 - out.data * out.data))

        return bwd

    return _finish("tanh", (a,), out_data, make_bwd)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def make_bwd(out):
        def bwd(g):
            _acc(a, g * out.data * (1.0 - out.data))

        return bwd

    return _finish("sigmoid", (a,), out_data, make_bwd)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.maximum(a.data, 0.0)

    def make_bwd(out):
        def bwd(g):
            _acc(a, g * (a.data > 0.0))

        return bwd

    return _finish("relu", (a,), out_data, make_bwd)


def log(a) -> Tensor:
    """Natural log; rejects non-positive inputs rather than emitting -inf."""
    a = _as_tensor(a)
    if np.any(a.data <= 0.0):
        raise ValueError("log: input must be strictly positive")
    out_data = np.log(a.data)

    def make_bwd(out):
        def bwd(g):
            _acc(a, g / a.data)

        return bwd

    return _finish("log", (a,), out_data, make_bwd)


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax along one axis."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def make_bwd(out):
        def bwd(g):
            p = out.data
            dot = (g * p).sum(axis=axis, keepdims=True)
            _acc(a, p * (g - dot))

        return bwd

    return _finish("softmax", (a,), out_data, make_bwd)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse

    def make_bwd(out):
        def bwd(g):
            p = np.exp(out.data)
            _acc(a, g - p * g.sum(axis=axis, keepdims=True))

        return bwd

    return _finish("log_softmax", (a,), out_data, make_bwd)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    parts = [_as_tensor(t) for t in tensors]
    if not parts:
        raise ShapeError("concat: needs at least one input")
    nd = parts[0].ndim
    for p in parts:
        if p.ndim != nd:
            raise ShapeError(f"concat: rank mismatch {[p.shape for p in parts]}")
    try:
        out_data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: incompatible shapes {[p.shape for p in parts]}") from e

    sizes = [p.shape[axis] for p in parts]

    def make_bwd(out):
        needs = [_needs(p) for p in parts]

        def bwd(g):
            start = 0
            for p, n, need in zip(parts, sizes, needs):
                if need:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(start, start + n)
                    _acc(p, g[tuple(idx)])
                start += n

        return bwd

    return _finish("concat", tuple(parts), out_data, make_bwd)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of `length` entries along `axis` starting at `start`."""
    a = _as_tensor(a)
    if axis >= a.ndim or start < 0 or length <= 0 or start + length > a.shape[axis]:
        raise ShapeError(
            f"narrow: invalid slice axis={axis} [{start}:{start + length}] of {a.shape}"
        )
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out_data = a.data[idx].copy()

    def make_bwd(out):
        def bwd(g):
            full = np.zeros_like(a.data)
            full[idx] = g
            _acc(a, full)

        return bwd

    return _finish("slice", (a,), out_data, make_bwd)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        out_data = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from e

    def make_bwd(out):
        old = a.shape

        def bwd(g):
            _acc(a, g.reshape(old))

        return bwd

    return _finish("reshape", (a,), out_data, make_bwd)


def transpose(a) -> Tensor:
    """2-D transpose."""
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expects a matrix, got {a.shape}")
    out_data = a.data.T.copy()

    def make_bwd(out):
        def bwd(g):
            _acc(a, g.T)

        return bwd

    return _finish("transpose", (a,), out_data, make_bwd)


def tile_rows(a, reps: int) -> Tensor:
    """Stack `reps` copies of a (N, M) block vertically -> (reps*N, M)."""
    a = _as_tensor(a)
    if a.ndim != 2 or reps < 1:
        raise ShapeError(f"tile: expects a matrix and reps >= 1, got {a.shape}, {reps}")
    out_data = np.tile(a.data, (reps, 1))

    def make_bwd(out):
        n = a.shape[0]

        def bwd(g):
            _acc(a, g.reshape(reps, n, -1).sum(axis=0))

        return bwd

    return _finish("tile", (a,), out_data, make_bwd)


def tsum(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    if axis is not None and (axis < 0 or axis >= a.ndim):
        raise ShapeError(f"sum: axis {axis} out of range for {a.shape}")
    out_data = a.data.sum(axis=axis)

    def make_bwd(out):
        def bwd(g):
            if axis is None:
                _acc(a, np.broadcast_to(g, a.shape).copy() if g.ndim else np.full(a.shape, g))
            else:
                _acc(a, np.repeat(np.expand_dims(g, axis), a.shape[axis], axis=axis))

        return bwd

    return _finish("sum", (a,), out_data, make_bwd)


def tmean(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    if axis is not None and (axis < 0 or axis >= a.ndim):
        raise ShapeError(f"mean: axis {axis} out of range for {a.shape}")
    n = a.size if axis is None else a.shape[axis]
    out_data = a.data.mean(axis=axis)

    def make_bwd(out):
        inv = 1.0 / n

        def bwd(g):
            if axis is None:
                _acc(a, np.full(a.shape, g * inv))
            else:
                _acc(a, np.repeat(np.expand_dims(g * inv, axis), a.shape[axis], axis=axis))

        return bwd

    return _finish("mean", (a,), out_data, make_bwd)


def gather_rows(table, ids) -> Tensor:
    """Embedding lookup: rows of `table` (V, E) indexed by int array (N,)."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if table.ndim != 2 or ids.ndim != 1:
        raise ShapeError(f"gather: expects table (V, E) and ids (N,), got {table.shape}, {ids.shape}")
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("gather: ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(f"gather: id out of range [0, {table.shape[0]})")
    out_data = table.data[ids]

    def make_bwd(out):
        def bwd(g):
            full = np.zeros_like(table.data)
            np.add.at(full, ids, g)
            _acc(table, full)

        return bwd

    return _finish("gather", (table,), out_data, make_bwd)


def pick(a, ids) -> Tensor:
    """Per-row column selection: a (N, M), ids (N,) -> (N, 1)."""
    a = _as_tensor(a)
    ids = np.asarray(ids)
    if a.ndim != 2 or ids.shape != (a.shape[0],):
        raise ShapeError(f"pick: expects (N, M) and ids (N,), got {a.shape}, {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= a.shape[1]):
        raise ValueError(f"pick: id out of range [0, {a.shape[1]})")
    rows = np.arange(a.shape[0])
    out_data = a.data[rows, ids].reshape(-1, 1)

    def make_bwd(out):
        def bwd(g):
            full = np.zeros_like(a.data)
            full[rows, ids] = g[:, 0]
            _acc(a, full)

        return bwd

    return _finish("pick", (a,), out_data, make_bwd)


def _needs(t: Tensor) -> bool:
    tape = _active_tape()
    return t.requires_grad or (tape is not None and t.tape is tape)


# Registry used by op_forward and the per-primitive property tests.
OPS: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "matmul": matmul,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "relu": relu,
    "log": log,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "concat": concat,
    "slice": narrow,
    "reshape": reshape,
    "transpose": transpose,
    "tile": tile_rows,
    "sum": tsum,
    "mean": tmean,
    "gather": gather_rows,
    "pick": pick,
}


def op_forward(kind: str, inputs: Sequence[Tensor], **kwargs) -> Tensor:
    """Dispatch a primitive by name. Unknown kinds and bad shapes are rejected."""
    fn = OPS.get(kind)
    if fn is None:
        raise KeyError(f"op_forward: unknown op kind {kind!r}")
    if kind == "concat":
        return fn(inputs, **kwargs)
    return fn(*inputs, **kwargs)


def backward(graph: Graph, loss: Tensor) -> None:
    """Module-level alias for Graph.backward."""
    graph.backward(loss)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def grad_check(f, point: Tensor, step: float) -> float:
    """Max relative error between the analytic gradient of the scalar
    function ``f`` at ``point`` and central finite differences with ``step``.

    Error per coordinate is |analytic - central| / max(1, |analytic|, |central|).
    """
    if step <= 0:
        raise ValueError(f"grad_check: step must be positive, got {step}")
    x = Tensor(np.array(point.data, dtype=np.float64, copy=True), requires_grad=True)
    g = Graph()
    with g:
        loss = f(x)
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ShapeError("grad_check: f must return a scalar tensor")
    g.backward(loss)
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)

    flat = x.data.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(Tensor._make(x.data)).item()
        flat[i] = orig - step
        fm = f(Tensor._make(x.data)).item()
        flat[i] = orig
        central = (fp - fm) / (2.0 * step)
        denom = max(1.0, abs(analytic[i]), abs(central))
        worst = max(worst, abs(analytic[i] - central) / denom)
    return worst


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    """State for SGD (stateless) or Adam (moments + step counter)."""

    kind: str
    learning_rate: float
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    @classmethod
    def sgd(cls, lr: float) -> "OptimizerState":
        return cls(kind="sgd", learning_rate=lr)

    @classmethod
    def adam(cls, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8) -> "OptimizerState":
        return cls(kind="adam", learning_rate=lr, b1=b1, b2=b2, eps=eps)


def apply_update(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: OptimizerState):
    """Apply one optimizer step in place. Gradients align 1:1 with params."""
    if len(params) != len(grads):
        raise ValueError(f"apply_update: {len(params)} params vs {len(grads)} grads")
    for p, g in zip(params, grads):
        if np.shape(g) != p.shape:
            raise ValueError(f"apply_update: grad shape {np.shape(g)} != param shape {p.shape}")

    lr = state.learning_rate
    if state.kind == "sgd":
        for p, g in zip(params, grads):
            p.data -= lr * g
        return params

    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ValueError("apply_update: optimizer state sized for a different parameter set")
    state.step_count += 1
    t = state.step_count
    b1, b2, eps = state.b1, state.b2, state.eps
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params


def collect_grads(params: Sequence[Tensor]) -> list[np.ndarray]:
    """Read accumulated gradients, substituting zeros for untouched params."""
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None
