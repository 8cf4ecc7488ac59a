"""Dense float64 tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` is an immutable value (numpy array + optional tape node).
Operations are module-level functions; when any operand is tracked on a
:class:`GradGraph` the result is recorded on the same tape so that
:meth:`GradGraph.backward` can replay it in reverse.

Also hosts the flat binary serialization (magic ``MSLT``) and the
finite-difference gradient oracle used throughout the test suite.
"""

from __future__ import annotations

import struct
from typing import Callable, Sequence

import numpy as np

from .errors import (
    ContractViolationError,
    DegenerateVectorError,
    FormatError,
    NumericError,
    OracleFailureError,
    ShapeMismatchError,
)

NORM_FLOOR = 1e-12

VJP = Callable[[np.ndarray], np.ndarray]


def _finite_or_raise(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op}: produced non-finite values")
    return arr


class Tensor:
    """Immutable dense array, optionally tracked on a GradGraph."""

    __slots__ = ("data", "graph", "node_id")

    def __init__(self, data, graph: "GradGraph | None" = None, node_id: int | None = None):
        arr = np.asarray(data, dtype=np.float64)
        arr.setflags(write=False)
        self.data = arr
        self.graph = graph
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def tracked(self) -> bool:
        return self.graph is not None

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, tracked={self.tracked})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("op", "inputs", "value")

    def __init__(self, op: str, inputs: tuple[tuple[int, VJP], ...], value: np.ndarray):
        self.op = op
        self.inputs = inputs  # (parent node id, vector-Jacobian product) pairs
        self.value = value


class GradGraph:
    """Append-only operation tape, replayed backward from a scalar loss."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.grads: list[np.ndarray] | None = None

    def leaf(self, data) -> Tensor:
        arr = np.asarray(data, dtype=np.float64)
        _finite_or_raise(arr, "leaf")
        node_id = len(self.nodes)
        self.nodes.append(_Node("leaf", (), arr))
        return Tensor(arr, self, node_id)

    def backward(self, loss: Tensor) -> None:
        if loss.graph is not self or loss.node_id is None:
            raise ContractViolationError("backward: loss is not tracked on this graph")
        if loss.data.size != 1:
            raise ContractViolationError(
                f"backward: loss must be scalar, got shape {loss.shape}"
            )
        grads = [np.zeros_like(n.value) for n in self.nodes]
        grads[loss.node_id] = np.ones_like(self.nodes[loss.node_id].value)
        touched = [False] * len(self.nodes)
        touched[loss.node_id] = True
        for nid in range(loss.node_id, -1, -1):
            if not touched[nid]:
                continue
            node = self.nodes[nid]
            g = grads[nid]
            for parent_id, vjp in node.inputs:
                grads[parent_id] = grads[parent_id] + vjp(g)
                touched[parent_id] = True
        self.grads = grads

    def grad(self, t: Tensor) -> np.ndarray:
        if self.grads is None:
            raise ContractViolationError("grad: call backward first")
        if t.graph is not self or t.node_id is None:
            raise ContractViolationError("grad: tensor is not tracked on this graph")
        return self.grads[t.node_id]


def _record(op: str, out: np.ndarray, parents: Sequence[tuple[Tensor, VJP]]) -> Tensor:
    _finite_or_raise(out, op)
    tracked = [(t, vjp) for t, vjp in parents if t.tracked]
    if not tracked:
        return Tensor(out)
    graph = tracked[0][0].graph
    for t, _ in tracked[1:]:
        if t.graph is not graph:
            raise ContractViolationError(f"{op}: operands live on different graphs")
    node_id = len(graph.nodes)
    graph.nodes.append(_Node(op, tuple((t.node_id, vjp) for t, vjp in tracked), out))
    return Tensor(out, graph, node_id)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeMismatchError("add", a.shape, b.shape) from None
    return _record("add", out, [(a, lambda g: _unbroadcast(g, a.shape)),
                                (b, lambda g: _unbroadcast(g, b.shape))])


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeMismatchError("sub", a.shape, b.shape) from None
    return _record("sub", out, [(a, lambda g: _unbroadcast(g, a.shape)),
                                (b, lambda g: -_unbroadcast(g, b.shape))])


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeMismatchError("mul", a.shape, b.shape) from None
    return _record("mul", out, [(a, lambda g: _unbroadcast(g * b.data, a.shape)),
                                (b, lambda g: _unbroadcast(g * a.data, b.shape))])


def scale(a: Tensor, s: float) -> Tensor:
    a = _as_tensor(a)
    return _record("scale", a.data * s, [(a, lambda g: g * s)])


def neg(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    return _record("neg", -a.data, [(a, lambda g: -g)])


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):  # overflow surfaces as NumericError below
        out = np.exp(a.data)
    return _record("exp", out, [(a, lambda g: g * out)])


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    return _record("log", np.log(a.data), [(a, lambda g: g / a.data)])


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.data, 0.0)
    mask = a.data > 0.0
    return _record("relu", out, [(a, lambda g: g * mask)])


def sum_all(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    return _record("sum", np.asarray(a.data.sum()),
                   [(a, lambda g: np.broadcast_to(g, a.shape).copy())])


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    out = a.data @ b.data
    return _record("matmul", out, [(a, lambda g: g @ b.data.T),
                                   (b, lambda g: a.data.T @ g)])


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    return _record("transpose", a.data.T.copy(), [(a, lambda g: g.T)])


def narrow(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice along one axis (differentiable view copy)."""
    a = _as_tensor(a)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def vjp(g: np.ndarray) -> np.ndarray:
        full = np.zeros(a.shape)
        full[idx] = g
        return full

    return _record("narrow", a.data[idx].copy(), [(a, vjp)])


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(shape)
    return _record("reshape", out.copy(), [(a, lambda g: g.reshape(a.shape))])


def stack_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Stack 1-D tensors into a matrix; gradient splits back per row."""
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractViolationError("stack_rows: empty sequence")
    d = tensors[0].shape
    for t in tensors:
        if t.shape != d:
            raise ShapeMismatchError("stack_rows", d, t.shape)
    out = np.stack([t.data for t in tensors])
    parents = [(t, (lambda i: lambda g: g[i])(i)) for i, t in enumerate(tensors)]
    return _record("stack_rows", out, parents)


def diag_part(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeMismatchError("diag_part", a.shape)
    n = a.shape[0]

    def vjp(g: np.ndarray) -> np.ndarray:
        full = np.zeros((n, n))
        np.fill_diagonal(full, g)
        return full

    return _record("diag_part", np.diagonal(a.data).copy(), [(a, vjp)])


# ---------------------------------------------------------------------------
# geometry ops used by the losses


def l2_normalize(v: Tensor, floor: float = NORM_FLOOR) -> Tensor:
    """Unit-normalize a vector, or each row of a matrix.

    A norm at or below ``floor`` signals a collapsed embedding and raises
    rather than clamping.
    """
    v = _as_tensor(v)
    if v.data.ndim == 1:
        norms = np.linalg.norm(v.data)
        if norms <= floor:
            raise DegenerateVectorError(f"l2_normalize: norm {norms:.3e} <= floor {floor:.0e}")
        out = v.data / norms

        def vjp(g: np.ndarray) -> np.ndarray:
            return g / norms - v.data * (g @ v.data) / norms**3

        return _record("l2_normalize", out, [(v, vjp)])
    if v.data.ndim == 2:
        norms = np.linalg.norm(v.data, axis=1, keepdims=True)
        if np.any(norms <= floor):
            raise DegenerateVectorError("l2_normalize: a row norm is at/below the floor")
        out = v.data / norms

        def vjp2(g: np.ndarray) -> np.ndarray:
            dots = np.sum(g * v.data, axis=1, keepdims=True)
            return g / norms - v.data * dots / norms**3

        return _record("l2_normalize", out, [(v, vjp2)])
    raise ShapeMismatchError("l2_normalize", v.shape)


def pairwise_dist(a: Tensor, b: Tensor) -> Tensor:
    """Matrix of Euclidean distances between rows of ``a`` and rows of ``b``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeMismatchError("pairwise_dist", a.shape, b.shape)
    diff = a.data[:, None, :] - b.data[None, :, :]  # n x m x d
    dist = np.sqrt(np.maximum(np.einsum("ijk,ijk->ij", diff, diff), 0.0))
    safe = np.maximum(dist, NORM_FLOOR)

    def vjp_a(g: np.ndarray) -> np.ndarray:
        return np.einsum("ij,ijk->ik", g / safe, diff)

    def vjp_b(g: np.ndarray) -> np.ndarray:
        return -np.einsum("ij,ijk->jk", g / safe, diff)

    return _record("pairwise_dist", dist, [(a, vjp_a), (b, vjp_b)])


def logsumexp_rows(a: Tensor) -> Tensor:
    """Row-wise log-sum-exp with the usual max-subtraction guard."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeMismatchError("logsumexp_rows", a.shape)
    m = a.data.max(axis=1, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=1, keepdims=True)
    out = (m + np.log(s)).ravel()
    soft = e / s

    def vjp(g: np.ndarray) -> np.ndarray:
        return soft * g[:, None]

    return _record("logsumexp_rows", out, [(a, vjp)])


# ---------------------------------------------------------------------------
# verification oracle


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor | np.ndarray,
                      h: float = 1e-5) -> float:
    """Max relative error between central differences and the tape gradient."""
    x = _as_tensor(x)
    graph = GradGraph()
    leaf = graph.leaf(x.data)
    loss = f(leaf)
    if loss.tracked:
        graph.backward(loss)
        analytic = graph.grad(leaf)
    else:
        analytic = np.zeros_like(x.data)

    def eval_at(arr: np.ndarray) -> float:
        val = f(Tensor(arr)).data
        if not np.all(np.isfinite(val)):
            raise OracleFailureError("finite_diff_check: non-finite function value")
        return float(val)

    flat = x.data.ravel()
    worst = 0.0
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + h
        up = eval_at(bumped.reshape(x.shape))
        bumped[i] = flat[i] - h
        down = eval_at(bumped.reshape(x.shape))
        numeric = (up - down) / (2.0 * h)
        ana = analytic.ravel()[i]
        worst = max(worst, abs(numeric - ana) / (abs(ana) + 1e-8))
    return worst


# ---------------------------------------------------------------------------
# serialization: magic "MSLT", version, rank + extents as u64 LE, f64 LE data

_MAGIC = b"MSLT"
_VERSION = 1


def tensor_to_bytes(t: Tensor) -> bytes:
    shape = t.data.shape
    head = _MAGIC + bytes([_VERSION]) + struct.pack("<Q", len(shape))
    head += struct.pack(f"<{len(shape)}Q", *shape) if shape else b""
    return head + t.data.astype("<f8").tobytes()


def tensor_from_bytes(buf: bytes) -> Tensor:
    if len(buf) < 13 or buf[:4] != _MAGIC:
        raise FormatError("tensor: bad magic")
    if buf[4] != _VERSION:
        raise FormatError(f"tensor: unsupported version {buf[4]}")
    (rank,) = struct.unpack_from("<Q", buf, 5)
    off = 13
    if len(buf) < off + 8 * rank:
        raise FormatError("tensor: truncated extents")
    shape = struct.unpack_from(f"<{rank}Q", buf, off) if rank else ()
    off += 8 * rank
    count = int(np.prod(shape)) if shape else 1
    if len(buf) != off + 8 * count:
        raise FormatError("tensor: truncated or oversized payload")
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=off)
    return Tensor(data.reshape(shape).copy())


def save_tensor(t: Tensor, path) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())
