"""Dense reverse-mode differentiation on top of numpy.

Every differentiable op appends a record to the active :class:`Tape`;
``Tape.backward`` walks the records in reverse exactly once.  Tensors are
always float64.

    with Tape() as tape:
        y = ops.relu(x @ w).sum()
    tape.backward(y)
    w.grad
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import erf

_state = threading.local()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    @property
    def T(self):
        return transpose(self)


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered log of differentiable operations for one forward pass."""

    def __init__(self):
        self.records: list[_Record] = []
        self._prev: Tape | None = None

    def __enter__(self) -> "Tape":
        self._prev = getattr(_state, "tape", None)
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = self._prev

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor, grad: np.ndarray | float | None = None) -> None:
        if grad is None:
            if loss.data.size != 1:
                raise ValueError(f"backward needs an explicit grad for shape {loss.shape}")
            grad = np.ones_like(loss.data)
        loss.grad = np.broadcast_to(np.asarray(grad, dtype=np.float64), loss.shape).copy()
        for rec in reversed(self.records):
            g = rec.out.grad
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = np.array(gi, dtype=np.float64, copy=True)
                else:
                    inp.grad = inp.grad + gi
        self.records.clear()


def current_tape() -> Tape | None:
    return getattr(_state, "tape", None)


def no_grad() -> Tape:
    """A throwaway tape; nothing recorded on it is ever differentiated."""
    return _NullTape()


class _NullTape(Tape):
    def __enter__(self):
        self._prev = getattr(_state, "tape", None)
        _state.tape = None
        return self


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if debug_checks and not np.all(np.isfinite(out.data)):
        raise FloatingPointError(f"non-finite values produced by {backward.__qualname__}")
    tape = current_tape()
    if needs and tape is not None:
        tape.records.append(_Record(out, inputs, backward))
    return out


debug_checks = False


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit(a.data * b.data, (a, b), backward)


class KinkMonitor:
    """Records the smallest ``|x|`` seen by :func:`relu` (distance to the kink).

    Finite differences across a ReLU kink are meaningless, so gradient tests
    use this to reject instances whose pre-activations sit too close to 0.
    """

    def __init__(self):
        self.margin = np.inf

    def __enter__(self) -> "KinkMonitor":
        self._prev = getattr(_state, "kinks", None)
        _state.kinks = self
        return self

    def __exit__(self, *exc) -> None:
        _state.kinks = self._prev


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    mon = getattr(_state, "kinks", None)
    if mon is not None and x.data.size:
        mon.margin = min(mon.margin, float(np.abs(x.data).min()))

    def backward(g):
        return (g * mask,)

    return _emit(x.data * mask, (x,), backward)


_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data ** 2)
        return (g * (cdf + x.data * pdf),)

    return _emit(x.data * cdf, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    s = np.empty_like(x.data)
    pos = x.data >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    s[~pos] = e / (1.0 + e)

    def backward(g):
        return (g * s * (1.0 - s),)

    return _emit(s, (x,), backward)


def sqrt(x: Tensor) -> Tensor:
    r = np.sqrt(x.data)

    def backward(g):
        return (g * 0.5 / r,)

    return _emit(r, (x,), backward)


# linear algebra and reductions ---------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit(a.data @ b.data, (a, b), backward)


def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _emit(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape),)

    return _emit(x.data.mean(axis=axis, keepdims=keepdims), (x,), backward)


def transpose(x: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _emit(np.transpose(x.data, axes), (x,), backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    def backward(g):
        return (g.reshape(x.shape),)

    return _emit(x.data.reshape(shape), (x,), backward)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = tuple(as_tensor(x) for x in xs)
    try:
        data = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise ValueError(f"concat: incompatible shapes {[x.shape for x in xs]}") from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit(data, xs, backward)


def _scatter_matrix(index: np.ndarray, size: int) -> sp.csr_matrix:
    m = len(index)
    return sp.csr_matrix((np.ones(m), (index, np.arange(m))), shape=(size, m))


def gather(x: Tensor, index: np.ndarray) -> Tensor:
    """Row gather ``x[index]``; repeated indices accumulate in backward."""
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise ValueError(f"gather: index out of range for {x.shape[0]} rows")

    def backward(g):
        flat = g.reshape(len(index), -1)
        out = _scatter_matrix(index, x.shape[0]) @ flat
        return (np.asarray(out).reshape(x.shape),)

    return _emit(x.data[index], (x,), backward)


def softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _emit(s, (x,), backward)


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance (no affine terms)."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def backward(g):
        d = x.shape[-1]
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _emit(y, (x,), backward)


def sparse_matmul(s: sp.spmatrix, x: Tensor) -> Tensor:
    """Constant sparse matrix times dense tensor; backward uses the transpose."""
    if s.shape[1] != x.shape[0]:
        raise ValueError(f"sparse_matmul: incompatible shapes {s.shape} and {x.shape}")
    s = sp.csr_matrix(s)
    st = None

    def backward(g):
        nonlocal st
        if st is None:
            st = s.T.tocsr()
        return (np.asarray(st @ g),)

    return _emit(np.asarray(s @ x.data), (x,), backward)


# segment ops ---------------------------------------------------------------

def segment_matrix(assignment: np.ndarray, num_segments: int) -> sp.csr_matrix:
    """``num_segments x n`` row-normalised membership matrix."""
    assignment = np.asarray(assignment, dtype=np.int64)
    counts = np.bincount(assignment, minlength=num_segments)
    if np.any(counts == 0):
        empty = np.flatnonzero(counts == 0)
        raise ValueError(f"segment_mean: empty segment(s) {empty.tolist()}")
    n = len(assignment)
    return sp.csr_matrix(
        (1.0 / counts[assignment], (assignment, np.arange(n))), shape=(num_segments, n)
    )


def membership_mean_matrix(rows: np.ndarray, cols: np.ndarray, num_segments: int, n: int) -> sp.csr_matrix:
    """Row-normalised membership for possibly overlapping segments given as (segment, node) pairs."""
    counts = np.bincount(rows, minlength=num_segments)
    if np.any(counts == 0):
        empty = np.flatnonzero(counts == 0)
        raise ValueError(f"segment_mean: empty segment(s) {empty.tolist()}")
    return sp.csr_matrix((1.0 / counts[rows], (rows, cols)), shape=(num_segments, n))


def segment_mean(h: Tensor, assignment: np.ndarray, num_segments: int) -> Tensor:
    return sparse_matmul(segment_matrix(assignment, num_segments), h)


def broadcast_matrix(assignment: np.ndarray, num_segments: int) -> sp.csr_matrix:
    n = len(assignment)
    return sp.csr_matrix((np.ones(n), (np.arange(n), assignment)), shape=(n, num_segments))


def segment_broadcast(f: Tensor, assignment: np.ndarray) -> Tensor:
    """Row ``v`` of the result is ``f[assignment[v]]``."""
    assignment = np.asarray(assignment, dtype=np.int64)
    return gather(f, assignment)


def sparse_neighbor_aggregate(graph, h: Tensor, weights=None) -> Tensor:
    """Row ``v`` = sum over neighbours ``u`` of ``w_vu * h_u``.

    ``weights`` is aligned with the CSR order of ``graph``: ``None`` (unit),
    a constant array of shape ``(E,)``, or a Tensor of shape ``(E,)`` or
    ``(E, d)`` (learned, e.g. edge gates).
    """
    n_edges = len(graph.indices)
    if weights is None or not isinstance(weights, Tensor):
        w = np.ones(n_edges) if weights is None else np.asarray(weights, dtype=np.float64)
        if w.shape != (n_edges,):
            raise ValueError(f"sparse_neighbor_aggregate: {w.shape[0]} weights for {n_edges} edges")
        a = sp.csr_matrix((w, graph.indices, graph.indptr), shape=(graph.num_nodes,) * 2)
        return sparse_matmul(a, h)
    if weights.shape[0] != n_edges:
        raise ValueError(f"sparse_neighbor_aggregate: {weights.shape[0]} weights for {n_edges} edges")
    src = graph.indices
    dst = np.repeat(np.arange(graph.num_nodes), np.diff(graph.indptr))
    msgs = gather(h, src)
    w = weights if weights.ndim == 2 else reshape(weights, (n_edges, 1))
    return scatter_sum(msgs * w, dst, graph.num_nodes)


def scatter_sum(x: Tensor, index: np.ndarray, size: int) -> Tensor:
    index = np.asarray(index, dtype=np.int64)
    s = _scatter_matrix(index, size)

    def backward(g):
        return (g[index],)

    return _emit(np.asarray(s @ x.data), (x,), backward)


# losses --------------------------------------------------------------------

def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over rows."""
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    rows = np.arange(len(labels))
    loss = -logp[rows, labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (g * p / len(labels),)

    return _emit(np.asarray(loss), (logits,), backward)


def binary_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean BCE-with-logits over all entries; NaN targets are ignored."""
    y = np.asarray(targets, dtype=np.float64)
    mask = ~np.isnan(y)
    y = np.where(mask, y, 0.0)
    x = logits.data
    per = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    count = max(mask.sum(), 1)

    def backward(g):
        s = 1.0 / (1.0 + np.exp(-x))
        return (g * (s - y) * mask / count,)

    return _emit(np.asarray((per * mask).sum() / count), (logits,), backward)


def l1_loss(pred: Tensor, targets: np.ndarray) -> Tensor:
    y = np.asarray(targets, dtype=np.float64).reshape(pred.shape)
    diff = pred.data - y

    def backward(g):
        return (g * np.sign(diff) / diff.size,)

    return _emit(np.asarray(np.abs(diff).mean()), (pred,), backward)


# verification --------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    per_input: list[float]
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def grad_check(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare tape gradients of scalar ``fn()`` against central differences.

    The relative error of an input is ``max|analytic - numeric|`` divided by
    the larger of the two gradients' max-norms.
    """
    for t in inputs:
        t.grad = None
    with Tape() as tape:
        out = fn()
    if out.data.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    tape.backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    errors = []
    with no_grad():
        for t, a in zip(inputs, analytic):
            numeric = np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            nflat = numeric.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(fn().data)
                flat[i] = orig - h
                fm = float(fn().data)
                flat[i] = orig
                nflat[i] = (fp - fm) / (2 * h)
            scale = max(np.abs(a).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
            errors.append(float(np.abs(a - numeric).max(initial=0.0) / scale))
    return GradCheckReport(max(errors, default=0.0), errors, tol)


# checkpoints ---------------------------------------------------------------

def save_checkpoint(params: dict[str, Tensor], path: str | Path) -> None:
    """Write ``<path>.bin`` (float64, little-endian, concatenated) and ``<path>.json``."""
    path = Path(path)
    manifest, offset, chunks = [], 0, []
    for name, t in params.items():
        arr = np.asarray(t.data, dtype="<f8", order="C")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        chunks.append(arr.reshape(-1))
    blob = np.concatenate(chunks) if chunks else np.zeros(0)
    path.with_suffix(".bin").write_bytes(blob.astype("<f8").tobytes())
    path.with_suffix(".json").write_text(json.dumps({"dtype": "float64", "tensors": manifest}, indent=1))


def load_checkpoint(path: str | Path) -> dict[str, Tensor]:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    blob = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
    params = {}
    for entry in manifest["tensors"]:
        size = int(np.prod(entry["shape"]))
        arr = blob[entry["offset"]: entry["offset"] + size].reshape(tuple(entry["shape"])).copy()
        params[entry["name"]] = Tensor(arr, requires_grad=True, name=entry["name"])
    return params
