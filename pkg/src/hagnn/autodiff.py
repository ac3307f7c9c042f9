"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the primitives the HA-GNN layers need are provided.  Every layer in the
package is a composition of these; there is no per-layer backward code except
for the discrete node selection of top-k pooling, which is handled by treating
the selected index set as a constant.

Recording happens only while a :class:`Tape` is active::

    with Tape() as tape:
        loss = F.sum(F.mul(x, x))
    tape.backward(loss)
    x.grad

Outside a tape, operations run eagerly and record nothing (inference mode).
"""

from __future__ import annotations

import os
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Tensor", "Tape", "DimensionError", "NumericError", "GradStateError",
    "OracleError", "set_profile", "get_profile", "tensor", "constant",
    "backward", "finite_diff_check", "GradCheckReport",
    "matmul", "add", "sub", "mul", "scalar_mul", "concat_rows", "concat_cols",
    "slice2d", "sum", "mean_rows", "sigmoid", "tanh", "relu", "log", "power",
    "clip", "softmax_rows", "gather_rows", "scatter_mean", "segment_max", "spmm",
    "forward_op",
]


class DimensionError(ValueError):
    """Operand shapes do not conform to an op's shape rule."""


class NumericError(FloatingPointError):
    """A NaN or infinite value reached an op boundary."""


class GradStateError(RuntimeError):
    """Backward was called on a tape that is not in a usable state."""


class OracleError(RuntimeError):
    """The finite-difference oracle could not be applied."""


_PROFILE = {"check_finite": os.environ.get("HAGNN_PROFILE", "debug").lower() != "release"}


def set_profile(name: str) -> None:
    """Switch between ``debug`` (NaN/Inf checks on) and ``release``."""
    if name not in ("debug", "release"):
        raise ValueError(f"unknown profile {name!r}")
    _PROFILE["check_finite"] = name == "debug"


def get_profile() -> str:
    return "debug" if _PROFILE["check_finite"] else "release"


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_record")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._record: _OpRecord | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operator sugar, all routed through primitives
    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, float(other))
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _not_scalar(t: Tensor):
    raise DimensionError(f"item() needs a single-element tensor, got shape {t.shape}")


# ---------------------------------------------------------------------------
# tape


@dataclass(eq=False)
class _OpRecord:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    index: int = 0


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


@dataclass
class Tape:
    """Ordered op records of one forward pass; single owner, one backward."""

    records: list[_OpRecord] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def _record(self, rec: _OpRecord) -> None:
        if self.consumed:
            raise GradStateError("tape already consumed by backward; start a new forward pass")
        rec.index = len(self.records)
        self.records.append(rec)
        rec.output._record = rec

    def dump(self) -> str:
        """Text listing of the tape, one line per op record."""
        ids: dict[int, str] = {}

        def ref(t: Tensor) -> str:
            if id(t) not in ids:
                ids[id(t)] = t.name or f"%{len(ids)}"
            return ids[id(t)]

        lines = []
        for rec in self.records:
            ins = ", ".join(f"{ref(t)}{list(t.shape)}" for t in rec.inputs)
            lines.append(f"{rec.index:4d} {rec.kind:<13} ({ins}) -> {ref(rec.output)}{list(rec.output.shape)}")
        return "\n".join(lines)

    def backward(self, loss: Tensor, leaves: Sequence[Tensor] = ()) -> None:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every requires_grad leaf.

        Leaves listed in ``leaves`` that the loss does not depend on receive a
        zero gradient.
        """
        if self.consumed:
            raise GradStateError("backward already ran on this tape")
        if loss.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        rec = loss._record
        if rec is None or rec.index >= len(self.records) or self.records[rec.index] is not rec:
            raise GradStateError("loss was not produced on this tape (or has no requires_grad inputs)")
        self.consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        seen_leaves: dict[int, Tensor] = {}
        for rec in reversed(self.records[: loss._record.index + 1]):
            g_out = grads.pop(id(rec.output), None)
            if g_out is None:
                continue
            g_ins = rec.backward(g_out)
            for t, g in zip(rec.inputs, g_ins):
                if g is None or not t.requires_grad:
                    continue
                if t._record is None:
                    seen_leaves[id(t)] = t
                prev = grads.get(id(t))
                grads[id(t)] = g if prev is None else prev + g
        for key, leaf in seen_leaves.items():
            g = grads[key]
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        for leaf in leaves:
            if leaf.requires_grad and id(leaf) not in seen_leaves and leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
        for rec in self.records:
            rec.output._record = None


def backward(tape: Tape, loss: Tensor, leaves: Sequence[Tensor] = ()) -> None:
    tape.backward(loss, leaves)


def _check(kind: str, *arrays: np.ndarray) -> None:
    if _PROFILE["check_finite"]:
        for a in arrays:
            if not np.all(np.isfinite(a)):
                raise NumericError(f"{kind}: non-finite value encountered")


def _emit(kind: str, inputs: tuple[Tensor, ...], out: np.ndarray, bwd) -> Tensor:
    _check(kind, out)
    needs = any(t.requires_grad for t in inputs)
    result = Tensor.__new__(Tensor)
    result.data = out
    result.requires_grad = needs
    result.grad = None
    result.name = None
    result._record = None
    tape = _active_tape()
    if needs and tape is not None:
        tape._record(_OpRecord(kind, inputs, result, bwd))
    return result


def _inputs(kind: str, *ts: Tensor) -> tuple[Tensor, ...]:
    ts = tuple(_wrap(t) for t in ts)
    _check(kind, *(t.data for t in ts))
    return ts


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(m, k) @ (k, n) -> (m, n)."""
    a, b = _inputs("matmul", a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data
    return _emit("matmul", (a, b), A @ B, lambda g: (g @ B.T, A.T @ g))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting (bias rows, column gates)."""
    a, b = _inputs("add", a, b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), a.data + b.data, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scalar_mul(b, -1.0))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _inputs("mul", a, b)
    _broadcast_shape("mul", a, b)
    A, B = a.data, b.data
    return _emit("mul", (a, b), A * B,
                 lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)))


def scalar_mul(a: Tensor, c: float) -> Tensor:
    (a,) = _inputs("scalar_mul", a)
    c = float(c)
    return _emit("scalar_mul", (a,), a.data * c, lambda g: (g * c,))


def concat_rows(ts: Sequence[Tensor]) -> Tensor:
    ts = _inputs("concat_rows", *ts)
    if not ts:
        raise DimensionError("concat_rows: empty input list")
    cols = {t.shape[1:] for t in ts}
    if len(cols) != 1 or ts[0].data.ndim != 2:
        raise DimensionError(f"concat_rows: column shapes differ {[t.shape for t in ts]}")
    bounds = np.cumsum([0] + [t.shape[0] for t in ts])
    out = np.concatenate([t.data for t in ts], axis=0)
    return _emit("concat_rows", ts, out,
                 lambda g: tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(ts))))


def concat_cols(ts: Sequence[Tensor]) -> Tensor:
    ts = _inputs("concat_cols", *ts)
    if not ts:
        raise DimensionError("concat_cols: empty input list")
    rows = {t.shape[0] for t in ts}
    if len(rows) != 1 or any(t.data.ndim != 2 for t in ts):
        raise DimensionError(f"concat_cols: row counts differ {[t.shape for t in ts]}")
    bounds = np.cumsum([0] + [t.shape[1] for t in ts])
    out = np.concatenate([t.data for t in ts], axis=1)
    return _emit("concat_cols", ts, out,
                 lambda g: tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(ts))))


def slice2d(a: Tensor, rows: slice = slice(None), cols: slice = slice(None)) -> Tensor:
    (a,) = _inputs("slice", a)
    if a.data.ndim != 2:
        raise DimensionError(f"slice: expected 2-D tensor, got {a.shape}")
    key = (rows, cols)
    out = a.data[key].copy()
    if out.size == 0:
        raise DimensionError(f"slice: empty selection from {a.shape}")
    shape = a.shape

    def bwd(g):
        full = np.zeros(shape)
        full[key] = g
        return (full,)

    return _emit("slice", (a,), out, bwd)


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors the op name
    (a,) = _inputs("sum", a)
    shape = a.shape
    return _emit("sum", (a,), np.array(a.data.sum()), lambda g: (np.full(shape, float(g)),))


def mean_rows(a: Tensor) -> Tensor:
    """Column means over rows: (n, c) -> (1, c)."""
    (a,) = _inputs("mean_rows", a)
    if a.data.ndim != 2 or a.shape[0] == 0:
        raise DimensionError(f"mean_rows: expected non-empty 2-D tensor, got {a.shape}")
    n = a.shape[0]
    out = _segment_means(a.data, np.zeros(n, dtype=np.int64), 1)[0]
    return _emit("mean_rows", (a,), out, lambda g: (np.repeat(g / n, n, axis=0),))


def sigmoid(a: Tensor) -> Tensor:
    (a,) = _inputs("sigmoid", a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _emit("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    (a,) = _inputs("tanh", a)
    out = np.tanh(a.data)
    return _emit("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    (a,) = _inputs("relu", a)
    mask = a.data > 0
    return _emit("relu", (a,), a.data * mask, lambda g: (g * mask,))


def log(a: Tensor) -> Tensor:
    (a,) = _inputs("log", a)
    x = a.data
    if np.any(x <= 0):
        raise NumericError("log: non-positive input")
    return _emit("log", (a,), np.log(x), lambda g: (g / x,))


def power(a: Tensor, p: float) -> Tensor:
    """Elementwise ``a ** p`` for a constant exponent; base must be positive
    unless ``p`` is a non-negative integer."""
    (a,) = _inputs("power", a)
    x, p = a.data, float(p)
    if not (p.is_integer() and p >= 0) and np.any(x <= 0):
        raise NumericError(f"power: non-positive base with exponent {p}")
    out = x ** p
    if p == 0:
        return _emit("power", (a,), out, lambda g: (np.zeros_like(x),))
    return _emit("power", (a,), out, lambda g: (g * p * x ** (p - 1.0),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp into [lo, hi]; zero gradient where clamped."""
    (a,) = _inputs("clip", a)
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _emit("clip", (a,), np.clip(x, lo, hi), lambda g: (g * inside,))


def softmax_rows(a: Tensor) -> Tensor:
    (a,) = _inputs("softmax_rows", a)
    if a.data.ndim != 2:
        raise DimensionError(f"softmax_rows: expected 2-D tensor, got {a.shape}")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _emit("softmax_rows", (a,), out, bwd)


def gather_rows(a: Tensor, index) -> Tensor:
    """Select rows ``a[index]`` (repeats allowed)."""
    (a,) = _inputs("gather_rows", a)
    idx = np.asarray(index, dtype=np.int64)
    if a.data.ndim != 2 or idx.ndim != 1:
        raise DimensionError(f"gather_rows: need 2-D tensor and 1-D index, got {a.shape}, {idx.shape}")
    n = a.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise DimensionError(f"gather_rows: index out of range for {n} rows")
    shape = a.shape

    def bwd(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _emit("gather_rows", (a,), a.data[idx], bwd)


def _segment_means(x: np.ndarray, index: np.ndarray, n_segments: int):
    """Segment means (zeros for empty segments) and per-segment counts."""
    counts = np.bincount(index, minlength=n_segments)
    out = np.zeros((n_segments,) + x.shape[1:])
    present = np.flatnonzero(counts)
    if present.size:
        order = np.argsort(index, kind="stable")
        starts = np.concatenate([[0], np.cumsum(counts[present])[:-1]])
        out[present] = np.add.reduceat(x[order], starts, axis=0) / counts[present][:, None]
    return out, counts


def scatter_mean(a: Tensor, index, n_segments: int) -> Tensor:
    """Row means grouped by ``index``: (n, c) -> (n_segments, c); empty groups give 0."""
    (a,) = _inputs("scatter_mean", a)
    idx = np.asarray(index, dtype=np.int64)
    if a.data.ndim != 2 or idx.shape != (a.shape[0],):
        raise DimensionError(f"scatter_mean: index shape {idx.shape} does not match rows of {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= n_segments):
        raise DimensionError(f"scatter_mean: segment id out of range [0, {n_segments})")
    out, counts = _segment_means(a.data, idx, n_segments)
    scale = 1.0 / np.maximum(counts, 1)
    return _emit("scatter_mean", (a,), out, lambda g: ((g * scale[:, None])[idx],))


def segment_max(a: Tensor, index, n_segments: int) -> Tensor:
    """Column-wise max within each row group; ties route the gradient to the
    first row.  Every segment must be non-empty."""
    (a,) = _inputs("segment_max", a)
    idx = np.asarray(index, dtype=np.int64)
    if a.data.ndim != 2 or idx.shape != (a.shape[0],):
        raise DimensionError(f"segment_max: index shape {idx.shape} does not match rows of {a.shape}")
    counts = np.bincount(idx, minlength=n_segments)
    if counts.size != n_segments or np.any(counts == 0):
        raise DimensionError("segment_max: every segment needs at least one row")
    order = np.argsort(idx, kind="stable")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    x = a.data[order]
    out = np.maximum.reduceat(x, starts, axis=0)
    # winning row per (segment, column): first row in segment equal to the max
    seg_sorted = idx[order]
    hit = x == out[seg_sorted]
    c = a.shape[1]
    arg = np.empty((n_segments, c), dtype=np.int64)
    for s in range(n_segments):
        block = hit[starts[s]:starts[s] + counts[s]]
        arg[s] = order[starts[s] + block.argmax(axis=0)]
    shape = a.shape

    def bwd(g):
        full = np.zeros(shape)
        np.add.at(full, (arg, np.broadcast_to(np.arange(c), arg.shape)), g)
        return (full,)

    return _emit("segment_max", (a,), out, bwd)


def spmm(matrix, a: Tensor) -> Tensor:
    """Constant sparse operator applied to a dense tensor: (m, n) @ (n, c)."""
    (a,) = _inputs("spmm", a)
    mat = sp.csr_matrix(matrix)
    if a.data.ndim != 2 or mat.shape[1] != a.shape[0]:
        raise DimensionError(f"spmm: cannot apply {mat.shape} operator to {a.shape}")
    mat_t = mat.T.tocsr()
    return _emit("spmm", (a,), np.asarray(mat @ a.data), lambda g: (np.asarray(mat_t @ g),))


_KINDS = {
    "matmul": matmul, "add": add, "mul": mul, "scalar_mul": scalar_mul,
    "concat_rows": lambda *ts: concat_rows(ts), "concat_cols": lambda *ts: concat_cols(ts),
    "slice": slice2d, "sum": sum, "mean_rows": mean_rows, "sigmoid": sigmoid, "tanh": tanh,
    "relu": relu, "log": log, "power": power, "clip": clip, "softmax_rows": softmax_rows,
    "gather_rows": gather_rows, "scatter_mean": scatter_mean, "segment_max": segment_max,
    "spmm": lambda a, m: spmm(m, a),
}


def forward_op(kind: str, inputs: Sequence, *args):
    """Dispatch by op name; ``args`` carries non-tensor parameters."""
    try:
        fn = _KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, *args)


# ---------------------------------------------------------------------------
# finite-difference oracle


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    n_coords: int
    worst: str = ""
    max_abs_err: float = 0.0

    @property
    def pass_(self) -> bool:
        return self.passed


def _rel_err(a, b):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
                      tol: float = 1e-4, atol: float = 0.0) -> GradCheckReport:
    """Compare backward gradients of ``f()`` against central differences.

    ``f`` must rebuild its output from the current values of ``params`` on
    every call.  Parameter values are perturbed in place and restored.
    Coordinates whose absolute disagreement is at most ``atol`` count as
    exact; this keeps round-off on near-zero gradients from failing a check.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    params = list(params)
    for p in params:
        p.requires_grad = True
        p.grad = None
    v0 = f().item()
    v1 = f().item()
    if v0 != v1:
        raise OracleError(f"f is not deterministic: {v0!r} != {v1!r}")

    with Tape() as tape:
        out = f()
    if out._record is None:
        analytic = [np.zeros_like(p.data) for p in params]
    else:
        tape.backward(out, leaves=params)
        analytic = [p.grad for p in params]

    worst, worst_label, n, worst_abs = 0.0, "", 0, 0.0
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        num = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            num[i] = (fp - fm) / (2.0 * h)
        err = _rel_err(analytic[pi].reshape(-1), num)
        abs_err = np.abs(analytic[pi].reshape(-1) - num)
        if abs_err.size:
            worst_abs = max(worst_abs, float(abs_err.max()))
        if atol > 0:
            err[abs_err <= atol] = 0.0
        n += err.size
        if err.size and err.max() > worst:
            worst = float(err.max())
            worst_label = f"{p.name or f'param{pi}'}[{int(err.argmax())}]"
    for p in params:
        p.grad = None
    return GradCheckReport(worst, worst <= tol, n, worst_label, worst_abs)
