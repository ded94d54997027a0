"""Reverse-mode differentiable arrays over numpy with an explicit tape.

Arrays are dense float32/float64 numpy buffers. Operations executed while a
Graph is active are recorded on its tape; ``Graph.backward`` replays the tape
in exact reverse construction order, which is a valid topological order for a
define-by-run graph. Without an active Graph the same operations run as plain
numpy (inference mode). A Graph and the arrays it produced belong to a single
thread; independent graphs may run concurrently.

Broadcasting in elementwise ops is deliberately narrow: the second operand
may be a scalar or a trailing row, nothing else.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import (
    DimensionError,
    GraphError,
    MaskError,
    NumericError,
    VocabularyError,
)

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_GRAPH_STACK: list["Graph"] = []


def active_graph() -> "Graph | None":
    """The innermost recording graph, or None when running untracked."""
    return _GRAPH_STACK[-1] if _GRAPH_STACK else None


class Graph:
    """Tape of operation records, topological order = construction order."""

    __slots__ = ("_records",)

    def __init__(self) -> None:
        self._records: list[Callable[[], None]] = []

    def __enter__(self) -> "Graph":
        _GRAPH_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        popped = _GRAPH_STACK.pop()
        assert popped is self, "graphs must be exited in LIFO order"
        return False

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: "DiffArray") -> None:
        """Accumulate d(loss)/d(leaf) into every tracked leaf of the tape."""
        if loss.data.size != 1:
            raise GraphError(f"loss must be scalar, got shape {loss.shape}")
        if loss._graph is not self:
            raise GraphError("loss was not produced by this graph")
        loss.grad = np.ones_like(loss.data)
        for record in reversed(self._records):
            record()


class DiffArray:
    """A dense numeric array with an optional same-shape gradient buffer.

    Tracked arrays participate in differentiation. Leaves constructed with
    ``tracked=True`` (model parameters) get a zero gradient buffer up front,
    so after a backward pass every leaf holds a fully accumulated gradient.
    Intermediate results allocate their buffer lazily during backward.
    """

    __slots__ = ("data", "grad", "tracked", "node_id", "_graph")

    def __init__(self, data, tracked: bool = False, dtype=None) -> None:
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.tracked = bool(tracked)
        self.grad = np.zeros_like(arr) if tracked else None
        self.node_id: int | None = None
        self._graph: Graph | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.tracked:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad = None

    def __repr__(self) -> str:
        tag = "tracked" if self.tracked else "const"
        return f"DiffArray(shape={self.shape}, dtype={self.data.dtype}, {tag})"

    def __matmul__(self, other: "DiffArray") -> "DiffArray":
        return matmul(self, other)

    def __add__(self, other: "DiffArray") -> "DiffArray":
        return add(self, other)

    def __sub__(self, other: "DiffArray") -> "DiffArray":
        return sub(self, other)

    def __mul__(self, other: "DiffArray") -> "DiffArray":
        return mul(self, other)


def constant(data, dtype=None) -> DiffArray:
    """Untracked array, used for masks, literals, and frozen inputs."""
    return DiffArray(data, tracked=False, dtype=dtype)


def _make(data: np.ndarray, tracked: bool) -> DiffArray:
    out = DiffArray.__new__(DiffArray)
    out.data = data
    out.grad = None
    out.tracked = tracked
    out.node_id = None
    out._graph = None
    return out


def _out(data: np.ndarray, inputs: Sequence[DiffArray]) -> tuple[DiffArray, Graph | None]:
    """Wrap an op result; return the graph to record on, if recording."""
    tracked = any(x.tracked for x in inputs)
    out = _make(data, tracked)
    g = active_graph()
    if g is not None and tracked:
        out._graph = g
        out.node_id = len(g._records)
        return out, g
    return out, None


def _accum(x: DiffArray, g: np.ndarray, own: bool) -> None:
    """Add a gradient contribution to x; ``own`` means g is a fresh buffer."""
    if x.grad is None:
        x.grad = g if own else g.copy()
    else:
        x.grad += g


def _check_same_dtype(a: DiffArray, b: DiffArray) -> None:
    if a.data.dtype != b.data.dtype:
        raise DimensionError(
            f"mixed dtypes {a.data.dtype} and {b.data.dtype}; cast inputs explicitly"
        )


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to a broadcast operand's shape."""
    for _ in range(g.ndim - len(shape)):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# core ops
# ---------------------------------------------------------------------------


def matmul(a: DiffArray, b: DiffArray) -> DiffArray:
    """Matrix product; dA = g @ B.T, dB = A.T @ g."""
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} vs {b.shape}")
    _check_same_dtype(a, b)
    out, g = _out(a.data @ b.data, (a, b))
    if g is not None:
        def _bw(out=out, a=a, b=b):
            go = out.grad
            if go is None:
                return
            if a.tracked:
                _accum(a, go @ b.data.T, own=True)
            if b.tracked:
                _accum(b, a.data.T @ go, own=True)
        g._records.append(_bw)
    return out


def _broadcast_ok(a: DiffArray, b: DiffArray) -> bool:
    """Allowed: equal shapes, b scalar, or b a trailing row of a 2-d a."""
    if a.shape == b.shape:
        return True
    if b.data.size == 1 and b.ndim <= 2:
        return True
    if a.ndim == 2 and b.shape in ((a.shape[1],), (1, a.shape[1])):
        return True
    return False


def add(a: DiffArray, b: DiffArray) -> DiffArray:
    if not _broadcast_ok(a, b):
        raise DimensionError(f"cannot broadcast {b.shape} onto {a.shape} in add")
    _check_same_dtype(a, b)
    out, g = _out(a.data + b.data, (a, b))
    if g is not None:
        def _bw(out=out, a=a, b=b):
            go = out.grad
            if go is None:
                return
            if a.tracked:
                _accum(a, go, own=False)
            if b.tracked:
                _accum(b, _reduce_to(go, b.shape), own=b.shape != go.shape)
        g._records.append(_bw)
    return out


def sub(a: DiffArray, b: DiffArray) -> DiffArray:
    if not _broadcast_ok(a, b):
        raise DimensionError(f"cannot broadcast {b.shape} onto {a.shape} in sub")
    _check_same_dtype(a, b)
    out, g = _out(a.data - b.data, (a, b))
    if g is not None:
        def _bw(out=out, a=a, b=b):
            go = out.grad
            if go is None:
                return
            if a.tracked:
                _accum(a, go, own=False)
            if b.tracked:
                _accum(b, -_reduce_to(go, b.shape), own=True)
        g._records.append(_bw)
    return out


def mul(a: DiffArray, b: DiffArray) -> DiffArray:
    if not _broadcast_ok(a, b):
        raise DimensionError(f"cannot broadcast {b.shape} onto {a.shape} in mul")
    _check_same_dtype(a, b)
    out, g = _out(a.data * b.data, (a, b))
    if g is not None:
        def _bw(out=out, a=a, b=b):
            go = out.grad
            if go is None:
                return
            if a.tracked:
                _accum(a, go * b.data, own=True)
            if b.tracked:
                _accum(b, _reduce_to(go * a.data, b.shape), own=True)
        g._records.append(_bw)
    return out


def ewise(kind: str, a: DiffArray, b: DiffArray) -> DiffArray:
    """Dispatch on kind in {'add', 'sub', 'mul'}."""
    try:
        fn = {"add": add, "sub": sub, "mul": mul}[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(a, b)


def scale(x: DiffArray, alpha: float) -> DiffArray:
    """Multiply by a python scalar constant."""
    a = x.data.dtype.type(alpha)
    out, g = _out(x.data * a, (x,))
    if g is not None:
        def _bw(out=out, x=x, a=a):
            go = out.grad
            if go is None:
                return
            _accum(x, go * a, own=True)
        g._records.append(_bw)
    return out


def tanh(x: DiffArray) -> DiffArray:
    out, g = _out(np.tanh(x.data), (x,))
    if g is not None:
        def _bw(out=out, x=x):
            go = out.grad
            if go is None:
                return
            _accum(x, go * (1.0 - out.data * out.data), own=True)
        g._records.append(_bw)
    return out


def sigmoid(x: DiffArray) -> DiffArray:
    # 1/(1+exp(-x)) via tanh for stability at large |x|
    y = 0.5 * (np.tanh(0.5 * x.data) + 1.0)
    out, g = _out(y.astype(x.data.dtype, copy=False), (x,))
    if g is not None:
        def _bw(out=out, x=x):
            go = out.grad
            if go is None:
                return
            _accum(x, go * out.data * (1.0 - out.data), own=True)
        g._records.append(_bw)
    return out


def activation(kind: str, x: DiffArray) -> DiffArray:
    """Dispatch on kind in {'tanh', 'sigmoid'}."""
    try:
        fn = {"tanh": tanh, "sigmoid": sigmoid}[kind]
    except KeyError:
        raise ValueError(f"unknown activation kind {kind!r}") from None
    return fn(x)


def softmax_masked(scores: DiffArray, mask) -> DiffArray:
    """Row-wise masked softmax, stabilized by per-row max subtraction.

    Masked positions come out exactly zero; each row with at least one
    unmasked position sums to one. 1-d input is treated as a single row.
    """
    m = np.asarray(mask, dtype=bool)
    if m.shape != scores.shape:
        raise DimensionError(f"mask shape {m.shape} != scores shape {scores.shape}")
    s2 = scores.data.reshape(1, -1) if scores.ndim == 1 else scores.data
    m2 = m.reshape(1, -1) if m.ndim == 1 else m
    if not m2.any(axis=1).all():
        raise MaskError("softmax mask excludes every position in some row")
    shifted = np.where(m2, s2, -np.inf)
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    e = np.where(m2, np.exp(shifted), 0.0).astype(scores.data.dtype, copy=False)
    y = e / e.sum(axis=1, keepdims=True)
    out, g = _out(y.reshape(scores.shape), (scores,))
    if g is not None:
        def _bw(out=out, scores=scores):
            go = out.grad
            if go is None:
                return
            y2 = out.data.reshape(1, -1) if out.data.ndim == 1 else out.data
            g2 = go.reshape(1, -1) if go.ndim == 1 else go
            dot = (g2 * y2).sum(axis=1, keepdims=True)
            _accum(scores, (y2 * (g2 - dot)).reshape(scores.shape), own=True)
        g._records.append(_bw)
    return out


def embed(table: DiffArray, ids) -> DiffArray:
    """Row gather from an embedding table; gradient scatters additively."""
    idx = np.asarray(ids, dtype=np.int64).reshape(-1)
    if table.ndim != 2:
        raise DimensionError(f"embedding table must be 2-d, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise VocabularyError(
            f"token id out of range [0, {table.shape[0]}): {idx.min()}..{idx.max()}"
        )
    out, g = _out(table.data[idx], (table,))
    if g is not None:
        def _bw(out=out, table=table, idx=idx):
            go = out.grad
            if go is None:
                return
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, idx, go)
        g._records.append(_bw)
    return out


def concat(parts: Sequence[DiffArray], axis: int) -> DiffArray:
    if axis not in (0, 1):
        raise DimensionError(f"concat axis must be 0 or 1, got {axis}")
    if not parts:
        raise DimensionError("concat of zero parts")
    out, g = _out(np.concatenate([p.data for p in parts], axis=axis), parts)
    if g is not None:
        sizes = [p.shape[axis] for p in parts]

        def _bw(out=out, parts=tuple(parts), sizes=tuple(sizes), axis=axis):
            go = out.grad
            if go is None:
                return
            off = 0
            for p, size in zip(parts, sizes):
                if p.tracked:
                    seg = go[off:off + size] if axis == 0 else go[:, off:off + size]
                    _accum(p, seg, own=False)
                off += size
        g._records.append(_bw)
    return out


def slice_rows(x: DiffArray, start: int, stop: int) -> DiffArray:
    out, g = _out(x.data[start:stop].copy(), (x,))
    if g is not None:
        def _bw(out=out, x=x, start=start, stop=stop):
            go = out.grad
            if go is None:
                return
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[start:stop] += go
        g._records.append(_bw)
    return out


def slice_cols(x: DiffArray, start: int, stop: int) -> DiffArray:
    if x.ndim != 2:
        raise DimensionError(f"slice_cols needs a 2-d array, got {x.shape}")
    out, g = _out(x.data[:, start:stop].copy(), (x,))
    if g is not None:
        def _bw(out=out, x=x, start=start, stop=stop):
            go = out.grad
            if go is None:
                return
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[:, start:stop] += go
        g._records.append(_bw)
    return out


def reshape(x: DiffArray, shape: tuple[int, ...]) -> DiffArray:
    if int(np.prod(shape)) != x.data.size:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}")
    out, g = _out(x.data.reshape(shape).copy(), (x,))
    if g is not None:
        def _bw(out=out, x=x):
            go = out.grad
            if go is None:
                return
            _accum(x, go.reshape(x.shape), own=False)
        g._records.append(_bw)
    return out


def clone(x: DiffArray) -> DiffArray:
    """Fresh copy of the values; gradient passes through unchanged."""
    out, g = _out(x.data.copy(), (x,))
    if g is not None:
        def _bw(out=out, x=x):
            go = out.grad
            if go is None:
                return
            _accum(x, go, own=False)
        g._records.append(_bw)
    return out


def repeat_rows(x: DiffArray, k: int) -> DiffArray:
    """Repeat each row k times consecutively; gradient sums the copies."""
    if x.ndim != 2:
        raise DimensionError(f"repeat_rows needs a 2-d array, got {x.shape}")
    out, g = _out(np.repeat(x.data, k, axis=0), (x,))
    if g is not None:
        def _bw(out=out, x=x, k=k):
            go = out.grad
            if go is None:
                return
            _accum(x, go.reshape(x.shape[0], k, x.shape[1]).sum(axis=1), own=True)
        g._records.append(_bw)
    return out


def sum_row_blocks(x: DiffArray, k: int) -> DiffArray:
    """Sum every k consecutive rows; the adjoint of repeat_rows."""
    if x.ndim != 2 or x.shape[0] % k != 0:
        raise DimensionError(f"sum_row_blocks: {x.shape} not divisible into blocks of {k}")
    out, g = _out(x.data.reshape(x.shape[0] // k, k, x.shape[1]).sum(axis=1), (x,))
    if g is not None:
        def _bw(out=out, x=x, k=k):
            go = out.grad
            if go is None:
                return
            _accum(x, np.repeat(go, k, axis=0), own=True)
        g._records.append(_bw)
    return out


def scale_rows(x: DiffArray, s: DiffArray) -> DiffArray:
    """Multiply row i of x by scalar s[i]; s has shape (m,) or (m, 1)."""
    if x.ndim != 2:
        raise DimensionError(f"scale_rows needs a 2-d array, got {x.shape}")
    if s.shape not in ((x.shape[0],), (x.shape[0], 1)):
        raise DimensionError(f"row scales {s.shape} do not match rows of {x.shape}")
    _check_same_dtype(x, s)
    col = s.data.reshape(-1, 1)
    out, g = _out(x.data * col, (x, s))
    if g is not None:
        def _bw(out=out, x=x, s=s, col=col):
            go = out.grad
            if go is None:
                return
            if x.tracked:
                _accum(x, go * col, own=True)
            if s.tracked:
                _accum(s, (go * x.data).sum(axis=1).reshape(s.shape), own=True)
        g._records.append(_bw)
    return out


def gather_cols(x: DiffArray, ids) -> DiffArray:
    """Pick one column per row: out[i, 0] = x[i, ids[i]]."""
    if x.ndim != 2:
        raise DimensionError(f"gather_cols needs a 2-d array, got {x.shape}")
    idx = np.asarray(ids, dtype=np.int64).reshape(-1)
    if idx.shape[0] != x.shape[0]:
        raise DimensionError(f"need one column id per row: {idx.shape[0]} vs {x.shape[0]}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[1]):
        raise VocabularyError(f"column id out of range [0, {x.shape[1]})")
    rows = np.arange(x.shape[0])
    out, g = _out(x.data[rows, idx].reshape(-1, 1).copy(), (x,))
    if g is not None:
        def _bw(out=out, x=x, rows=rows, idx=idx):
            go = out.grad
            if go is None:
                return
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            np.add.at(x.grad, (rows, idx), go[:, 0])
        g._records.append(_bw)
    return out


def log(x: DiffArray) -> DiffArray:
    if np.any(x.data <= 0):
        raise NumericError("log of a non-positive value; clamp inputs first")
    out, g = _out(np.log(x.data), (x,))
    if g is not None:
        def _bw(out=out, x=x):
            go = out.grad
            if go is None:
                return
            _accum(x, go / x.data, own=True)
        g._records.append(_bw)
    return out


def clamp_min(x: DiffArray, lo: float) -> DiffArray:
    """max(x, lo) elementwise; gradient blocked where the clamp engaged."""
    out, g = _out(np.maximum(x.data, x.data.dtype.type(lo)), (x,))
    if g is not None:
        passed = x.data >= lo

        def _bw(out=out, x=x, passed=passed):
            go = out.grad
            if go is None:
                return
            _accum(x, go * passed, own=True)
        g._records.append(_bw)
    return out


def total_sum(x: DiffArray) -> DiffArray:
    """Sum of all entries, as a 0-d scalar."""
    out, g = _out(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,))
    if g is not None:
        def _bw(out=out, x=x):
            go = out.grad
            if go is None:
                return
            if x.grad is None:
                x.grad = np.full(x.shape, go, dtype=x.data.dtype)
            else:
                x.grad += go
        g._records.append(_bw)
    return out


def backward(loss: DiffArray) -> None:
    """Run the backward pass of the graph that produced ``loss``."""
    if loss._graph is None:
        raise GraphError("loss is not attached to a recording graph")
    loss._graph.backward(loss)


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    """Worst relative errors of analytic gradients vs central differences."""

    max_rel_err: float
    per_param: dict[str, float]
    n_checked: int


def grad_check_report(
    fn: Callable[[Mapping[str, DiffArray]], DiffArray],
    params: Mapping[str, DiffArray],
    eps: float = 1e-5,
    n_samples: int = 200,
    seed: int = 0,
) -> GradCheckReport:
    """Compare tape gradients of ``fn(params)`` against central differences.

    ``fn`` must be deterministic (no dropout) and return a scalar DiffArray.
    Checks all coordinates when there are at most ``n_samples`` of them,
    otherwise a seeded sample spread over every parameter. Relative error is
    |a - n| / max(|a|, |n|, 1e-8). Use float64 parameters; float32 cannot
    meet tight tolerances.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    names = list(params.keys())
    for name in names:
        params[name].zero_grad()
    with Graph() as g:
        loss = fn(params)
        if not np.isfinite(loss.item()):
            raise NumericError("loss is not finite at the evaluation point")
        g.backward(loss)
    analytic = {name: params[name].grad.copy() for name in names}

    sizes = {name: params[name].data.size for name in names}
    total = sum(sizes.values())
    rng = np.random.default_rng(seed)
    coords: list[tuple[str, int]] = []
    if total <= n_samples:
        for name in names:
            coords.extend((name, i) for i in range(sizes[name]))
    else:
        for name in names:
            want = max(1, round(n_samples * sizes[name] / total))
            want = min(want, sizes[name])
            picks = rng.choice(sizes[name], size=want, replace=False)
            coords.extend((name, int(i)) for i in picks)

    def eval_loss() -> float:
        value = fn(params).item()
        if not np.isfinite(value):
            raise NumericError("loss became non-finite during finite differencing")
        return value

    worst: dict[str, float] = {name: 0.0 for name in names}
    for name, flat in coords:
        buf = params[name].data.reshape(-1)
        orig = buf[flat]
        buf[flat] = orig + eps
        f_plus = eval_loss()
        buf[flat] = orig - eps
        f_minus = eval_loss()
        buf[flat] = orig
        numeric = (f_plus - f_minus) / (2.0 * eps)
        a = float(analytic[name].reshape(-1)[flat])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        if rel > worst[name]:
            worst[name] = rel
    return GradCheckReport(
        max_rel_err=max(worst.values()) if worst else 0.0,
        per_param=worst,
        n_checked=len(coords),
    )


def grad_check(
    fn: Callable[[Mapping[str, DiffArray]], DiffArray],
    params: Mapping[str, DiffArray],
    eps: float = 1e-5,
    n_samples: int = 200,
    seed: int = 0,
) -> float:
    """Worst relative error over sampled coordinates; see grad_check_report."""
    return grad_check_report(fn, params, eps=eps, n_samples=n_samples, seed=seed).max_rel_err
