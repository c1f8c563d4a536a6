"""A small define-by-run reverse-mode autodiff over float64 numpy arrays.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure pushing the output gradient back to them.  ``Tensor.backward`` walks
that graph in reverse topological order, so fan-out gradients add up.

Only what the counting model needs is here: (sparse) matrix products,
concatenation, elementwise arithmetic with numpy broadcasting, the two
activations, reductions and squared norms.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from countgnn._kernels import csr_matmul

__all__ = [
    "Tensor",
    "SparseOp",
    "no_grad",
    "track_kinks",
    "matvec",
    "linear",
    "add",
    "sub",
    "hadamard",
    "scale",
    "add_const",
    "concat",
    "leaky_relu",
    "relu",
    "sigmoid",
    "absolute",
    "total",
    "sum_rows",
    "mean_rows",
    "sq_norm",
    "spmm",
    "finite_diff_check",
    "FDReport",
]

_grad_enabled = True
_kink_log: list[np.ndarray] | None = None


@contextlib.contextmanager
def no_grad():
    """Skip tape construction (inference)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def track_kinks():
    """Collect the inputs of every non-smooth op evaluated inside the block."""
    global _kink_log
    prev, _kink_log = _kink_log, []
    try:
        yield _kink_log
    finally:
        _kink_log = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        if self.data.ndim > 2:
            raise ValueError("tensors are vectors or matrices")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def check_finite(self) -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"non-finite values in {self!r}")
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return hadamard(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_same_or_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from None


# ---------------------------------------------------------------------------
# products


def matvec(w: Tensor, x: Tensor) -> Tensor:
    """``w @ x`` for ``w`` of shape (m, n) and ``x`` of shape (n,)."""
    if w.data.ndim != 2 or x.data.ndim != 1 or w.shape[1] != x.shape[0]:
        raise ValueError(f"matvec: shapes {w.shape} and {x.shape} do not conform")

    def back(g):
        if w.requires_grad:
            w._accumulate(np.outer(g, x.data))
        if x.requires_grad:
            x._accumulate(w.data.T @ g)

    return _result(w.data @ x.data, (w, x), back)


def linear(x: Tensor, w: Tensor) -> Tensor:
    """Row-wise ``W x_i``: ``x`` is (k, n) or (n,), ``w`` is (m, n)."""
    if w.data.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ValueError(f"linear: shapes {x.shape} and {w.shape} do not conform")

    def back(g):
        if w.requires_grad:
            w._accumulate(g.T @ x.data if x.data.ndim == 2 else np.outer(g, x.data))
        if x.requires_grad:
            x._accumulate(g @ w.data)

    return _result(x.data @ w.data.T, (x, w), back)


@dataclass(frozen=True)
class SparseOp:
    """A constant sparse matrix with its transpose, both in CSR form."""

    shape: tuple[int, int]
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    t_indptr: np.ndarray
    t_indices: np.ndarray
    t_data: np.ndarray

    @classmethod
    def from_coo(cls, rows, cols, vals, shape: tuple[int, int]) -> "SparseOp":
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)

        def csr(r, c, v, n):
            if r.size and np.all(r[1:] >= r[:-1]):
                # already row-major: a stable sort on columns is enough
                same = r[1:] == r[:-1]
                if np.all(c[1:][same] >= c[:-1][same]):
                    order = slice(None)
                else:
                    order = np.lexsort((c, r))
            else:
                order = np.lexsort((c, r))
            ptr = np.concatenate([[0], np.cumsum(np.bincount(r, minlength=n))]).astype(np.int64)
            return ptr, np.ascontiguousarray(c[order]), np.ascontiguousarray(v[order])

        a = csr(rows, cols, vals, shape[0])
        if rows.size and np.all(rows[1:] >= rows[:-1]):
            # stable column sort of row-major entries is already (col, row) ordered
            t = np.argsort(cols, kind="stable")
            ptr = np.concatenate([[0], np.cumsum(np.bincount(cols, minlength=shape[1]))]).astype(np.int64)
            b = (ptr, np.ascontiguousarray(rows[t]), np.ascontiguousarray(vals[t]))
        else:
            b = csr(cols, rows, vals, shape[1])
        return cls(shape, *a, *b)

    def dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        rows = np.repeat(np.arange(self.shape[0]), np.diff(self.indptr))
        np.add.at(out, (rows, self.indices), self.data)
        return out


def spmm(op: SparseOp, x: Tensor) -> Tensor:
    """``op @ x`` for a constant sparse ``op`` and a dense (k, d) ``x``."""
    if x.data.ndim != 2 or x.shape[0] != op.shape[1]:
        raise ValueError(f"spmm: operator {op.shape} and tensor {x.shape} do not conform")
    xd = np.ascontiguousarray(x.data)

    def back(g):
        x._accumulate(csr_matmul(op.t_indptr, op.t_indices, op.t_data, np.ascontiguousarray(g), op.shape[1]))

    return _result(csr_matmul(op.indptr, op.indices, op.data, xd, op.shape[0]), (x,), back)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_or_broadcast(a, b, "add")

    def back(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_or_broadcast(a, b, "sub")

    def back(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(-_unbroadcast(g, b.shape))

    return _result(a.data - b.data, (a, b), back)


def hadamard(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_or_broadcast(a, b, "hadamard")

    def back(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), back)


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), lambda g: a._accumulate(g * c))


def add_const(a: Tensor, c: float) -> Tensor:
    return _result(a.data + c, (a,), lambda g: a._accumulate(g))


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat of nothing")
    ax = axis % parts[0].data.ndim
    try:
        data = np.concatenate([p.data for p in parts], axis=ax)
    except ValueError:
        raise ValueError(f"concat: shapes {[p.shape for p in parts]} do not conform") from None
    bounds = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def back(g):
        for p, piece in zip(parts, np.split(g, bounds, axis=ax)):
            if p.requires_grad:
                p._accumulate(piece)

    return _result(data, parts, back)


def _log_kink(x: np.ndarray) -> None:
    if _kink_log is not None:
        _kink_log.append(x.copy())


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    # kink at 0 takes the slope side
    _log_kink(x.data)
    pos = x.data > 0
    return _result(np.where(pos, x.data, slope * x.data), (x,), lambda g: x._accumulate(np.where(pos, g, slope * g)))


def relu(x: Tensor) -> Tensor:
    _log_kink(x.data)
    pos = x.data > 0
    return _result(np.where(pos, x.data, 0.0), (x,), lambda g: x._accumulate(np.where(pos, g, 0.0)))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _result(y, (x,), lambda g: x._accumulate(g * y * (1.0 - y)))


def absolute(x: Tensor) -> Tensor:
    _log_kink(x.data)
    sign = np.sign(x.data)
    return _result(np.abs(x.data), (x,), lambda g: x._accumulate(g * sign))


# ---------------------------------------------------------------------------
# reductions


def total(x: Tensor) -> Tensor:
    """Sum of all entries, as a shape-(1,) tensor."""
    return _result(np.array([x.data.sum()]), (x,), lambda g: x._accumulate(np.full_like(x.data, g[0])))


def sq_norm(x: Tensor) -> Tensor:
    return _result(np.array([np.sum(x.data * x.data)]), (x,), lambda g: x._accumulate(2.0 * g[0] * x.data))


def sum_rows(rows: Sequence[Tensor] | Tensor) -> Tensor:
    """Elementwise sum of equally shaped vectors, or column sums of a matrix."""
    if isinstance(rows, Tensor):
        m = rows
        if m.data.ndim != 2:
            raise ValueError("sum_rows expects a matrix or a list of vectors")
        return _result(m.data.sum(axis=0), (m,), lambda g: m._accumulate(np.broadcast_to(g, m.shape)))
    rows = list(rows)
    if not rows:
        raise ValueError("sum_rows of an empty list")
    out = rows[0]
    for r in rows[1:]:
        out = add(out, r)
    return out


def mean_rows(rows: Sequence[Tensor] | Tensor) -> Tensor:
    if isinstance(rows, Tensor):
        k = rows.shape[0]
    else:
        rows = list(rows)
        k = len(rows)
    if k == 0:
        raise ValueError("mean of an empty set is undefined")
    return scale(sum_rows(rows), 1.0 / k)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class FDReport:
    max_rel_err: float
    worst: tuple[str, tuple[int, ...]] | None
    checked: int
    skipped_kinks: int
    per_param: dict[str, float] = field(default_factory=dict)
    min_kink_distance: float = float("inf")
    tol: float = 1e-5

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_rel_err <= self.tol


def _branch_signature(log: Iterable[np.ndarray]) -> np.ndarray:
    parts = [np.sign(x).ravel() for x in log]
    return np.concatenate(parts) if parts else np.zeros(0)


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-6,
    tol: float = 1e-5,
    max_coords_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> FDReport:
    """Compare reverse-mode gradients of ``f`` against central differences.

    The relative error of a coordinate is
    ``|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)``.  Coordinates whose +-h
    perturbation flips the branch of any ReLU/LeakyReLU/abs are skipped and
    counted in ``skipped_kinks``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    for p in params.values():
        p.zero_grad()
    with track_kinks() as log:
        loss = f()
    base_sig = _branch_signature(log)
    min_dist = min((float(np.min(np.abs(x))) for x in log if x.size), default=float("inf"))
    loss.backward()
    ad = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}

    report = FDReport(0.0, None, 0, 0, min_kink_distance=min_dist, tol=tol)
    with no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords_per_param is not None and flat.size > max_coords_per_param:
                coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords_per_param, replace=False)
            worst_here = 0.0
            for i in coords:
                old = flat[i]
                flat[i] = old + h
                with track_kinks() as lp:
                    fp = f().item()
                flat[i] = old - h
                with track_kinks() as lm:
                    fm = f().item()
                flat[i] = old
                sp, sm = _branch_signature(lp), _branch_signature(lm)
                if not (np.array_equal(sp, base_sig) and np.array_equal(sm, base_sig)):
                    report.skipped_kinks += 1
                    continue
                g_fd = (fp - fm) / (2 * h)
                g_ad = float(ad[name].reshape(-1)[i])
                err = abs(g_ad - g_fd) / max(1.0, abs(g_ad), abs(g_fd))
                report.checked += 1
                worst_here = max(worst_here, err)
                if err > report.max_rel_err:
                    report.max_rel_err = err
                    report.worst = (name, tuple(int(j) for j in np.unravel_index(i, p.shape)))
            report.per_param[name] = worst_here
    return report
