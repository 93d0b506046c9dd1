"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

Every primitive appends one record to the tape of its inputs: the inputs, the
output and a closure mapping the output adjoint to input adjoints.  Only the
primitives the model needs are provided; sparsity is expressed with
``row_gather`` and the ``segment_*`` reductions instead of sparse kernels.

>>> tape = Tape()
>>> x = tape.leaf(np.array(3.0), "x")
>>> grads = backward(tape, x * x)
>>> float(grads[x])
6.0
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import sparse

__all__ = [
    "ContractError", "NumericalError", "Tensor", "Tape", "backward", "grad_check",
    "add", "sub", "scale", "mul", "mul_rows", "matmul", "transpose", "concat",
    "row_gather", "slice_rows", "gather_segment_sum", "segment_sum", "segment_softmax", "l2_normalize_rows",
    "leaky_relu", "sigmoid", "log", "exp", "log_sigmoid", "logsumexp_rows",
    "dot_rows", "mean_rows", "total", "mean_of",
]

LEAKY_SLOPE = 0.2


class ContractError(ValueError):
    """Raised when a primitive receives arguments of incompatible shape or kind."""


class NumericalError(ArithmeticError):
    """Raised when a primitive produces non-finite values."""


class Tensor:
    __slots__ = ("value", "tape", "name", "needs_grad", "is_leaf", "__weakref__")

    def __init__(self, value: np.ndarray, tape: "Tape", name: str | None = None,
                 needs_grad: bool = False, is_leaf: bool = False):
        self.value = value
        self.tape = tape
        self.name = name
        self.needs_grad = needs_grad
        self.is_leaf = is_leaf

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    adjoint: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of primitive applications.

    ``kinks`` collects the inputs of every piecewise-linear primitive so that
    ``grad_check`` can tell when a probe straddles a non-differentiable point.
    """

    def __init__(self, check_finite: bool = True):
        self.records: list[_Record] = []
        self.leaves: list[Tensor] = []
        self.kinks: list[np.ndarray] = []
        # probe tapes of grad_check only need a finite final value
        self.check_finite = check_finite

    def leaf(self, value, name: str | None = None) -> Tensor:
        t = Tensor(np.array(value, dtype=np.float64), self, name, needs_grad=True, is_leaf=True)
        self.leaves.append(t)
        return t

    def constant(self, value, name: str | None = None) -> Tensor:
        return Tensor(np.asarray(value, dtype=np.float64), self, name)

    def record(self, op: str, value: np.ndarray, inputs: tuple[Tensor, ...], adjoint) -> Tensor:
        # a sum is NaN/inf whenever any entry is
        if self.check_finite and not np.isfinite(value.sum()):
            raise NumericalError(f"{op} produced non-finite values")
        needs = any(t.needs_grad for t in inputs)
        out = Tensor(value, self, needs_grad=needs)
        if needs:
            self.records.append(_Record(op, inputs, out, adjoint))
        return out


def _tape_of(*ts: Tensor) -> Tape:
    for t in ts:
        if not isinstance(t, Tensor):
            raise ContractError(f"expected Tensor, got {type(t).__name__}")
    tape = ts[0].tape
    if any(t.tape is not tape for t in ts[1:]):
        raise ContractError("inputs belong to different tapes")
    return tape


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ContractError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _matrix(op: str, x: Tensor) -> None:
    if x.value.ndim != 2:
        raise ContractError(f"{op}: expected a 2-d tensor, got shape {x.shape}")


def _segments(op: str, seg, rows: int, n_segments: int) -> np.ndarray:
    seg = np.asarray(seg, dtype=np.int64)
    if seg.shape != (rows,):
        raise ContractError(f"{op}: segment ids of shape {seg.shape} do not align with {rows} rows")
    if rows and (seg.min() < 0 or seg.max() >= n_segments):
        raise ContractError(f"{op}: segment id outside [0, {n_segments})")
    return seg


# -- elementwise and linear algebra -------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    tape = _tape_of(a, b)
    _same_shape("add", a, b)
    return tape.record("add", a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    tape = _tape_of(a, b)
    _same_shape("sub", a, b)
    return tape.record("sub", a.value - b.value, (a, b), lambda g: (g, -g))


def scale(a: Tensor, c: float) -> Tensor:
    tape = _tape_of(a)
    c = float(c)
    return tape.record("scale", a.value * c, (a,), lambda g: (g * c,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    tape = _tape_of(a, b)
    _same_shape("elementwise_mul", a, b)
    av, bv = a.value, b.value
    return tape.record("elementwise_mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def mul_rows(x: Tensor, w: Tensor) -> Tensor:
    """Scale row ``i`` of ``x`` by ``w[i]``."""
    tape = _tape_of(x, w)
    _matrix("mul_rows", x)
    if w.shape != (x.shape[0],):
        raise ContractError(f"mul_rows: weights {w.shape} do not align with rows of {x.shape}")
    xv, wv = x.value, w.value

    def adjoint(g):
        return g * wv[:, None], np.einsum("ij,ij->i", g, xv)

    return tape.record("mul_rows", xv * wv[:, None], (x, w), adjoint)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    tape = _tape_of(a, b)
    _matrix("matmul", a)
    _matrix("matmul", b)
    if a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    av, bv = a.value, b.value
    return tape.record("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def transpose(a: Tensor) -> Tensor:
    tape = _tape_of(a)
    _matrix("transpose", a)
    return tape.record("transpose", a.value.T.copy(), (a,), lambda g: (g.T,))


def concat(ts: Sequence[Tensor], axis: int = 1) -> Tensor:
    ts = tuple(ts)
    if not ts:
        raise ContractError("concat: no inputs")
    tape = _tape_of(*ts)
    for t in ts:
        _matrix("concat", t)
    other = 1 - axis
    if len({t.shape[other] for t in ts}) != 1:
        raise ContractError(f"concat: shape mismatch {[t.shape for t in ts]}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def adjoint(g):
        if axis == 0:
            return tuple(g[lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:]))
        return tuple(g[:, lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:]))

    return tape.record("concat", np.concatenate([t.value for t in ts], axis=axis), ts, adjoint)


# -- sparse structure via gather / segment ------------------------------------

def row_gather(x: Tensor, idx) -> Tensor:
    tape = _tape_of(x)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ContractError(f"row_gather: index must be 1-d, got shape {idx.shape}")
    n = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ContractError(f"row_gather: index outside [0, {n})")
    return tape.record("row_gather", x.value[idx], (x,), lambda g: (_segsum(g, idx, n),))


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` of a matrix."""
    tape = _tape_of(x)
    _matrix("slice_rows", x)
    n = x.shape[0]
    if not 0 <= start <= stop <= n:
        raise ContractError(f"slice_rows: [{start}, {stop}) outside [0, {n})")

    def adjoint(g):
        full = np.zeros_like(x.value)
        full[start:stop] = g
        return (full,)

    return tape.record("slice_rows", x.value[start:stop], (x,), adjoint)


_OPERATORS: dict[tuple, tuple] = {}
_OPERATOR_CACHE_SIZE = 256
# operators with at most this many entries are kept dense (sparse dispatch
# overhead dominates on toy graphs)
DENSE_LIMIT = 1 << 14


def _as_operator(w, rows, cols, shape):
    op = sparse.csr_matrix((w, (rows, cols)), shape=shape)
    if shape[0] * shape[1] <= DENSE_LIMIT:
        dense = op.toarray()
        return dense, np.ascontiguousarray(dense.T)
    return op, op.T.tocsr()


def _memo(key, refs, build):
    # structures are graph constants reused every step; memoize on array
    # identity (the entry keeps the arrays alive, so the ids stay unique)
    hit = _OPERATORS.get(key)
    if hit is not None and all(a is b for a, b in zip(hit[0], refs)):
        return hit[1]
    ops = build()
    if len(_OPERATORS) >= _OPERATOR_CACHE_SIZE:
        _OPERATORS.clear()
    _OPERATORS[key] = (refs, ops)
    return ops


def _segsum(values: np.ndarray, seg: np.ndarray, n: int) -> np.ndarray:
    if values.ndim == 1:
        return np.bincount(seg, weights=values, minlength=n).astype(np.float64)
    # summation through a 0/1 indicator matrix is far faster than ufunc.at
    op = _memo(("segsum", id(seg), seg.size, n), (seg,),
               lambda: _as_operator(np.ones(seg.size), seg, np.arange(seg.size), (n, seg.size)))[0]
    return np.asarray(op @ values)


def _operator(src, dst, coef, n_out: int, n_in: int):
    def build():
        s = np.asarray(src, dtype=np.int64)
        d = _segments("gather_segment_sum", dst, s.size, n_out)
        if s.shape != d.shape or (s.size and (s.min() < 0 or s.max() >= n_in)):
            raise ContractError(f"gather_segment_sum: source ids must align with targets and lie in [0, {n_in})")
        w = np.ones(s.size) if coef is None else np.asarray(coef, dtype=np.float64)
        if w.shape != s.shape:
            raise ContractError(f"gather_segment_sum: {w.size} coefficients for {s.size} edges")
        return _as_operator(w, d, s, (n_out, n_in))

    return _memo(("gss", id(src), id(dst), id(coef), n_out, n_in), (src, dst, coef), build)


def gather_segment_sum(x: Tensor, src, dst, n_out: int, coef=None) -> Tensor:
    """``out[d] = sum over edges k with dst[k] == d of coef[k] * x[src[k]]``.

    Equivalent to ``segment_sum(mul_rows(row_gather(x, src), coef), dst, n_out)``
    for constant ``coef``, evaluated as one product with a sparse 0/coef matrix.
    """
    tape = _tape_of(x)
    _matrix("gather_segment_sum", x)
    n_in = x.shape[0]
    op, op_t = _operator(src, dst, coef, n_out, n_in)
    return tape.record("gather_segment_sum", np.asarray(op @ x.value), (x,), lambda g: (np.asarray(op_t @ g),))


def segment_sum(x: Tensor, seg, n_segments: int) -> Tensor:
    """Sum rows of ``x`` sharing a segment id; empty segments give zero rows."""
    tape = _tape_of(x)
    seg = _segments("segment_sum", seg, x.shape[0], n_segments)
    return tape.record("segment_sum", _segsum(x.value, seg, n_segments), (x,),
                       lambda g: (g[seg],))


def segment_softmax(v: Tensor, seg, n_segments: int) -> Tensor:
    tape = _tape_of(v)
    if v.value.ndim != 1:
        raise ContractError(f"segment_softmax: expected 1-d scores, got shape {v.shape}")
    seg = _segments("segment_softmax", seg, v.shape[0], n_segments)
    peak = np.full(n_segments, -np.inf)
    np.maximum.at(peak, seg, v.value)
    ex = np.exp(v.value - peak[seg])
    y = ex / _segsum(ex, seg, n_segments)[seg]

    def adjoint(g):
        return (y * (g - _segsum(g * y, seg, n_segments)[seg]),)

    return tape.record("segment_softmax", y, (v,), adjoint)


def l2_normalize_rows(x: Tensor) -> Tensor:
    """Unit-normalize each row; all-zero rows stay zero and pass no gradient."""
    tape = _tape_of(x)
    _matrix("l2_normalize_rows", x)
    # scale by the row max so tiny rows do not underflow to a zero norm
    peak = np.abs(x.value).max(axis=1) if x.shape[1] else np.zeros(x.shape[0])
    live = peak > 0
    scaled = x.value / np.where(live, peak, 1.0)[:, None]
    norm = peak * np.sqrt(np.einsum("ij,ij->i", scaled, scaled))
    safe = np.where(live, norm, 1.0)
    y = x.value / safe[:, None]
    inv = np.where(live, 1.0 / safe, 0.0)

    def adjoint(g):
        proj = np.einsum("ij,ij->i", g, y)
        return ((g - y * proj[:, None]) * inv[:, None],)

    return tape.record("l2_normalize_rows", y, (x,), adjoint)


# -- nonlinearities ----------------------------------------------------------

def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    tape = _tape_of(x)
    xv = x.value
    tape.kinks.append(xv)
    d = np.where(xv > 0, 1.0, slope)
    return tape.record("leaky_relu", xv * d, (x,), lambda g: (g * d,))


def sigmoid(x: Tensor) -> Tensor:
    tape = _tape_of(x)
    y = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    return tape.record("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def log(x: Tensor) -> Tensor:
    tape = _tape_of(x)
    xv = x.value
    if np.any(xv <= 0):
        raise NumericalError("log of a non-positive value")
    return tape.record("log", np.log(xv), (x,), lambda g: (g / xv,))


def exp(x: Tensor) -> Tensor:
    tape = _tape_of(x)
    with np.errstate(over="ignore"):
        y = np.exp(x.value)
    return tape.record("exp", y, (x,), lambda g: (g * y,))


def log_sigmoid(x: Tensor) -> Tensor:
    """``log(sigmoid(x))`` without underflow for large negative inputs."""
    tape = _tape_of(x)
    xv = x.value
    y = -np.logaddexp(0.0, -xv)
    return tape.record("log_sigmoid", y, (x,), lambda g: (g * 0.5 * (1.0 - np.tanh(0.5 * xv)),))


def logsumexp_rows(x: Tensor) -> Tensor:
    tape = _tape_of(x)
    _matrix("logsumexp_rows", x)
    peak = x.value.max(axis=1, keepdims=True)
    ex = np.exp(x.value - peak)
    s = ex.sum(axis=1, keepdims=True)
    soft = ex / s
    return tape.record("logsumexp_rows", (peak + np.log(s))[:, 0], (x,),
                       lambda g: (soft * g[:, None],))


# -- reductions --------------------------------------------------------------

def dot_rows(a: Tensor, b: Tensor) -> Tensor:
    tape = _tape_of(a, b)
    _matrix("dot_rows", a)
    _same_shape("dot_rows", a, b)
    av, bv = a.value, b.value
    return tape.record("dot_rows", np.einsum("ij,ij->i", av, bv), (a, b),
                       lambda g: (g[:, None] * bv, g[:, None] * av))


def mean_rows(x: Tensor) -> Tensor:
    tape = _tape_of(x)
    n = x.shape[0]
    if n == 0:
        raise ContractError("mean_rows: no rows")
    return tape.record("mean_rows", x.value.mean(axis=0), (x,),
                       lambda g: (np.broadcast_to(g / n, x.shape).copy(),))


def total(x: Tensor) -> Tensor:
    """Sum of all entries as a scalar tensor."""
    tape = _tape_of(x)
    return tape.record("total", np.array(x.value.sum()), (x,),
                       lambda g: (np.full(x.shape, float(g)),))


def mean_of(ts: Sequence[Tensor]) -> Tensor:
    """Arithmetic mean of equally shaped tensors."""
    ts = list(ts)
    if not ts:
        raise ContractError("mean_of: no inputs")
    acc = ts[0]
    for t in ts[1:]:
        acc = add(acc, t)
    return acc if len(ts) == 1 else scale(acc, 1.0 / len(ts))


# -- reverse pass ------------------------------------------------------------

def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``loss`` for every leaf of ``tape``.

    Leaves with no path to the loss receive zeros.
    """
    if loss.tape is not tape:
        raise ContractError("loss was not produced on this tape")
    if loss.value.shape != ():
        raise ContractError(f"loss must be a scalar, got shape {loss.shape}")
    adj: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for rec in reversed(tape.records):
        g = adj.pop(id(rec.output), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.adjoint(g)):
            if gi is None or not inp.needs_grad:
                continue
            key = id(inp)
            if key in adj:
                adj[key] = adj[key] + gi
            else:
                adj[key] = np.array(gi, dtype=np.float64)
    return {leaf: adj.get(id(leaf), np.zeros_like(leaf.value)) for leaf in tape.leaves}


# -- finite-difference checking -----------------------------------------------

@dataclass
class LeafCheck:
    name: str
    analytic: np.ndarray
    numeric: np.ndarray
    excluded: np.ndarray  # probes that straddled a kink
    nonfinite: np.ndarray  # probes where evaluation blew up
    floor: float = 1e-8

    @property
    def abs_err(self) -> np.ndarray:
        return np.abs(self.analytic - self.numeric)

    @property
    def rel_err(self) -> np.ndarray:
        denom = np.maximum(np.maximum(np.abs(self.analytic), np.abs(self.numeric)), self.floor)
        return self.abs_err / denom

    def _valid(self, arr):
        m = ~(self.excluded | self.nonfinite)
        return arr[m] if m.any() else np.zeros(1)

    @property
    def max_abs(self) -> float:
        return float(self._valid(self.abs_err).max())

    @property
    def max_rel(self) -> float:
        return float(self._valid(self.rel_err).max())


@dataclass
class GradCheckReport:
    tol: float
    floor: float = 0.0
    leaves: dict[str, LeafCheck] = field(default_factory=dict)

    @property
    def max_rel(self) -> float:
        return max((c.max_rel for c in self.leaves.values()), default=0.0)

    @property
    def max_abs(self) -> float:
        return max((c.max_abs for c in self.leaves.values()), default=0.0)

    @property
    def n_excluded(self) -> int:
        return int(sum(c.excluded.sum() for c in self.leaves.values()))

    @property
    def passed(self) -> bool:
        no_blowups = not any(c.nonfinite.any() for c in self.leaves.values())
        return no_blowups and self.max_rel < self.tol

    def summary(self) -> str:
        lines = [f"{name}: max_abs={c.max_abs:.3e} max_rel={c.max_rel:.3e} "
                 f"excluded={int(c.excluded.sum())} nonfinite={int(c.nonfinite.sum())}"
                 for name, c in self.leaves.items()]
        lines.append(f"overall max_rel={self.max_rel:.3e} tol={self.tol:g} floor={self.floor:.1e} "
                     f"{'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


# rounding noise of a central difference is about eps * |f| / h; the automatic
# floor allows this many times that noise as absolute error on tiny entries
FD_NOISE_FACTOR = 10.0


def grad_check(f: Callable[[Mapping[str, Tensor]], Tensor], params: Mapping[str, np.ndarray],
               h: float = 1e-5, tol: float = 1e-6, floor: float | None = None) -> GradCheckReport:
    """Compare analytic gradients of ``f`` with central differences, entry by entry.

    ``f`` receives a mapping of leaf tensors (all on one fresh tape) and returns
    a scalar tensor.  Probes where any ``leaky_relu`` input changes sign between
    ``+h`` and ``-h`` are excluded as non-differentiable points.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``.  With ``floor=None``
    the floor is set where the difference quotient stops resolving the entry:
    ``FD_NOISE_FACTOR * eps * max(1, |f|) / (h * tol)``.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def run(values, probe=False):
        tape = Tape(check_finite=not probe)
        leaves = {k: tape.leaf(v, k) for k, v in values.items()}
        return tape, leaves, f(leaves)

    tape, leaves, loss = run(params)
    grads = backward(tape, loss)
    if floor is None:
        scale = max(1.0, abs(float(loss.value)))
        floor = FD_NOISE_FACTOR * np.finfo(np.float64).eps * scale / (h * tol)
    report = GradCheckReport(tol=tol, floor=floor)
    for name, base in params.items():
        numeric = np.zeros(base.size)
        excluded = np.zeros(base.size, dtype=bool)
        nonfinite = np.zeros(base.size, dtype=bool)
        for i in range(base.size):
            probes, signs = [], []
            for step in (h, -h):
                values = dict(params)
                moved = base.copy().reshape(-1)
                moved[i] += step
                values[name] = moved.reshape(base.shape)
                try:
                    t, _, out = run(values, probe=True)
                except NumericalError:
                    nonfinite[i] = True
                    break
                if not np.isfinite(out.value):
                    nonfinite[i] = True
                    break
                probes.append(float(out.value))
                signs.append([k > 0 for k in t.kinks])
            if nonfinite[i]:
                continue
            if any(not np.array_equal(a, b) for a, b in zip(*signs)):
                excluded[i] = True
            numeric[i] = (probes[0] - probes[1]) / (2 * h)
        report.leaves[name] = LeafCheck(name, grads[leaves[name]].reshape(-1), numeric,
                                        excluded, nonfinite, floor)
    return report
