"""Dense float64 matrix numerics with define-by-run reverse-mode differentiation.

A *matrix* here is simply a 2-D ``float64`` numpy array. Every operation in
this module accepts either plain arrays or :class:`Var` handles. When a
:class:`Tape` is active and at least one operand is a ``Var`` recorded on it,
the result is recorded and returned as a new ``Var``; otherwise the op is a
pure array function and returns an ndarray. Model code written against these
ops therefore runs unchanged for inference (no tape) and training (tape).

Broadcasting is limited to row vectors ``(1, n)``, column vectors ``(m, 1)``
and ``(1, 1)`` scalars.

Example:
    >>> with Tape() as tape:
    ...     w = tape.watch(np.ones((2, 1)), "w")
    ...     loss = sum_all(matmul(np.array([[1.0, 2.0]]), w))
    >>> backward(tape, loss)["w"].ravel().tolist()
    [1.0, 2.0]
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

__all__ = [
    "Var",
    "Tape",
    "GradCheckReport",
    "ParamCheck",
    "as_matrix",
    "value_of",
    "no_tape",
    "inject_fault",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "transpose",
    "relu",
    "softmax_rows",
    "layer_norm",
    "concat_cols",
    "slice_cols",
    "take_rows",
    "sum_all",
    "sum_squares",
    "grouped_matmul_bt",
    "grouped_matmul",
    "backward",
    "grad_check",
]

_local = threading.local()
# ops whose backward rule is deliberately corrupted (fault injection in tests)
_FAULTS: set[str] = set()


def _stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def _current_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


def as_matrix(x) -> np.ndarray:
    """Coerce ``x`` to a C-contiguous 2-D float64 array."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {arr.shape}")
    return arr


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else x


class Var:
    """Handle to a value recorded on a :class:`Tape`."""

    __slots__ = ("value", "index", "tape")

    def __init__(self, value: np.ndarray, index: int, tape: Tape):
        self.value = value
        self.index = index
        self.tape = tape

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(#{self.index}, shape={self.value.shape})"


@dataclass
class _Node:
    op: str
    inputs: tuple[int | None, ...]
    output: int
    backward: Callable


class Tape:
    """Ordered record of primitive operations for one backward pass.

    Nodes are appended as ops execute, so the list is topologically ordered by
    construction. Leaves registered with :meth:`watch` are the parameters whose
    gradients :func:`backward` returns.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.leaves: dict[str, tuple[int, tuple[int, int]]] = {}
        self._next_id = 0

    def __enter__(self) -> Tape:
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def _new_id(self) -> int:
        self._next_id += 1
        return self._next_id - 1

    def watch(self, value, name: str) -> Var:
        if name in self.leaves:
            raise ContractError(f"parameter {name!r} already watched on this tape")
        arr = as_matrix(value)
        idx = self._new_id()
        self.leaves[name] = (idx, arr.shape)
        return Var(arr, idx, self)

    def reset(self) -> None:
        self.nodes.clear()
        self.leaves.clear()
        self._next_id = 0


@contextlib.contextmanager
def no_tape() -> Iterator[None]:
    """Suspend recording; ops inside return plain arrays."""
    _stack().append(None)
    try:
        yield
    finally:
        _stack().pop()


@contextlib.contextmanager
def inject_fault(op: str) -> Iterator[None]:
    """Corrupt the backward rule of ``op`` (scales its input gradients by 1.5)."""
    _FAULTS.add(op)
    try:
        yield
    finally:
        _FAULTS.discard(op)


def _record(op: str, out: np.ndarray, operands: Sequence, rule: Callable):
    tape = _current_tape()
    if tape is None:
        return out
    ids: list[int | None] = []
    tracked = False
    for x in operands:
        if isinstance(x, Var):
            if x.tape is not tape:
                raise ContractError(f"{op}: operand recorded on a different tape")
            ids.append(x.index)
            tracked = True
        else:
            ids.append(None)
    if not tracked:
        return out
    idx = tape._new_id()
    tape.nodes.append(_Node(op, tuple(ids), idx, rule))
    return Var(out, idx, tape)


def _operand(x, op: str) -> np.ndarray:
    arr = x.value if isinstance(x, Var) else as_matrix(x)
    if arr.ndim != 2:
        raise ShapeError(f"{op}: expected a 2-D matrix, got shape {arr.shape}")
    return arr


def _bcast_shape(sa: tuple, sb: tuple, op: str) -> tuple[int, int]:
    out = []
    for da, db in zip(sa, sb):
        if da == db or db == 1:
            out.append(da)
        elif da == 1:
            out.append(db)
        else:
            raise ShapeError(f"{op}: shapes {sa} and {sb} are not conformable")
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


# --------------------------------------------------------------------------
# primitive ops
# --------------------------------------------------------------------------


def matmul(a, b):
    """Matrix product ``a @ b``."""
    A, B = _operand(a, "matmul"), _operand(b, "matmul")
    if A.shape[1] != B.shape[0]:
        raise ShapeError(f"matmul: shapes {A.shape} and {B.shape} are not conformable")
    out = A @ B

    def rule(g, needs):
        return (g @ B.T if needs[0] else None, A.T @ g if needs[1] else None)

    return _record("matmul", out, (a, b), rule)


def add(a, b):
    A, B = _operand(a, "add"), _operand(b, "add")
    _bcast_shape(A.shape, B.shape, "add")
    out = A + B

    def rule(g, needs):
        return (_unbroadcast(g, A.shape) if needs[0] else None,
                _unbroadcast(g, B.shape) if needs[1] else None)

    return _record("add", out, (a, b), rule)


def sub(a, b):
    A, B = _operand(a, "sub"), _operand(b, "sub")
    _bcast_shape(A.shape, B.shape, "sub")
    out = A - B

    def rule(g, needs):
        return (_unbroadcast(g, A.shape) if needs[0] else None,
                -_unbroadcast(g, B.shape) if needs[1] else None)

    return _record("sub", out, (a, b), rule)


def mul(a, b):
    """Elementwise product."""
    A, B = _operand(a, "mul"), _operand(b, "mul")
    _bcast_shape(A.shape, B.shape, "mul")
    out = A * B

    def rule(g, needs):
        return (_unbroadcast(g * B, A.shape) if needs[0] else None,
                _unbroadcast(g * A, B.shape) if needs[1] else None)

    return _record("mul", out, (a, b), rule)


def scale(a, c: float):
    """Multiply by a constant scalar."""
    A = _operand(a, "scale")
    c = float(c)
    out = A * c
    return _record("scale", out, (a,), lambda g, needs: (g * c,))


def transpose(a):
    A = _operand(a, "transpose")
    out = np.ascontiguousarray(A.T)
    return _record("transpose", out, (a,), lambda g, needs: (g.T,))


def relu(a):
    A = _operand(a, "relu")
    mask = A > 0
    out = np.where(mask, A, 0.0)
    return _record("relu", out, (a,), lambda g, needs: (g * mask,))


def softmax_rows(a):
    """Row-wise softmax with max subtraction."""
    A = _operand(a, "softmax_rows")
    e = np.exp(A - A.max(axis=1, keepdims=True))
    s = e / e.sum(axis=1, keepdims=True)

    def rule(g, needs):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _record("softmax_rows", s, (a,), rule)


def layer_norm(x, gain, bias, eps: float = 1e-5):
    """Normalize each row to zero mean / unit population variance, then ``*gain + bias``.

    ``gain`` and ``bias`` are row vectors of length ``x.cols`` (1-D arrays are
    accepted for constants).
    """
    X = _operand(x, "layer_norm")
    G = _vector(gain, X.shape[1], "gain")
    Bv = _vector(bias, X.shape[1], "bias")
    if eps < 0:
        raise ContractError(f"layer_norm: eps must be non-negative, got {eps}")
    n = X.shape[1]
    mu = X.sum(axis=1, keepdims=True) / n
    xc = X - mu
    var = (xc * xc).sum(axis=1, keepdims=True) / n
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / np.sqrt(var + eps)
    if not np.all(np.isfinite(inv)):
        bad = int(np.argmax(~np.isfinite(inv[:, 0])))
        raise NumericError(f"layer_norm: row {bad} has non-finite or zero variance "
                           f"(eps={eps})")
    xhat = xc * inv
    out = xhat * G + Bv

    def rule(g, needs):
        dx = dg = db = None
        if needs[0]:
            dxhat = g * G
            dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        if needs[1]:
            dg = (g * xhat).sum(axis=0, keepdims=True)
        if needs[2]:
            db = g.sum(axis=0, keepdims=True)
        return dx, dg, db

    return _record("layer_norm", out, (x, gain, bias), rule)


def _vector(v, n: int, what: str) -> np.ndarray:
    arr = v.value if isinstance(v, Var) else np.asarray(v, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.shape != (1, n):
        raise ShapeError(f"layer_norm: {what} shape {arr.shape} does not match width {n}")
    return arr


def concat_cols(parts: Sequence):
    mats = [_operand(p, "concat_cols") for p in parts]
    rows = {m.shape[0] for m in mats}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols: row counts differ: {[m.shape for m in mats]}")
    out = np.concatenate(mats, axis=1)
    edges = np.cumsum([0] + [m.shape[1] for m in mats])

    def rule(g, needs):
        return tuple(g[:, edges[i]:edges[i + 1]] if needs[i] else None
                     for i in range(len(mats)))

    return _record("concat_cols", out, tuple(parts), rule)


def slice_cols(a, start: int, stop: int):
    A = _operand(a, "slice_cols")
    if not 0 <= start < stop <= A.shape[1]:
        raise ShapeError(f"slice_cols: [{start}:{stop}] out of range for shape {A.shape}")
    out = np.ascontiguousarray(A[:, start:stop])

    def rule(g, needs):
        full = np.zeros_like(A)
        full[:, start:stop] = g
        return (full,)

    return _record("slice_cols", out, (a,), rule)


def take_rows(a, rows: Sequence[int]):
    """Gather rows by index (repeats allowed)."""
    A = _operand(a, "take_rows")
    idx = np.asarray(rows, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= A.shape[0]):
        raise ShapeError(f"take_rows: row index out of range for shape {A.shape}")
    out = A[idx]

    def rule(g, needs):
        full = np.zeros_like(A)
        np.add.at(full, idx, g)
        return (full,)

    return _record("take_rows", out, (a,), rule)


def sum_all(a):
    """Sum of all entries as a 1x1 matrix."""
    A = _operand(a, "sum_all")
    out = np.array([[A.sum()]])
    return _record("sum_all", out, (a,), lambda g, needs: (np.full_like(A, g[0, 0]),))


def sum_squares(a):
    """Sum of squared entries as a 1x1 matrix."""
    A = _operand(a, "sum_squares")
    out = np.array([[np.sum(A * A)]])
    return _record("sum_squares", out, (a,), lambda g, needs: (2.0 * g[0, 0] * A,))


def _grouped(A: np.ndarray, group: int, op: str) -> np.ndarray:
    if group <= 0 or A.shape[0] % group:
        raise ShapeError(f"{op}: {A.shape[0]} rows do not split into groups of {group}")
    return A.reshape(A.shape[0] // group, group, A.shape[1])


def grouped_matmul_bt(a, b, group: int):
    """Per-group ``a_g @ b_g.T`` for consecutive row groups of size ``group``.

    ``a`` and ``b`` are ``(n, k)``; the result stacks the ``group x group``
    products into an ``(n, group)`` matrix. With ``group == n`` this is just
    ``a @ b.T``.
    """
    A, B = _operand(a, "grouped_matmul_bt"), _operand(b, "grouped_matmul_bt")
    if A.shape != B.shape:
        raise ShapeError(f"grouped_matmul_bt: shapes {A.shape} and {B.shape} differ")
    A3, B3 = _grouped(A, group, "grouped_matmul_bt"), _grouped(B, group, "grouped_matmul_bt")
    out = np.matmul(A3, B3.transpose(0, 2, 1)).reshape(A.shape[0], group)

    def rule(g, needs):
        g3 = g.reshape(-1, group, group)
        da = np.matmul(g3, B3).reshape(A.shape) if needs[0] else None
        db = np.matmul(g3.transpose(0, 2, 1), A3).reshape(B.shape) if needs[1] else None
        return da, db

    return _record("grouped_matmul_bt", out, (a, b), rule)


def grouped_matmul(p, v, group: int):
    """Per-group ``p_g @ v_g`` where ``p`` is ``(n, group)`` and ``v`` is ``(n, d)``."""
    P, V = _operand(p, "grouped_matmul"), _operand(v, "grouped_matmul")
    if P.shape[1] != group or P.shape[0] != V.shape[0]:
        raise ShapeError(f"grouped_matmul: shapes {P.shape} and {V.shape} with group {group}")
    P3, V3 = _grouped(P, group, "grouped_matmul"), _grouped(V, group, "grouped_matmul")
    out = np.matmul(P3, V3).reshape(V.shape[0], V.shape[1])

    def rule(g, needs):
        g3 = g.reshape(-1, group, V.shape[1])
        dp = np.matmul(g3, V3.transpose(0, 2, 1)).reshape(P.shape) if needs[0] else None
        dv = np.matmul(P3.transpose(0, 2, 1), g3).reshape(V.shape) if needs[1] else None
        return dp, dv

    return _record("grouped_matmul", out, (p, v), rule)


# --------------------------------------------------------------------------
# reverse pass and gradient verification
# --------------------------------------------------------------------------


def backward(tape: Tape, loss) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to every watched leaf.

    Leaves that do not influence the loss get zero gradients. Contributions
    from multiple use sites are summed. The tape is reset afterwards.
    """
    if not isinstance(loss, Var) or loss.tape is not tape:
        raise ContractError("backward: loss is not a value recorded on this tape")
    if loss.value.shape != (1, 1):
        raise ContractError(f"backward: loss must be a 1x1 scalar, got shape {loss.value.shape}")
    grads: dict[int, np.ndarray] = {loss.index: np.ones((1, 1))}
    for node in reversed(tape.nodes):
        g = grads.pop(node.output, None)
        if g is None:
            continue
        needs = tuple(i is not None for i in node.inputs)
        parts = node.backward(g, needs)
        if node.op in _FAULTS:
            parts = tuple(None if p is None else p * 1.5 for p in parts)
        for i, part in zip(node.inputs, parts):
            if i is None or part is None:
                continue
            prev = grads.get(i)
            grads[i] = part if prev is None else prev + part
    result = {name: np.array(grads[idx]) if idx in grads else np.zeros(shape)
              for name, (idx, shape) in tape.leaves.items()}
    tape.reset()
    return result


@dataclass
class ParamCheck:
    name: str
    analytic: np.ndarray
    numeric: np.ndarray
    rel_diff: float


@dataclass
class GradCheckReport:
    max_abs_diff: float
    max_rel_diff: float
    per_parameter: list[ParamCheck] = field(default_factory=list)
    passed: bool = True
    tol: float = 1e-4

    @property
    def worst(self) -> ParamCheck | None:
        if not self.per_parameter:
            return None
        return max(self.per_parameter, key=lambda p: p.rel_diff)

    def group_max(self, group_of: Callable[[str], str] | None = None) -> dict[str, float]:
        """Max relative difference per parameter group (default: the name itself)."""
        group_of = group_of or (lambda n: n)
        out: dict[str, float] = {}
        for p in self.per_parameter:
            key = group_of(p.name)
            out[key] = max(out.get(key, 0.0), p.rel_diff)
        return out

    def format_table(self, group_of: Callable[[str], str] | None = None) -> str:
        groups = self.group_max(group_of)
        width = max([len("group")] + [len(k) for k in groups])
        lines = [f"{'group':<{width}}  {'max_rel_diff':>12}  status",
                 f"{'-' * width}  {'-' * 12}  ------"]
        for key, rel in groups.items():
            status = "ok" if rel <= self.tol else "FAIL"
            lines.append(f"{key:<{width}}  {rel:>12.3e}  {status}")
        return "\n".join(lines)


def _scalar(out, what: str) -> float:
    arr = np.asarray(value_of(out), dtype=np.float64)
    if arr.size != 1:
        raise ContractError(f"grad_check: f must return a scalar, got shape {arr.shape} ({what})")
    return float(arr.reshape(()))


def grad_check(
    f: Callable[[Mapping[str, object]], object],
    params: Mapping[str, np.ndarray],
    step: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Compare :func:`backward` against central finite differences.

    ``f`` maps a name->matrix mapping to a scalar using this module's ops.
    Per parameter, the relative difference is
    ``||analytic - numeric|| / max(||analytic||, ||numeric||, floor)``.
    """
    if step <= 0 or tol <= 0:
        raise ContractError("grad_check: step and tol must be positive")
    base = {name: as_matrix(v).copy() for name, v in params.items()}
    with Tape() as tape:
        watched = {name: tape.watch(v, name) for name, v in base.items()}
        out = f(watched)
    if not isinstance(out, Var):
        # f does not depend on any parameter
        analytic = {name: np.zeros_like(v) for name, v in base.items()}
        _scalar(out, "unperturbed")
        tape.reset()
    else:
        analytic = backward(tape, out)

    checks: list[ParamCheck] = []
    max_abs = 0.0
    with no_tape():
        for name, arr in base.items():
            numeric = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                orig = arr[idx]
                arr[idx] = orig + step
                fp = _scalar(f(base), f"{name}{list(idx)} + step")
                arr[idx] = orig - step
                fm = _scalar(f(base), f"{name}{list(idx)} - step")
                arr[idx] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NumericError(f"grad_check: non-finite f at {name}{list(idx)}")
                numeric[idx] = (fp - fm) / (2.0 * step)
            a = analytic[name]
            diff = float(np.linalg.norm(a - numeric))
            denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(numeric)), floor)
            checks.append(ParamCheck(name, a, numeric, diff / denom))
            if a.size:
                max_abs = max(max_abs, float(np.max(np.abs(a - numeric))))
    max_rel = max((c.rel_diff for c in checks), default=0.0)
    return GradCheckReport(max_abs, max_rel, checks, max_rel <= tol, tol)
