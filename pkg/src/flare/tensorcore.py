"""Dense matrices with reverse-mode automatic differentiation.

Every value is a 2-D float64 array wrapped in a :class:`Matrix` node. A node
remembers the primitive that produced it and its inputs; :func:`backward`
walks the nodes reachable from a scalar loss in reverse creation order (which
is a topological order) and applies the adjoint registered for each primitive
in :data:`ADJOINTS`.

Example::

    W = Matrix(np.eye(2), trainable=True)
    loss = tc.sum(tc.square(W))
    grads = tc.backward(loss)
    grads[W]            # -> 2 * W.value
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np
from scipy.linalg import lapack
from scipy.linalg import cho_solve

__all__ = [
    "Matrix", "Graph", "ShapeError", "SingularMatrixError", "ContractError",
    "ADJOINTS", "matmul", "transpose", "add", "sub", "mul", "scale", "add_row",
    "add_scalar", "relu", "softmax_rows", "log", "square", "l2_normalize_rows",
    "trace", "sum", "mean", "sq_dists", "exp", "regularized_inverse",
    "backward", "grad", "grad_check", "GradCheckReport", "constant",
]

_ids = itertools.count()

NORM_EPS = 1e-12


class ShapeError(ValueError):
    """Raised when a primitive receives incompatible shapes."""

    def __init__(self, primitive: str, *shapes: tuple[int, ...]):
        self.primitive = primitive
        self.shapes = shapes
        shown = " and ".join(str(s) for s in shapes)
        super().__init__(f"{primitive}: incompatible shapes {shown}")


class SingularMatrixError(np.linalg.LinAlgError):
    """Cholesky factorization failed; ``minor`` is the 1-based leading minor."""

    def __init__(self, minor: int, message: str = ""):
        self.minor = minor
        super().__init__(message or f"leading minor {minor} is not positive definite")


class ContractError(ValueError):
    """A documented precondition does not hold."""


class Matrix:
    """Immutable 2-D float64 value plus its place in the computation graph."""

    __slots__ = ("value", "op", "inputs", "ctx", "trainable", "name", "id", "guarded")

    def __init__(self, value, trainable: bool = False, name: str | None = None,
                 op: str = "leaf", inputs: tuple["Matrix", ...] = (), ctx=None):
        arr = np.array(value, dtype=np.float64, copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError("Matrix", arr.shape)
        arr.setflags(write=False)
        self.value = arr
        self.op = op
        self.inputs = inputs
        self.ctx = ctx
        self.trainable = trainable
        self.name = name
        self.id = next(_ids)
        self.guarded = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    @property
    def T(self) -> "Matrix":
        return transpose(self)

    def item(self) -> float:
        if self.shape != (1, 1):
            raise ContractError(f"item() needs a 1x1 matrix, got {self.shape}")
        return float(self.value[0, 0])

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __add__(self, other):
        if np.isscalar(other):
            return add_scalar(self, other)
        return add(self, _lift(other))

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        if np.isscalar(other):
            return add_scalar(self, -other)
        return sub(self, _lift(other))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Matrix<{self.op}{tag} {self.shape[0]}x{self.shape[1]}>"


def constant(value) -> Matrix:
    """Wrap an array as a non-trainable leaf."""
    return value if isinstance(value, Matrix) else Matrix(value)


_lift = constant


def _node(op: str, value: np.ndarray, inputs: tuple[Matrix, ...], ctx=None) -> Matrix:
    if not np.all(np.isfinite(value)):
        raise FloatingPointError(f"{op}: non-finite output")
    out = Matrix.__new__(Matrix)
    value.setflags(write=False)
    out.value = value
    out.op = op
    out.inputs = inputs
    out.ctx = ctx
    out.trainable = False
    out.name = None
    out.id = next(_ids)
    out.guarded = 0
    return out


# ---------------------------------------------------------------------------
# Primitives. Each forward records an op tag; ADJOINTS[tag](g, node) returns a
# tuple of input gradients in input order.
# ---------------------------------------------------------------------------

def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.cols != b.rows:
        raise ShapeError("matmul", a.shape, b.shape)
    return _node("matmul", a.value @ b.value, (a, b))


def transpose(a: Matrix) -> Matrix:
    return _node("transpose", np.ascontiguousarray(a.value.T), (a,))


def _same(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


def add(a: Matrix, b: Matrix) -> Matrix:
    _same("add", a, b)
    return _node("add", a.value + b.value, (a, b))


def sub(a: Matrix, b: Matrix) -> Matrix:
    _same("sub", a, b)
    return _node("sub", a.value - b.value, (a, b))


def mul(a: Matrix, b: Matrix) -> Matrix:
    _same("mul", a, b)
    return _node("mul", a.value * b.value, (a, b))


def scale(a: Matrix, c: float) -> Matrix:
    return _node("scale", a.value * float(c), (a,), float(c))


def add_scalar(a: Matrix, c: float) -> Matrix:
    return _node("add_scalar", a.value + float(c), (a,))


def add_row(a: Matrix, row: Matrix) -> Matrix:
    """Broadcast-add a 1 x cols row vector to every row of ``a``."""
    if row.rows != 1 or row.cols != a.cols:
        raise ShapeError("add_row", a.shape, row.shape)
    return _node("add_row", a.value + row.value, (a, row))


def relu(a: Matrix) -> Matrix:
    return _node("relu", np.maximum(a.value, 0.0), (a,))


def softmax_rows(a: Matrix) -> Matrix:
    z = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    return _node("softmax_rows", e / e.sum(axis=1, keepdims=True), (a,))


def log(a: Matrix) -> Matrix:
    if np.any(a.value <= 0):
        raise FloatingPointError("log: non-positive input")
    return _node("log", np.log(a.value), (a,))


def square(a: Matrix) -> Matrix:
    return _node("square", a.value * a.value, (a,))


def exp(a: Matrix) -> Matrix:
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    return _node("exp", out, (a,))


def l2_normalize_rows(a: Matrix) -> Matrix:
    """Scale each row to unit L2 norm.

    A row whose norm is below ``NORM_EPS`` is replaced by the first basis vector
    and contributes no gradient; ``out.guarded`` counts such rows.
    """
    norms = np.sqrt(np.einsum("ij,ij->i", a.value, a.value))[:, None]
    bad = norms[:, 0] < NORM_EPS
    safe = np.where(bad[:, None], 1.0, norms)
    out = a.value / safe
    if bad.any():
        out[bad] = 0.0
        out[bad, 0] = 1.0
    node = _node("l2_normalize_rows", out, (a,), (safe, bad))
    node.guarded = int(bad.sum())
    return node


def trace(a: Matrix) -> Matrix:
    if a.rows != a.cols:
        raise ShapeError("trace", a.shape)
    return _node("trace", np.array([[np.trace(a.value)]]), (a,))


def sum(a: Matrix) -> Matrix:  # noqa: A001 - mirrors the primitive name
    return _node("sum", np.array([[a.value.sum()]]), (a,))


def mean(a: Matrix) -> Matrix:
    return _node("mean", np.array([[a.value.mean()]]), (a,))


def sq_dists(a: Matrix, b: Matrix) -> Matrix:
    """Pairwise squared Euclidean distances between rows of ``a`` and ``b``."""
    if a.cols != b.cols:
        raise ShapeError("sq_dists", a.shape, b.shape)
    av, bv = a.value, b.value
    d = (np.einsum("ij,ij->i", av, av)[:, None] + np.einsum("ij,ij->i", bv, bv)[None, :]
         - 2.0 * av @ bv.T)
    return _node("sq_dists", np.maximum(d, 0.0), (a, b))


def regularized_inverse(k: Matrix, tau: float, sym_tol: float = 1e-9) -> Matrix:
    """Return ``(K + tau I)^-1`` through a Cholesky factorization.

    Raises:
        ShapeError: ``K`` is not square.
        ContractError: ``K`` is not symmetric within ``sym_tol`` or ``tau < 0``.
        SingularMatrixError: ``K + tau I`` is not positive definite.
    """
    if k.rows != k.cols:
        raise ShapeError("regularized_inverse", k.shape)
    if tau < 0:
        raise ContractError(f"regularized_inverse: tau must be >= 0, got {tau}")
    kv = k.value
    if np.max(np.abs(kv - kv.T), initial=0.0) > sym_tol:
        raise ContractError("regularized_inverse: matrix is not symmetric")
    a = kv + tau * np.eye(k.rows)
    c, info = lapack.dpotrf(a, lower=1, clean=1)
    if info > 0:
        raise SingularMatrixError(int(info))
    if info < 0:
        raise ContractError(f"dpotrf: illegal argument {-info}")
    inv = cho_solve((c, True), np.eye(k.rows))
    inv = 0.5 * (inv + inv.T)
    return _node("regularized_inverse", inv, (k,))


# ---------------------------------------------------------------------------
# Adjoints: ADJOINTS[op](g, node, need) -> one gradient (or None) per input;
# need[i] says whether input i leads to a trainable leaf.
# ---------------------------------------------------------------------------

def _adj_matmul(g, node, need):
    a, b = node.inputs
    return (g @ b.value.T if need[0] else None,
            a.value.T @ g if need[1] else None)


def _adj_relu(g, node, need):
    # subgradient 0 at exactly 0
    return (g * (node.inputs[0].value > 0),)


def _adj_softmax(g, node, need):
    s = node.value
    return (s * (g - np.einsum("ij,ij->i", g, s)[:, None]),)


def _adj_l2n(g, node, need):
    safe, bad = node.ctx
    y = node.value
    gx = (g - y * np.einsum("ij,ij->i", g, y)[:, None]) / safe
    if bad.any():
        gx[bad] = 0.0
    return (gx,)


def _adj_mul(g, node, need):
    a, b = node.inputs
    return (g * b.value if need[0] else None, g * a.value if need[1] else None)


def _adj_sq_dists(g, node, need):
    a, b = node.inputs
    ga = 2.0 * (g.sum(axis=1)[:, None] * a.value - g @ b.value) if need[0] else None
    gb = 2.0 * (g.sum(axis=0)[:, None] * b.value - g.T @ a.value) if need[1] else None
    return ga, gb


def _adj_reg_inv(g, node, need):
    inv = node.value
    return (-inv.T @ g @ inv.T,)


ADJOINTS: dict[str, Callable[[np.ndarray, Matrix, tuple[bool, ...]], tuple]] = {
    "matmul": _adj_matmul,
    "transpose": lambda g, n, need: (g.T,),
    "add": lambda g, n, need: (g, g),
    "sub": lambda g, n, need: (g, -g),
    "mul": _adj_mul,
    "scale": lambda g, n, need: (g * n.ctx,),
    "add_scalar": lambda g, n, need: (g,),
    "add_row": lambda g, n, need: (g, g.sum(axis=0, keepdims=True) if need[1] else None),
    "relu": _adj_relu,
    "softmax_rows": _adj_softmax,
    "log": lambda g, n, need: (g / n.inputs[0].value,),
    "square": lambda g, n, need: (2.0 * g * n.inputs[0].value,),
    "exp": lambda g, n, need: (g * n.value,),
    "l2_normalize_rows": _adj_l2n,
    "trace": lambda g, n, need: (g[0, 0] * np.eye(n.inputs[0].rows),),
    "sum": lambda g, n, need: (np.full(n.inputs[0].shape, g[0, 0]),),
    "mean": lambda g, n, need: (np.full(n.inputs[0].shape, g[0, 0] / n.inputs[0].value.size),),
    "sq_dists": _adj_sq_dists,
    "regularized_inverse": _adj_reg_inv,
}


# ---------------------------------------------------------------------------
# Graph traversal
# ---------------------------------------------------------------------------

@dataclass
class Graph:
    """Nodes reachable from ``output`` in topological (creation) order."""

    nodes: list[Matrix]
    output: Matrix

    @classmethod
    def from_output(cls, output: Matrix) -> "Graph":
        seen: dict[int, Matrix] = {}
        stack = [output]
        while stack:
            n = stack.pop()
            if n.id in seen:
                continue
            seen[n.id] = n
            stack.extend(n.inputs)
        return cls(sorted(seen.values(), key=lambda n: n.id), output)

    @property
    def parameters(self) -> list[Matrix]:
        return [n for n in self.nodes if n.trainable and n.op == "leaf"]


def backward(loss: Matrix) -> dict[Matrix, np.ndarray]:
    """Reverse-mode sweep from a 1x1 ``loss``.

    Returns a mapping from every trainable leaf that ``loss`` depends on to
    its gradient. Non-trainable leaves get no entry.
    """
    if loss.shape != (1, 1):
        raise ContractError(f"backward needs a scalar (1x1) loss, got {loss.shape}")
    graph = Graph.from_output(loss)
    # prune to nodes that lead to a trainable leaf
    needs: set[int] = set()
    for n in graph.nodes:
        if n.trainable or any(i.id in needs for i in n.inputs):
            needs.add(n.id)
    adj: dict[int, np.ndarray] = {loss.id: np.ones((1, 1))}
    out: dict[Matrix, np.ndarray] = {}
    for n in reversed(graph.nodes):
        g = adj.pop(n.id, None)
        if g is None or n.id not in needs:
            continue
        if n.op == "leaf":
            if n.trainable:
                out[n] = g
            continue
        need = tuple(i.id in needs for i in n.inputs)
        grads = ADJOINTS[n.op](g, n, need)
        for inp, gi, ok in zip(n.inputs, grads, need):
            if not ok:
                continue
            prev = adj.get(inp.id)
            adj[inp.id] = gi if prev is None else prev + gi
    return out


def grad(loss: Matrix, params: Mapping[str, Matrix]) -> dict[str, np.ndarray]:
    """Gradients of ``loss`` keyed by parameter name; unused params get zeros."""
    g = backward(loss)
    return {k: g.get(p, np.zeros(p.shape)) for k, p in params.items()}


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: str | None
    worst_index: tuple[int, int] | None
    analytic: float
    numeric: float
    tolerance: float
    checked: int
    nan_at: tuple[str, tuple[int, int]] | None = None

    @property
    def passed(self) -> bool:
        return self.nan_at is None and self.max_rel_err <= self.tolerance


def grad_check(loss_builder: Callable[[dict[str, Matrix]], Matrix],
               params: Mapping[str, np.ndarray], step: float = 1e-5,
               tolerance: float = 1e-4, floor: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    The relative error for one entry is ``|a - n| / max(|a|, |n|, floor)``;
    ``floor`` keeps entries whose true gradient is ~0 from dominating.
    """
    mats = {k: Matrix(v, trainable=True, name=k) for k, v in params.items()}
    analytic = grad(loss_builder(mats), mats)
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def f(name, idx, delta):
        arrs = dict(base)
        a = base[name].copy()
        a[idx] += delta
        arrs[name] = a
        return loss_builder({k: Matrix(v) for k, v in arrs.items()}).item()

    worst = GradCheckReport(0.0, None, None, 0.0, 0.0, tolerance, 0)
    count = 0
    for name, arr in base.items():
        for idx in np.ndindex(arr.shape):
            count += 1
            try:
                num = (f(name, idx, step) - f(name, idx, -step)) / (2 * step)
            except FloatingPointError:
                num = float("nan")
            ana = float(analytic[name][idx])
            if not (np.isfinite(num) and np.isfinite(ana)):
                worst.nan_at = (name, idx)
                continue
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            if err > worst.max_rel_err or worst.worst_param is None:
                worst.max_rel_err = err
                worst.worst_param = name
                worst.worst_index = idx
                worst.analytic = ana
                worst.numeric = num
    worst.checked = count
    return worst
