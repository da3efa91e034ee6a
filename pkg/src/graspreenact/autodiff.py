"""Reverse-mode automatic differentiation over dense float64 arrays.

Every operation returns a new immutable :class:`Tensor` that remembers its
parents and a vector-Jacobian product closure.  :func:`backward` walks the
recorded graph in reverse topological order.

Example::

    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    y = (x * x).sum()
    grads = backward(y)
    grads[x.id]          # array([2., 4., 6.])
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Tensor",
    "Tape",
    "NonFiniteError",
    "TapeError",
    "backward",
    "grad",
    "finite_diff_check",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "sparse_matmul",
    "tsum",
    "mean",
    "relu",
    "tanh",
    "sin",
    "cos",
    "tabs",
    "sqrt",
    "square",
    "norm",
    "tmin",
    "tmax",
    "gather",
    "take",
    "concat",
    "stack",
    "reshape",
    "swapaxes",
    "Adam",
]

_ids = itertools.count()


class NonFiniteError(ValueError):
    """Raised when a tensor would hold NaN or Inf."""


class TapeError(RuntimeError):
    """Raised for malformed graphs or invalid backward requests."""


def _freeze(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {what}")
    arr.setflags(write=False)
    return arr


class Tensor:
    """Immutable array node in the differentiation graph."""

    __array_ufunc__ = None  # make numpy defer to our reflected operators

    __slots__ = ("data", "requires_grad", "id", "parents", "vjp", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data = _freeze(arr, "leaf construction")
        self.requires_grad = bool(requires_grad)
        self.id = next(_ids)
        self.parents: tuple[Tensor, ...] = ()
        self.vjp: Callable | None = None
        self.op = "leaf"

    @classmethod
    def _result(cls, data, parents: Sequence["Tensor"], vjp: Callable, op: str):
        out = cls.__new__(cls)
        arr = np.asarray(data, dtype=np.float64)
        if arr.base is not None or not arr.flags.writeable:
            arr = arr.copy()
        out.data = _freeze(arr, op)
        out.id = next(_ids)
        out.op = op
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out.parents = tuple(parents)
            out.vjp = vjp
        else:
            out.parents = ()
            out.vjp = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self) -> int:
        return len(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return gather(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# graph traversal


class Tape:
    """Nodes of a graph in topological order (parents before children)."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def record(cls, output: Tensor) -> "Tape":
        order: list[Tensor] = []
        state: dict[int, int] = {}  # 1 = on stack, 2 = done
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                state[node.id] = 2
                order.append(node)
                continue
            st = state.get(node.id)
            if st == 2:
                continue
            if st == 1:
                raise TapeError(f"cycle detected at node {node.id} ({node.op})")
            state[node.id] = 1
            stack.append((node, True))
            for parent in node.parents:
                pst = state.get(parent.id)
                if pst == 1:
                    raise TapeError(f"cycle detected at node {parent.id} ({parent.op})")
                if pst is None:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.requires_grad and not n.parents]


def backward(output: Tensor, tape: Tape | None = None) -> dict[int, np.ndarray]:
    """Gradients of scalar ``output`` for every leaf requiring grad.

    Returns a map from leaf ``Tensor.id`` to a gradient array shaped like the
    leaf.  Leaves the output does not depend on are absent from the map.
    """
    if output.size != 1:
        raise TapeError(f"backward needs a scalar output, got shape {output.shape}")
    if tape is None:
        tape = Tape.record(output)
    grads: dict[int, np.ndarray] = {output.id: np.ones_like(output.data)}
    for node in reversed(tape.nodes):
        g = grads.get(node.id)
        if g is None or node.vjp is None:
            continue
        parent_grads = node.vjp(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if not np.isfinite(pg).all():
                raise NonFiniteError(f"non-finite gradient flowing out of '{node.op}'")
            prev = grads.get(parent.id)
            grads[parent.id] = pg if prev is None else prev + pg
    return {n.id: grads[n.id] for n in tape.leaves() if n.id in grads}


def grad(output: Tensor, inputs: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of ``output`` w.r.t. each of ``inputs`` (zeros if unused)."""
    gmap = backward(output)
    return [gmap.get(x.id, np.zeros_like(x.data)) for x in inputs]


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x,
    step: float = 1e-5,
    coords: Sequence[int] | None = None,
) -> float:
    """Max relative error between autodiff and central differences.

    The error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    ``coords`` restricts the probe to a subset of flat indices, which keeps
    checks on large parameter vectors affordable.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    leaf = Tensor(x0, requires_grad=True)
    out = f(leaf)
    analytic = backward(out).get(leaf.id, np.zeros_like(x0)).ravel()
    flat = x0.ravel()
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        vals = []
        for sign in (1.0, -1.0):
            probe = flat.copy()
            probe[i] += sign * step
            try:
                v = float(f(Tensor(probe.reshape(x0.shape))).data)
            except NonFiniteError as exc:
                raise NonFiniteError(f"non-finite value at coordinate {i}") from exc
            if not np.isfinite(v):
                raise NonFiniteError(f"non-finite value at coordinate {i}")
            vals.append(v)
        numeric = (vals[0] - vals[1]) / (2.0 * step)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape) if a.requires_grad else None,
                   _unbroadcast(g, b.shape) if b.requires_grad else None),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape) if a.requires_grad else None,
                   _unbroadcast(-g, b.shape) if b.requires_grad else None),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                   _unbroadcast(g * a.data, b.shape) if b.requires_grad else None),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(out, (a, b), vjp, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")


def square(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)

    def vjp(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (g / (2.0 * out),)

    return Tensor._result(out, (a,), vjp, "sqrt")


def tabs(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def relu(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(
        np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0),), "relu"
    )


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return Tensor._result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sin(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


def cos(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), "cos")


# ---------------------------------------------------------------------------
# reductions


def _expand(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(
        a.data.sum(axis=axis, keepdims=keepdims),
        (a,),
        lambda g: (_expand(g, a.shape, axis, keepdims).copy(),),
        "sum",
    )


def mean(a, axis=None, keepdims: bool = False, exact: bool = False) -> Tensor:
    """Mean over ``axis``.  ``exact`` sums with ``math.fsum`` (single int axis only),
    which is correctly rounded and so independent of element order."""
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    if exact:
        if not isinstance(axis, int):
            raise ValueError("exact mean needs a single integer axis")
        value = np.apply_along_axis(math.fsum, axis, a.data) / n
        if keepdims:
            value = np.expand_dims(value, axis)
    else:
        value = a.data.mean(axis=axis, keepdims=keepdims)
    return Tensor._result(
        value,
        (a,),
        lambda g: (_expand(g, a.shape, axis, keepdims) / n,),
        "mean",
    )


def norm(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis``; the subgradient at zero is zero."""
    a = as_tensor(a)
    out = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, a.data / safe, 0.0) * g,)

    value = out if keepdims else np.squeeze(out, axis=axis)
    return Tensor._result(value, (a,), vjp, "norm")


def _arg_reduce(a: Tensor, axis: int, keepdims: bool, pick, op: str) -> Tensor:
    # np.argmin/argmax return the first extremum, i.e. ties go to the lowest index
    axis = axis % a.ndim
    idx = pick(a.data, axis=axis)
    value = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        out = np.zeros(a.shape)
        np.put_along_axis(out, np.expand_dims(idx, axis), g, axis=axis)
        return (out,)

    if not keepdims:
        value = np.squeeze(value, axis=axis)
    return Tensor._result(value, (a,), vjp, op)


def tmin(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Min-reduce; the subgradient goes to the first minimal element only."""
    return _arg_reduce(as_tensor(a), axis, keepdims, np.argmin, "min")


def tmax(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Max-reduce; the subgradient goes to the first maximal element only."""
    return _arg_reduce(as_tensor(a), axis, keepdims, np.argmax, "max")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    A, B = a.data, b.data
    out = A @ B

    def vjp(g):
        a2 = A[None, :] if A.ndim == 1 else A
        b2 = B[:, None] if B.ndim == 1 else B
        g2 = g
        if A.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if B.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = g2 @ np.swapaxes(b2, -1, -2)
        gb = np.swapaxes(a2, -1, -2) @ g2
        if A.ndim == 1:
            ga = np.squeeze(ga, -2)
        if B.ndim == 1:
            gb = np.squeeze(gb, -1)
        return _unbroadcast(ga, A.shape), _unbroadcast(gb, B.shape)

    return Tensor._result(out, (a, b), vjp, "matmul")


def sparse_matmul(m: sp.spmatrix, x) -> Tensor:
    """Constant sparse matrix times a 2-D tensor."""
    x = as_tensor(x)
    m = sp.csr_matrix(m)
    mt = m.T.tocsr()
    return Tensor._result(
        np.asarray(m @ x.data), (x,), lambda g: (np.asarray(mt @ g),), "sparse_matmul"
    )


# ---------------------------------------------------------------------------
# indexing and shape


def gather(a, index) -> Tensor:
    """Numpy-style indexing (basic or advanced) with scatter-add backward."""
    a = as_tensor(a)
    if isinstance(index, Tensor):
        raise TypeError("index with integer arrays, not tensors")

    idx = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in idx)

    def vjp(g):
        out = np.zeros(a.shape)
        if basic:  # a view: no repeated elements
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return Tensor._result(a.data[index], (a,), vjp, "gather")


def take(a, indices, axis: int = 0) -> Tensor:
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % a.ndim

    def vjp(g):
        flat = indices.ravel()
        g = np.moveaxis(g, axis, 0) if indices.ndim == 1 else np.moveaxis(
            g.reshape(a.shape[:axis] + (flat.size,) + a.shape[axis + 1:]), axis, 0)
        rows = g.reshape(flat.size, -1)
        scatter = sp.csr_matrix((np.ones(flat.size), (flat, np.arange(flat.size))),
                                shape=(a.shape[axis], flat.size))
        out = np.asarray(scatter @ rows).reshape((a.shape[axis],) + g.shape[1:])
        return (np.moveaxis(out, 0, axis),)

    return Tensor._result(np.take(a.data, indices, axis=axis), (a,), vjp, "take")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    axis = axis % ts[0].ndim
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return Tensor._result(
        np.concatenate([t.data for t in ts], axis=axis),
        ts,
        lambda g: tuple(np.split(g, bounds, axis=axis)),
        "concat",
    )


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)
    ax = axis % out.ndim

    def vjp(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(ts)))

    return Tensor._result(out, ts, vjp, "stack")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(
        a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape"
    )


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(
        np.swapaxes(a.data, ax1, ax2),
        (a,),
        lambda g: (np.swapaxes(g, ax1, ax2),),
        "swapaxes",
    )


# ---------------------------------------------------------------------------
# optimisation


class Adam:
    """Adam over a dict of named float64 arrays.

    Parameters are plain arrays; :meth:`step` takes a matching dict of
    gradients and returns updated copies so callers can keep snapshots.
    """

    def __init__(self, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lr: float | None = None) -> dict[str, np.ndarray]:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        new = {}
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                new[name] = p
                continue
            m = self.m.get(name, np.zeros_like(p))
            v = self.v.get(name, np.zeros_like(p))
            m = self.b1 * m + (1.0 - self.b1) * g
            v = self.b2 * v + (1.0 - self.b2) * g * g
            self.m[name], self.v[name] = m, v
            new[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return new
