"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

Define-by-run: every primitive that touches a tracked tensor records its
parents and a vector-Jacobian closure on the output. ``backward`` walks the
graph once in reverse topological order and accumulates gradients into the
tracked leaves. The graph is rebuilt from scratch every step; there is no
graph reuse and no higher-order support.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

LEAKY_SLOPE = 0.2

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (used for teacher forwards)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an op's shape rule."""


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse mode.

    ``grad`` is only allocated for tracked leaves (parameters); intermediate
    adjoints live in a scratch dict during ``backward``.
    """

    __slots__ = ("data", "parents", "vjp", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents: tuple[Tensor, ...] = ()
        self.vjp: Callable[[np.ndarray], tuple] | None = None
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def tracked(self) -> bool:
        return self.requires_grad or self.vjp is not None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, tracked={self.tracked()})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.tracked() for p in parents):
        out.parents = tuple(parents)
        out.vjp = vjp
    return out


def _check_same_shape(op: str, a: Tensor, b: Tensor):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.data.shape} vs {b.data.shape}")
    out = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _make(out, (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("add", a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("sub", a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul_elementwise(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("mul_elementwise", a, b)
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scalar_mul(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    # subgradient at 0 is 0
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    out = np.where(mask, a.data, slope * a.data)
    return _make(out, (a,), lambda g: (np.where(mask, g, slope * g),))


def square(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def concat_last_axis(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape[:-1] != b.data.shape[:-1]:
        raise ShapeError(
            f"concat_last_axis: shape mismatch {a.data.shape} vs {b.data.shape}"
        )
    na = a.data.shape[-1]

    def vjp(g):
        return g[..., :na], g[..., na:]

    return _make(np.concatenate([a.data, b.data], axis=-1), (a, b), vjp)


def reduce_sum(a: Tensor) -> Tensor:
    a = as_tensor(a)
    shape = a.data.shape
    return _make(np.sum(a.data), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def reduce_mean_over_axis(a: Tensor, axis: int) -> Tensor:
    a = as_tensor(a)
    n = a.data.shape[axis]

    def vjp(g):
        return (np.repeat(np.expand_dims(g / n, axis), n, axis=axis),)

    return _make(np.mean(a.data, axis=axis), (a,), vjp)


def reduce_max_over_axis(a: Tensor, axis: int) -> Tensor:
    a = as_tensor(a)
    # np.argmax breaks ties by lowest index; the full gradient is routed there
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (ga,)

    return _make(out, (a,), vjp)


def log_softmax(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"log_softmax: expected 2-D (batch, classes), got {a.data.shape}")
    shifted = a.data - np.max(a.data, axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    out = shifted - lse
    softmax = np.exp(out)

    def vjp(g):
        return (g - softmax * np.sum(g, axis=1, keepdims=True),)

    return _make(out, (a,), vjp)


def gather_rows(a: Tensor, indices) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows: indices must be 1-D, got {idx.shape}")

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _make(a.data[idx], (a,), vjp)


def broadcast_rows(a: Tensor, n: int) -> Tensor:
    """Tile a length-F vector (or 1xF row) into an (n, F) matrix."""
    a = as_tensor(a)
    if a.data.ndim > 2 or (a.data.ndim == 2 and a.data.shape[0] != 1):
        raise ShapeError(f"broadcast_rows: expected vector or single row, got {a.data.shape}")
    flat = a.data.reshape(1, -1)
    out = np.broadcast_to(flat, (n, flat.shape[1])).copy()

    def vjp(g):
        return (g.sum(axis=0).reshape(a.data.shape),)

    return _make(out, (a,), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    orig = a.data.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


_PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul_elementwise": mul_elementwise,
    "scalar_mul": scalar_mul,
    "relu": relu,
    "leaky_relu": leaky_relu,
    "concat_last_axis": concat_last_axis,
    "reduce_max_over_axis": reduce_max_over_axis,
    "reduce_mean_over_axis": reduce_mean_over_axis,
    "reduce_sum": reduce_sum,
    "square": square,
    "log_softmax": log_softmax,
    "gather_rows": gather_rows,
    "broadcast_rows": broadcast_rows,
}


def apply_primitive(op_kind: str, inputs: Sequence, **kwargs) -> Tensor:
    """Dispatch a primitive by name. Unknown names raise ValueError."""
    try:
        fn = _PRIMITIVES[op_kind]
    except KeyError:
        raise ValueError(f"unknown primitive {op_kind!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every tracked leaf reachable from loss."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")

    # iterative topological order (graphs can be deep at desk scale too)
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))

    adjoint: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad += g
        if node.vjp is None:
            continue
        parent_grads = node.vjp(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.tracked():
                continue
            acc = adjoint.get(id(p))
            if acc is None:
                adjoint[id(p)] = np.array(pg, dtype=np.float64, copy=True)
            else:
                acc += pg


# ---------------------------------------------------------------------------
# parameters and the finite-difference oracle
# ---------------------------------------------------------------------------

class Parameter:
    """A named, tracked tensor with a persistent gradient buffer."""

    def __init__(self, name: str, value):
        self.name = name
        self.tensor = Tensor(value, requires_grad=True)

    @property
    def value(self) -> np.ndarray:
        return self.tensor.data

    @value.setter
    def value(self, v):
        self.tensor.data = np.asarray(v, dtype=np.float64)

    @property
    def grad(self) -> np.ndarray:
        return self.tensor.grad

    def zero_grad(self):
        self.tensor.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Sequence[Parameter],
    h: float = 1e-5,
    tol: float = 1e-4,
) -> dict:
    """Compare tape gradients of ``f()`` against central differences.

    ``f`` must be deterministic and rebuild the graph from the current
    parameter values on every call. Returns a report with per-parameter max
    relative error and the list of entries exceeding ``tol``; a failing check
    is reported, never raised.
    """
    for p in params:
        p.zero_grad()
    loss = f()
    backward(loss)
    tape_grads = {p.name: p.grad.copy() for p in params}

    per_param: dict[str, float] = {}
    failures: list[tuple[str, int, float, float, float]] = []
    for p in params:
        flat = p.value.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            analytic = tape_grads[p.name].reshape(-1)[i]
            err = relative_error(analytic, numeric)
            worst = max(worst, err)
            if err > tol:
                failures.append((p.name, i, analytic, numeric, err))
        per_param[p.name] = worst
    return {
        "per_param": per_param,
        "max_rel_err": max(per_param.values(), default=0.0),
        "failures": failures,
        "ok": not failures,
        "h": h,
        "tol": tol,
    }
