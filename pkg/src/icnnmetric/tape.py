"""Dense float64 arrays with reverse-mode differentiation.

A :class:`Tape` records every operation applied to tracked tensors while it
is active (``with Tape() as tape: ...``).  :func:`backward` walks the tape in
reverse and accumulates vector-Jacobian products.  Backward rules live in
:data:`VJP`, keyed by operation kind, so a node only stores its kind, input
ids and whatever forward values the rule needs.

Discrete choices (argmax/argmin inside ``max``/``min``, row indices in
``gather``) are fixed at forward time and treated as constants.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping

import numpy as np


class ShapeError(ValueError):
    pass


_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> "Tape | None":
    stack = _stack()
    return stack[-1] if stack else None


@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...]
    saved: dict
    shape: tuple[int, ...]


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        if active_tape() is not None:
            raise RuntimeError("a tape is already active on this thread")
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def variable(self, value) -> "Tensor":
        """Register ``value`` as a differentiable leaf on this tape."""
        data = np.array(value, dtype=np.float64)
        node_id = self._record("leaf", (), {}, data.shape)
        return Tensor(data, node_id=node_id, tape=self)

    def _record(self, kind: str, inputs: tuple[int, ...], saved: dict, shape) -> int:
        self.nodes.append(Node(kind, inputs, saved, tuple(shape)))
        return len(self.nodes) - 1


class Tensor:
    __slots__ = ("data", "node_id", "tape")

    def __init__(self, data, node_id: int | None = None, tape: Tape | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.node_id = node_id
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tracked = "" if self.node_id is None else f", node={self.node_id}"
        return f"Tensor(shape={self.shape}{tracked})"

    __array_priority__ = 100

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, idx):
        return gather(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(kind: str, data: np.ndarray, inputs: tuple[Tensor, ...], **saved) -> Tensor:
    tape = active_tape()
    if tape is None:
        return Tensor(data)
    ids = []
    tracked = False
    for t in inputs:
        if t.node_id is not None and t.tape is not tape:
            raise RuntimeError(f"{kind}: operand was recorded on a different tape")
        if t.node_id is not None:
            ids.append(t.node_id)
            tracked = True
        else:
            ids.append(-1)
    if not tracked:
        return Tensor(data)
    node_id = tape._record(kind, tuple(ids), saved, data.shape)
    return Tensor(data, node_id=node_id, tape=tape)


# --- shape helpers -----------------------------------------------------------


def _broadcast(kind: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _expand(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


# --- forward ops -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("add", a, b)
    return _emit("add", a.data + b.data, (a, b), shapes=(a.shape, b.shape))


def subtract(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("subtract", a, b)
    return _emit("subtract", a.data - b.data, (a, b), shapes=(a.shape, b.shape))


def multiply(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("multiply", a, b)
    return _emit("multiply", a.data * b.data, (a, b), a=a.data, b=b.data)


def divide(a, b) -> Tensor:
    """Elementwise quotient; the divisor must be strictly positive or negative, never 0."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("divide", a, b)
    if np.any(b.data == 0):
        raise ValueError("divide: zero in divisor")
    out = a.data / b.data
    return _emit("divide", out, (a, b), b=b.data, out=out, shapes=(a.shape, b.shape))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _emit("scale", a.data * c, (a,), c=float(c))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _emit("matmul", a.data @ b.data, (a, b), a=a.data, b=b.data)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _emit("relu", np.where(mask, a.data, 0.0), (a,), mask=mask)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit("exp", out, (a,), out=out)


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(~(a.data > 0)):
        raise ValueError("log: argument has non-positive entries; clamp first")
    return _emit("log", np.log(a.data), (a,), a=a.data)


def square(a) -> Tensor:
    a = as_tensor(a)
    return _emit("square", a.data * a.data, (a,), a=a.data)


def sqrt(a) -> Tensor:
    """Square root.  At 0 the backward rule passes a zero subgradient."""
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise ValueError("sqrt: negative argument")
    out = np.sqrt(a.data)
    return _emit("sqrt", out, (a,), out=out)


def sum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    return _emit("sum", np.asarray(out), (a,), shape=a.shape, axis=axis, keepdims=keepdims)


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.shape[axis]
    return _emit(
        "mean", np.asarray(out), (a,), shape=a.shape, axis=axis, keepdims=keepdims, count=count
    )


def _select(kind: str, a: Tensor, axis, keepdims: bool) -> Tensor:
    if a.data.size == 0:
        raise ShapeError(f"{kind}: empty set")
    pick = np.argmax if kind == "max" else np.argmin
    if axis is None:
        flat = int(pick(a.data.ravel()))
        out = a.data.ravel()[flat]
        if keepdims:
            out = np.reshape(out, (1,) * a.ndim)
        return _emit(kind, np.asarray(out), (a,), shape=a.shape, axis=None, index=flat,
                     keepdims=keepdims)
    index = pick(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(index, axis), axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)
    return _emit(kind, out, (a,), shape=a.shape, axis=axis, index=index, keepdims=keepdims)


def max(a, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Maximum over a set of elements; ties go to the lowest index."""
    return _select("max", as_tensor(a), axis, keepdims)


def min(a, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Minimum over a set of elements; ties go to the lowest index."""
    return _select("min", as_tensor(a), axis, keepdims)


def maximum(a, floor: float) -> Tensor:
    """Elementwise max over the two-element set ``{a, floor}``.

    Used as a clamp.  On a tie ``a`` is selected (it comes first), so the
    gradient still reaches ``a``.
    """
    a = as_tensor(a)
    mask = a.data >= floor
    return _emit("maximum", np.where(mask, a.data, floor), (a,), mask=mask)


def log_softmax(a) -> Tensor:
    """Log of softmax along the last axis, stabilised by max-subtraction."""
    a = as_tensor(a)
    shifted = a.data - np.max(a.data, axis=-1, keepdims=True)
    out = shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    return _emit("log_softmax", out, (a,), out=out)


def gather(a, index) -> Tensor:
    """Rows of ``a`` at ``index`` (any integer array shape; repeats allowed)."""
    a = as_tensor(a)
    index = np.asarray(index)
    if index.dtype == bool or (index.size and not np.issubdtype(index.dtype, np.integer)):
        raise TypeError("gather: index must be an integer array")
    index = index.astype(np.intp)
    if index.size and (index.min() < -a.shape[0] or index.max() >= a.shape[0]):
        raise IndexError(f"gather: index out of range for leading extent {a.shape[0]}")
    return _emit("gather", a.data[index], (a,), shape=a.shape, index=index)


def pairwise_sq_dist(a, b) -> Tensor:
    """``out[i, j] = sum_k (a[i, k] - b[j, k])**2`` for ``a`` n x d, ``b`` m x d."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"pairwise_sq_dist: incompatible shapes {a.shape} and {b.shape}")
    diff = a.data[:, None, :] - b.data[None, :, :]
    out = np.sum(diff * diff, axis=-1)
    return _emit("pairwise_sq_dist", out, (a, b), diff=diff)


# --- backward rules ----------------------------------------------------------
# Each rule maps (upstream grad, node.saved) to one grad per input.


def _vjp_add(g, s):
    sa, sb = s["shapes"]
    return _unbroadcast(g, sa), _unbroadcast(g, sb)


def _vjp_subtract(g, s):
    sa, sb = s["shapes"]
    return _unbroadcast(g, sa), _unbroadcast(-g, sb)


def _vjp_multiply(g, s):
    a, b = s["a"], s["b"]
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _vjp_divide(g, s):
    sa, sb = s["shapes"]
    ga = g / s["b"]
    return _unbroadcast(ga, sa), _unbroadcast(-ga * s["out"], sb)


def _vjp_scale(g, s):
    return (g * s["c"],)


def _vjp_matmul(g, s):
    return g @ s["b"].T, s["a"].T @ g


def _vjp_relu(g, s):
    return (np.where(s["mask"], g, 0.0),)


def _vjp_exp(g, s):
    return (g * s["out"],)


def _vjp_log(g, s):
    return (g / s["a"],)


def _vjp_square(g, s):
    return (2.0 * g * s["a"],)


def _vjp_sqrt(g, s):
    out = s["out"]
    safe = np.where(out > 0, out, 1.0)
    return (np.where(out > 0, g / (2.0 * safe), 0.0),)


def _vjp_sum(g, s):
    return (_expand(g, s["shape"], s["axis"], s["keepdims"]).copy(),)


def _vjp_mean(g, s):
    return (_expand(g / s["count"], s["shape"], s["axis"], s["keepdims"]).copy(),)


def _vjp_select(g, s):
    shape, axis, index = s["shape"], s["axis"], s["index"]
    out = np.zeros(shape)
    if axis is None:
        out.reshape(-1)[index] = np.asarray(g).reshape(())
        return (out,)
    if s["keepdims"]:
        g = np.squeeze(g, axis=axis)
    np.put_along_axis(out, np.expand_dims(index, axis), np.expand_dims(g, axis), axis=axis)
    return (out,)


def _vjp_maximum(g, s):
    return (np.where(s["mask"], g, 0.0),)


def _vjp_log_softmax(g, s):
    soft = np.exp(s["out"])
    return (g - soft * np.sum(g, axis=-1, keepdims=True),)


def _vjp_gather(g, s):
    out = np.zeros(s["shape"])
    np.add.at(out, s["index"], g)
    return (out,)


def _vjp_pairwise_sq_dist(g, s):
    weighted = 2.0 * g[:, :, None] * s["diff"]
    return weighted.sum(axis=1), -weighted.sum(axis=0)


VJP: dict[str, Callable] = {
    "add": _vjp_add,
    "subtract": _vjp_subtract,
    "multiply": _vjp_multiply,
    "divide": _vjp_divide,
    "scale": _vjp_scale,
    "matmul": _vjp_matmul,
    "relu": _vjp_relu,
    "exp": _vjp_exp,
    "log": _vjp_log,
    "square": _vjp_square,
    "sqrt": _vjp_sqrt,
    "sum": _vjp_sum,
    "mean": _vjp_mean,
    "max": _vjp_select,
    "min": _vjp_select,
    "maximum": _vjp_maximum,
    "log_softmax": _vjp_log_softmax,
    "gather": _vjp_gather,
    "pairwise_sq_dist": _vjp_pairwise_sq_dist,
}


class Gradients(Mapping):
    """Map from node id to d(loss)/d(node); unreached nodes read as zeros."""

    def __init__(self, grads: dict[int, np.ndarray], tape: Tape | None):
        self._grads = grads
        self._tape = tape

    def __getitem__(self, node_id: int) -> np.ndarray:
        return self._grads[node_id]

    def __iter__(self) -> Iterator[int]:
        return iter(self._grads)

    def __len__(self) -> int:
        return len(self._grads)

    def wrt(self, t: Tensor) -> np.ndarray:
        if t.node_id is not None and t.tape is self._tape and t.node_id in self._grads:
            return self._grads[t.node_id]
        return np.zeros(t.shape)


def backward(loss: Tensor) -> Gradients:
    """Reverse-mode pass from a scalar ``loss`` over the tape that recorded it."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if loss.node_id is None:
        return Gradients({}, None)
    tape = loss.tape
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape)}
    for node_id in range(loss.node_id, -1, -1):
        g = grads.get(node_id)
        node = tape.nodes[node_id]
        if g is None or node.kind == "leaf":
            continue
        parts = VJP[node.kind](g, node.saved)
        for src, part in zip(node.inputs, parts):
            if src < 0:
                continue
            if src in grads:
                grads[src] = grads[src] + part
            else:
                grads[src] = np.asarray(part, dtype=np.float64)
    return Gradients(grads, tape)


def value_and_grad(f: Callable[[Tensor], Tensor], x) -> tuple[float, np.ndarray]:
    with Tape() as tape:
        xt = tape.variable(x)
        out = f(xt)
    return float(out.data), backward(out).wrt(xt)


def finite_diff_check(f: Callable[[Tensor], Tensor], x, rel_step: float = 1e-6) -> float:
    """Max over coordinates of ``|analytic - central difference| / max(1, |analytic|)``.

    The step for coordinate ``i`` is ``rel_step * max(1, |x_i|)``.  A NaN
    anywhere returns ``inf`` so that callers comparing against a tolerance
    see a failure.
    """
    x = np.array(x, dtype=np.float64)
    _, analytic = value_and_grad(f, x)
    worst = 0.0
    flat = x.reshape(-1)
    for i in range(flat.size):
        step = rel_step * np.maximum(1.0, abs(flat[i]))
        hi, lo = flat.copy(), flat.copy()
        hi[i] += step
        lo[i] -= step
        f_hi = float(f(Tensor(hi.reshape(x.shape))).data)
        f_lo = float(f(Tensor(lo.reshape(x.shape))).data)
        numeric = (f_hi - f_lo) / (hi[i] - lo[i])
        a = float(analytic.reshape(-1)[i])
        err = abs(a - numeric) / np.maximum(1.0, abs(a))
        if not np.isfinite(err):
            return float("inf")
        worst = np.maximum(worst, err)
    return float(worst)
