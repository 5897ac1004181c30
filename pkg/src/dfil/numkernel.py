"""Dense float64 tensors with a small reverse-mode gradient tape.

Tensors are rank <= 2 (batch x feature) and immutable. A tensor that is
watched by a :class:`GradTape`, or produced by an operation on a watched
tensor, records the operation on that tape; everything else is a constant
and receives an exact zero gradient.

    tape = GradTape()
    w = tape.watch(Tensor(np.ones((3, 2))))
    loss = sum_(matmul(x, w) * matmul(x, w))
    (gw,) = tape.gradient(loss, [w])
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Incompatible tensor shapes."""


class NumericError(ArithmeticError):
    """An operation produced or received a non-finite value."""


class ParameterError(ValueError):
    """An argument outside its admissible range."""


def _as_array(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if arr.ndim > 2:
        raise DimensionError(f"rank {arr.ndim} tensors are not supported (max rank 2)")
    return arr


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"{what} produced a non-finite value")


class Tensor:
    """Immutable float64 array of rank 0, 1 or 2."""

    __slots__ = ("_data", "_tape", "_node")
    __array_priority__ = 100

    def __init__(self, data, *, _tape: "GradTape | None" = None, _node: int = -1):
        arr = data if isinstance(data, np.ndarray) and data.dtype == np.float64 else _as_array(data)
        if arr.ndim > 2:
            raise DimensionError(f"rank {arr.ndim} tensors are not supported (max rank 2)")
        if _tape is None:
            arr = arr.copy()
            _check_finite(arr, "tensor literal")
        arr.flags.writeable = False
        self._data = arr
        self._tape = _tape
        self._node = _node

    @property
    def data(self) -> np.ndarray:
        """Read-only view of the underlying array."""
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def tracked(self) -> bool:
        return self._tape is not None

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def item(self) -> float:
        if self._data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self._data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self._data)

    def __repr__(self) -> str:
        flag = ", tracked" if self.tracked else ""
        return f"Tensor(shape={list(self.shape)}{flag}, data={self._data.tolist()})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


Backward = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class GradTape:
    """Ordered record of primitive operations for one forward pass.

    A tape is single-owner; do not record on it from several threads.
    """

    def __init__(self) -> None:
        # node k: (input node ids, backward fn); watched leaves have no inputs
        self._nodes: list[tuple[tuple[int, ...], Backward | None]] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def watch(self, value) -> Tensor:
        """Return a tracked copy of ``value`` that gradients can be taken against."""
        data = value.data if isinstance(value, Tensor) else value
        arr = _as_array(data)
        _check_finite(arr, "watched tensor")
        self._nodes.append(((), None))
        return Tensor(arr, _tape=self, _node=len(self._nodes) - 1)

    def _record(self, out: np.ndarray, inputs: Sequence[Tensor], backward: Backward) -> Tensor:
        ids = tuple(t._node if t._tape is self else -1 for t in inputs)
        self._nodes.append((ids, backward))
        return Tensor(out, _tape=self, _node=len(self._nodes) - 1)

    def gradient(self, target: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of scalar ``target`` with respect to each of ``sources``.

        Each recorded node is visited once, in reverse recording order.
        Sources that do not influence ``target`` (or are constants) get zeros.
        """
        if target._data.size != 1:
            raise DimensionError(f"gradient target must be scalar, got shape {target.shape}")
        grads: dict[int, np.ndarray] = {}
        if target._tape is self:
            grads[target._node] = np.ones_like(target._data)
            for k in range(target._node, -1, -1):
                g = grads.get(k)
                if g is None:
                    continue
                ids, backward = self._nodes[k]
                if backward is None:
                    continue
                parts = backward(g)
                for nid, part in zip(ids, parts):
                    if nid < 0 or part is None:
                        continue
                    if nid in grads:
                        grads[nid] = grads[nid] + part
                    else:
                        grads[nid] = part
        out = []
        for s in sources:
            if s._tape is self and s._node in grads:
                g = np.array(grads[s._node], dtype=np.float64).reshape(s.shape)
                _check_finite(g, "gradient")
                out.append(g)
            else:
                out.append(np.zeros(s.shape))
        return out


def constant(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _tape_of(*tensors: Tensor) -> GradTape | None:
    tape = None
    for t in tensors:
        if t._tape is not None:
            if tape is not None and t._tape is not tape:
                raise ValueError("cannot mix tensors from different tapes")
            tape = t._tape
    return tape


def _emit(out: np.ndarray, inputs: Sequence[Tensor], backward: Backward, what: str) -> Tensor:
    out = np.asarray(out, dtype=np.float64)
    _check_finite(out, what)
    tape = _tape_of(*inputs)
    if tape is None:
        return _const_result(out)
    return tape._record(out, inputs, backward)


def _const_result(out: np.ndarray) -> Tensor:
    t = Tensor.__new__(Tensor)
    out.flags.writeable = False
    t._data = out
    t._tape = None
    t._node = -1
    return t


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {list(a.shape)} and {list(b.shape)} do not broadcast") from None


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    if len(a.shape) not in (1, 2) or len(b.shape) not in (1, 2):
        raise DimensionError(f"matmul needs rank 1 or 2 operands, got {list(a.shape)} and {list(b.shape)}")
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ for shapes {list(a.shape)} and {list(b.shape)}")
    A, B = a.data, b.data
    out = A @ B

    def backward(g):
        A2 = A if A.ndim == 2 else A[None, :]
        B2 = B if B.ndim == 2 else B[:, None]
        g2 = g.reshape(A2.shape[0], B2.shape[1])
        return (g2 @ B2.T).reshape(A.shape), (A2.T @ g2).reshape(B.shape)

    return _emit(out, (a, b), backward, "matmul")


def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape(a, b, "mul")
    A, B = a.data, b.data
    return _emit(A * B, (a, b),
                 lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape(a, b, "div")
    A, B = a.data, b.data
    if np.any(B == 0):
        raise NumericError("division by zero")
    out = A / B
    return _emit(out, (a, b),
                 lambda g: (_unbroadcast(g / B, A.shape), _unbroadcast(-g * out / B, B.shape)), "div")


def transpose(a) -> Tensor:
    a = constant(a)
    return _emit(a.data.T, (a,), lambda g: (g.T,), "transpose")


def exp(a) -> Tensor:
    a = constant(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _emit(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = constant(a)
    A = a.data
    if np.any(A <= 0):
        raise NumericError("log of a non-positive value")
    return _emit(np.log(A), (a,), lambda g: (g / A,), "log")


def sqrt(a) -> Tensor:
    a = constant(a)
    A = a.data
    if np.any(A < 0):
        raise NumericError("sqrt of a negative value")
    out = np.sqrt(A)

    def backward(g):
        if np.any(out == 0):
            raise NumericError("sqrt gradient at zero")
        return (g / (2.0 * out),)

    return _emit(out, (a,), backward, "sqrt")


def relu(a) -> Tensor:
    a = constant(a)
    mask = a.data > 0
    return _emit(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp into [lo, hi]; the gradient is zero where clamping is active."""
    a = constant(a)
    A = a.data
    inside = (A >= lo) & (A <= hi)
    return _emit(np.clip(A, lo, hi), (a,), lambda g: (g * inside,), "clip")


def sum_(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = constant(a)
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=np.float64)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(out, (a,), backward, "sum")


def logsumexp(a, axis: int = -1) -> Tensor:
    """log(sum(exp(a))) along ``axis`` (kept as a size-1 axis), max-shifted."""
    a = constant(a)
    A = a.data
    m = A.max(axis=axis, keepdims=True)
    e = np.exp(A - m)
    s = e.sum(axis=axis, keepdims=True)
    out = m + np.log(s)
    return _emit(out, (a,), lambda g: (g * e / s,), "logsumexp")


def _check_temperature(temperature: float) -> None:
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")


def log_softmax(z, temperature: float = 1.0) -> Tensor:
    """Row-wise log-softmax of ``z / temperature`` (last axis)."""
    _check_temperature(temperature)
    z = constant(z)
    scaled = z * (1.0 / temperature) if temperature != 1.0 else z
    return scaled - logsumexp(scaled, axis=-1)


def softmax(z, temperature: float = 1.0) -> Tensor:
    """exp(z_j/T) / sum_k exp(z_k/T) along the last axis, via max-subtraction."""
    _check_temperature(temperature)
    z = constant(z)
    Z = z.data / temperature
    e = np.exp(Z - Z.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner) / temperature,)

    return _emit(out, (z,), backward, "softmax")


def take_columns(a, cols: Sequence[int]) -> Tensor:
    """Pick column ``cols[i]`` from row ``i`` of a 2-D tensor, giving a length-B vector."""
    a = constant(a)
    if len(a.shape) != 2 or len(cols) != a.shape[0]:
        raise DimensionError(f"take_columns: need {a.shape[0] if a.shape else 0} indices for shape {list(a.shape)}")
    rows = np.arange(a.shape[0])
    idx = np.asarray(cols, dtype=np.int64)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[rows, idx] = g
        return (full,)

    return _emit(a.data[rows, idx], (a,), backward, "take_columns")


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> float:
    """Max relative error between tape gradient and central differences.

    ``f`` maps a tensor to a scalar tensor. The relative error per
    coordinate is ``|analytic - cd| / max(|analytic|, |cd|, 1e-8)``.
    """
    base = _as_array(x.data if isinstance(x, Tensor) else x)
    tape = GradTape()
    xv = tape.watch(base)
    (analytic,) = tape.gradient(f(xv), [xv])

    flat = base.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        probe = flat.copy()
        probe[i] = flat[i] + eps
        fp = _probe(f, probe.reshape(base.shape))
        probe[i] = flat[i] - eps
        fm = _probe(f, probe.reshape(base.shape))
        cd = (fp - fm) / (2.0 * eps)
        an = analytic.reshape(-1)[i]
        err = abs(an - cd) / max(abs(an), abs(cd), 1e-8)
        worst = max(worst, err)
    return worst


def _probe(f, arr: np.ndarray) -> float:
    try:
        val = f(Tensor(arr)).item()
    except NumericError as exc:
        raise NumericError(f"objective not finite at probe point: {exc}") from exc
    if not np.isfinite(val):
        raise NumericError("objective not finite at probe point")
    return val
