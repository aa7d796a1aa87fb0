"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records primitive applications in creation order, so the
record is already topologically sorted and the backward sweep is a single
reverse pass.  Tensors that are not bound to a tape act as constants.

    >>> tape = Tape()
    >>> x = tape.leaf([1.0, 2.0, 3.0])
    >>> grads = backward(tape, x.square().sum())
    >>> grads[x].tolist()
    [2.0, 4.0, 6.0]
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericalError, ShapeError

_CHECK_FINITE = True


def set_finite_checks(enabled: bool) -> bool:
    """Toggle NaN/Inf detection after every primitive; returns the old flag."""
    global _CHECK_FINITE
    old = _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)
    return old


@contextlib.contextmanager
def finite_checks(enabled: bool):
    old = set_finite_checks(enabled)
    try:
        yield
    finally:
        set_finite_checks(old)


class Tensor:
    """Dense real array, optionally registered on a tape."""

    __slots__ = ("value", "tape", "node_id")
    __array_priority__ = 100  # keep ndarray <op> Tensor dispatching to Tensor

    def __init__(self, value, tape: "Tape | None" = None, node_id: int | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def item(self) -> float:
        if self.value.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.value.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.value

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def __repr__(self) -> str:
        where = f", node={self.node_id}" if self.node_id is not None else ""
        return f"Tensor(shape={self.shape}{where})"

    def __len__(self) -> int:
        return len(self.value)

    # arithmetic
    def __add__(self, other):
        return apply_primitive("add", self, other)

    def __radd__(self, other):
        return apply_primitive("add", other, self)

    def __sub__(self, other):
        return apply_primitive("sub", self, other)

    def __rsub__(self, other):
        return apply_primitive("sub", other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return apply_primitive("scale", self, factor=float(other))
        return apply_primitive("mul", self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return apply_primitive("scale", self, factor=1.0 / float(other))
        return apply_primitive("div", self, other)

    def __rtruediv__(self, other):
        return apply_primitive("div", other, self)

    def __neg__(self):
        return apply_primitive("scale", self, factor=-1.0)

    def __matmul__(self, other):
        return apply_primitive("matmul", self, other)

    def __rmatmul__(self, other):
        return apply_primitive("matmul", other, self)

    def __getitem__(self, index):
        return apply_primitive("slice", self, index=index)

    # unary maps and reductions
    def tanh(self):
        return apply_primitive("tanh", self)

    def softplus(self):
        return apply_primitive("softplus", self)

    def exp(self):
        return apply_primitive("exp", self)

    def log(self):
        return apply_primitive("log", self)

    def square(self):
        return apply_primitive("square", self)

    def sum(self, axis=None, keepdims=False):
        return apply_primitive("sum", self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return apply_primitive("mean", self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply_primitive("reshape", self, shape=shape)

    @property
    def T(self):
        return apply_primitive("transpose", self)


class Gradients(dict):
    """Mapping node_id -> gradient array; also indexable by Tensor.

    Nodes that never received a gradient (not on a path to the root) read
    back as zeros of the right shape.
    """

    def __init__(self, tape: "Tape"):
        super().__init__()
        self._tape = tape

    def __getitem__(self, key):
        node_id = key.node_id if isinstance(key, Tensor) else key
        if node_id is None:
            raise ContractError("tensor is not recorded on a tape")
        if node_id in self:
            return dict.__getitem__(self, node_id)
        return np.zeros(self._tape.shapes[node_id])


class Tape:
    """Ordered record of primitive applications."""

    def __init__(self):
        self.parents: list[tuple[int | None, ...]] = []
        self.vjps: list[Callable | None] = []
        self.shapes: list[tuple[int, ...]] = []

    def __len__(self) -> int:
        return len(self.parents)

    def leaf(self, value) -> Tensor:
        t = Tensor(np.array(value, dtype=np.float64))
        return self._append(t, (), None)

    def record(self, value: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
        """Register a result computed outside the primitive table.

        ``vjp(g)`` must return one gradient (or None) per entry of ``inputs``.
        This is how fused kernels join the tape.
        """
        out = Tensor(value)
        _check_finite("custom", out.value)
        return self._append(out, tuple(t.node_id for t in inputs), vjp)

    def _append(self, t: Tensor, parents, vjp) -> Tensor:
        t.tape = self
        t.node_id = len(self.parents)
        self.parents.append(parents)
        self.vjps.append(vjp)
        self.shapes.append(t.value.shape)
        return t

    def backward(self, root: Tensor) -> Gradients:
        return backward(self, root)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _common_tape(tensors: Iterable[Tensor]) -> "Tape | None":
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif t.tape is not tape:
                raise ContractError("operands live on different tapes")
    return tape


def _check_finite(name: str, value: np.ndarray) -> None:
    if _CHECK_FINITE and not np.all(np.isfinite(value)):
        raise NumericalError(f"{name}: non-finite values in output")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(name: str, a: np.ndarray, b: np.ndarray) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from None


# --- primitive table -------------------------------------------------------
# Each entry maps input arrays (+ keyword params) to (output, vjp) where
# vjp(g) returns one gradient per input.


def _add(a, b):
    _broadcast_shape("add", a, b)
    return a + b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


def _sub(a, b):
    _broadcast_shape("sub", a, b)
    return a - b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))


def _mul(a, b):
    _broadcast_shape("mul", a, b)
    return a * b, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


def _div(a, b):
    _broadcast_shape("div", a, b)
    out = a / b
    return out, lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape))


def _scale(a, factor):
    return a * factor, lambda g: (g * factor,)


def _matmul(a, b):
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0] \
            or (a.ndim == 1 and b.ndim == 1):
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    out = a @ b
    if b.ndim == 1:
        return out, lambda g: (np.outer(g, b), a.T @ g)
    if a.ndim == 1:
        return out, lambda g: (b @ g, np.outer(a, g))
    return out, lambda g: (g @ b.T, a.T @ g)


def _tanh(a):
    out = np.tanh(a)
    return out, lambda g: (g * (1.0 - out * out),)


def _softplus(a):
    out = np.logaddexp(0.0, a)
    return out, lambda g: (g * np.exp(a - out),)  # sigmoid(a)


def _exp(a):
    with np.errstate(over="ignore"):  # overflow surfaces via the finite check
        out = np.exp(a)
    return out, lambda g: (g * out,)


def _log(a):
    if np.any(a <= 0):
        raise NumericalError("log: nonpositive input")
    return np.log(a), lambda g: (g / a,)


def _square(a):
    return a * a, lambda g: (2.0 * a * g,)


def _sum(a, axis=None, keepdims=False):
    out = a.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return out, vjp


def _mean(a, axis=None, keepdims=False):
    out, sum_vjp = _sum(a, axis, keepdims)
    n = a.size / max(out.size, 1) if a.size else 1
    return out / n, lambda g: (sum_vjp(g)[0] / n,)


def _reshape(a, shape):
    try:
        out = a.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return out, lambda g: (g.reshape(a.shape),)


def _transpose(a):
    if a.ndim != 2:
        raise ShapeError(f"transpose: needs a matrix, got shape {a.shape}")
    return a.T, lambda g: (g.T,)


def _slice(a, index):
    try:
        out = a[index]
    except IndexError as exc:
        raise ShapeError(f"slice: {exc} for shape {a.shape}") from None

    def vjp(g):
        grad = np.zeros_like(a)
        np.add.at(grad, index, g)
        return (grad,)

    return np.array(out, dtype=np.float64), vjp


def _concat(*arrays, axis=0):
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError:
        shapes = [x.shape for x in arrays]
        raise ShapeError(f"concat: shapes {shapes} do not join along axis {axis}") from None
    bounds = np.cumsum([x.shape[axis] for x in arrays])[:-1]
    return out, lambda g: tuple(np.split(g, bounds, axis=axis))


def _logsumexp(a, mask=None):
    """Row-wise log-sum-exp over the last axis, restricted to ``mask``."""
    if mask is not None and mask.shape != a.shape:
        raise ShapeError(f"logsumexp: mask shape {mask.shape} differs from {a.shape}")
    masked = a if mask is None else np.where(mask, a, -np.inf)
    peak = masked.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(peak)):
        raise ContractError("logsumexp: a row has no unmasked entries")
    weights = np.exp(masked - peak)
    total = weights.sum(axis=-1, keepdims=True)
    out = peak + np.log(total)
    softmax = weights / total
    return out, lambda g: (g * softmax,)


def _broadcast_add_row(a, row):
    if a.ndim != 2 or row.shape != (a.shape[1],):
        raise ShapeError(f"broadcast-add-row: shapes {a.shape} and {row.shape} do not conform")
    return a + row, lambda g: (g, g.sum(axis=0))


PRIMITIVES: dict[str, Callable] = {
    "add": _add,
    "sub": _sub,
    "mul": _mul,
    "div": _div,
    "scale": _scale,
    "matmul": _matmul,
    "tanh": _tanh,
    "softplus": _softplus,
    "exp": _exp,
    "log": _log,
    "square": _square,
    "sum": _sum,
    "mean": _mean,
    "reshape": _reshape,
    "transpose": _transpose,
    "slice": _slice,
    "concat": _concat,
    "logsumexp": _logsumexp,
    "broadcast_add_row": _broadcast_add_row,
}


def apply_primitive(op: str, *inputs, **params) -> Tensor:
    """Evaluate primitive ``op`` and register it on the inputs' tape."""
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise ContractError(f"unknown primitive {op!r}") from None
    tensors = [as_tensor(x) for x in inputs]
    value, vjp = fn(*(t.value for t in tensors), **params)
    _check_finite(op, value)
    tape = _common_tape(tensors)
    if tape is None:
        return Tensor(value)
    out = Tensor(value)
    return tape._append(out, tuple(t.node_id for t in tensors), vjp)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    return apply_primitive("concat", *tensors, axis=axis)


def logsumexp(x, mask=None) -> Tensor:
    return apply_primitive("logsumexp", x, mask=mask)


def backward(tape: Tape, root: Tensor) -> Gradients:
    """Gradient of scalar ``root`` with respect to every node on ``tape``."""
    if root.tape is not tape or root.node_id is None:
        raise ContractError("backward root is not recorded on this tape")
    if root.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")
    grads = Gradients(tape)
    grads[root.node_id] = np.ones(root.shape)
    for nid in range(root.node_id, -1, -1):
        g = grads.get(nid)
        vjp = tape.vjps[nid]
        if g is None or vjp is None:
            continue
        for parent, pg in zip(tape.parents[nid], vjp(g)):
            if parent is None or pg is None:
                continue
            if parent in grads:
                grads[parent] = grads[parent] + pg
            else:
                grads[parent] = pg
    return grads


def grad_check(
    f: Callable[[Tensor], Tensor],
    at,
    step: float = 1e-5,
    coords: Sequence[int] | None = None,
) -> float:
    """Max relative error between autodiff and central differences.

    ``coords`` restricts the comparison to flat indices of ``at``.
    """
    at = np.array(at, dtype=np.float64)
    tape = Tape()
    x = tape.leaf(at.copy())
    y = f(x)
    analytic = backward(tape, y)[x].reshape(-1)
    flat = at.reshape(-1)
    indices = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in indices:
        probe = flat.copy()
        probe[i] = flat[i] + step
        up = f(Tensor(probe.reshape(at.shape))).item()
        probe[i] = flat[i] - step
        down = f(Tensor(probe.reshape(at.shape))).item()
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericalError(f"grad_check: f is not finite near coordinate {i}")
        central = (up - down) / (2.0 * step)
        err = abs(analytic[i] - central) / (abs(analytic[i]) + abs(central) + 1e-12)
        worst = max(worst, err)
    return worst
