"""Dense tensors with tape-based reverse-mode differentiation.

Every op is a pure function of its inputs. When a ``GradTape`` is active on
the calling thread and any input requires a gradient, the op records a
backward closure on that tape; ``backward(loss)`` replays the records in
reverse creation order, which is a topological order of the forward DAG.

Broadcasting is limited to: identical shapes, a size-1 operand, and 2-D
matrices against a row vector (``(n,)``/``(1, n)``) or a column vector
(``(m, 1)``). Anything else is a ``DimensionError``.
"""
from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.core.errors import ContractError, DimensionError, NonFiniteError

Number = Union[int, float]
ArrayLike = Union["Tensor", np.ndarray, Number, Sequence[float]]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

DEFAULT_DTYPE = np.float64

_local = threading.local()


class Tensor:
    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype: Optional[np.dtype] = None) -> None:
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[GradTape] = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __pow__(self, exponent: Number) -> "Tensor":
        return power(self, exponent)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


@dataclass
class _Record:
    op: str
    out: Tensor
    inputs: Tuple[Tensor, ...]
    backward: BackwardFn


class GradTape:
    """Ordered record of primitive ops, confined to the thread that opened it."""

    def __init__(self) -> None:
        self.records: List[_Record] = []
        self._consumed = False
        self._owner = threading.get_ident()

    def __enter__(self) -> "GradTape":
        if threading.get_ident() != self._owner:
            raise ContractError("A GradTape can only be used on the thread that created it")
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc: object) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, op: str, out: Tensor, inputs: Tuple[Tensor, ...], backward: BackwardFn) -> None:
        if self._consumed:
            raise ContractError("Tape already consumed by a backward pass; start a new forward")
        self.records.append(_Record(op, out, inputs, backward))

    def backward(self, loss: Tensor, *, populate: bool = True) -> Dict[int, np.ndarray]:
        """Return ``{id(leaf): dloss/dleaf}``; with ``populate`` also accumulate into ``leaf.grad``."""
        if loss.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ContractError("Loss was not produced under this tape")
        if self._consumed:
            raise ContractError("Second backward pass without a new forward")
        self._consumed = True

        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: Dict[int, Tensor] = {}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            for t, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                grads[key] = grads[key] + gi if key in grads else gi
                if t.is_leaf:
                    leaves[key] = t

        out = {key: grads[key] for key in leaves}
        if populate:
            for key, leaf in leaves.items():
                g = out[key].reshape(leaf.shape)
                leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        return out


def _tape_stack() -> List[GradTape]:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = []
        _local.tapes = stack
    return stack


def active_tape() -> Optional[GradTape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``."""
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise ContractError("Loss was not produced under an active GradTape")
    loss._tape.backward(loss)


@dataclass
class MacCounter:
    """Multiply-accumulate counter fed by matmul and conv2d while active."""

    total: int = 0
    by_op: Dict[str, int] = field(default_factory=dict)

    def add(self, op: str, macs: int) -> None:
        self.total += int(macs)
        self.by_op[op] = self.by_op.get(op, 0) + int(macs)


@contextmanager
def count_macs() -> Iterator[MacCounter]:
    counter = MacCounter()
    prev = getattr(_local, "macs", None)
    _local.macs = counter
    try:
        yield counter
    finally:
        _local.macs = prev


def _count(op: str, macs: int) -> None:
    counter = getattr(_local, "macs", None)
    if counter is not None:
        counter.add(op, macs)


def as_tensor(x: ArrayLike, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _make(op: str, data: np.ndarray, inputs: Tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape.record(op, out, inputs, backward_fn)
    return out


def _check_broadcast(a: Tuple[int, ...], b: Tuple[int, ...], op: str) -> None:
    if a == b or math.prod(a) == 1 or math.prod(b) == 1:
        return
    for m, v in ((a, b), (b, a)):
        if len(m) == 2 and v in ((m[1],), (1, m[1]), (m[0], 1)):
            return
    raise DimensionError(f"{op}: shapes {a} and {b} are not compatible")


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if math.prod(shape) == 1:
        return np.asarray(g.sum()).reshape(shape)
    if len(shape) == 2 and shape[1] == 1 and g.ndim == 2 and shape[0] == g.shape[0]:
        return g.sum(axis=1, keepdims=True)
    return g.sum(axis=0).reshape(shape)


def _binary(op: str, a: ArrayLike, b: ArrayLike) -> Tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        a = Tensor(a)
    ta = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    tb = as_tensor(b, like=ta)
    _check_broadcast(ta.shape, tb.shape, op)
    return ta, tb


# --- elementwise -----------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    ta, tb = _binary("add", a, b)
    return _make(
        "add",
        ta.data + tb.data,
        (ta, tb),
        lambda g: (_unbroadcast(g, ta.shape), _unbroadcast(g, tb.shape)),
    )


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    ta, tb = _binary("sub", a, b)
    return _make(
        "sub",
        ta.data - tb.data,
        (ta, tb),
        lambda g: (_unbroadcast(g, ta.shape), _unbroadcast(-g, tb.shape)),
    )


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    ta, tb = _binary("mul", a, b)
    return _make(
        "mul",
        ta.data * tb.data,
        (ta, tb),
        lambda g: (_unbroadcast(g * tb.data, ta.shape), _unbroadcast(g * ta.data, tb.shape)),
    )


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    ta, tb = _binary("div", a, b)
    return _make(
        "div",
        ta.data / tb.data,
        (ta, tb),
        lambda g: (
            _unbroadcast(g / tb.data, ta.shape),
            _unbroadcast(-g * ta.data / (tb.data * tb.data), tb.shape),
        ),
    )


def neg(x: Tensor) -> Tensor:
    return _make("neg", -x.data, (x,), lambda g: (-g,))


def scale(x: Tensor, c: float) -> Tensor:
    return _make("scale", x.data * c, (x,), lambda g: (g * c,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _make("log", out, (x,), lambda g: (g / x.data,))


def power(x: Tensor, p: Number) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.power(x.data, p)
    return _make("power", out, (x,), lambda g: (g * p * np.power(x.data, p - 1),))


def abs_(x: Tensor) -> Tensor:
    return _make("abs", np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return _make("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    d = x.data
    inner = _GELU_C * (d + 0.044715 * d**3)
    t = np.tanh(inner)
    out = 0.5 * d * (1.0 + t)

    def _back(g: np.ndarray) -> Tuple[np.ndarray]:
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * d**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * d * (1.0 - t * t) * dinner),)

    return _make("gelu", out, (x,), _back)


def maximum(a: ArrayLike, b: ArrayLike) -> Tensor:
    ta, tb = _binary("maximum", a, b)
    pick_a = ta.data >= tb.data
    return _make(
        "maximum",
        np.where(pick_a, ta.data, tb.data),
        (ta, tb),
        lambda g: (_unbroadcast(g * pick_a, ta.shape), _unbroadcast(g * ~pick_a, tb.shape)),
    )


def minimum(a: ArrayLike, b: ArrayLike) -> Tensor:
    ta, tb = _binary("minimum", a, b)
    pick_a = ta.data <= tb.data
    return _make(
        "minimum",
        np.where(pick_a, ta.data, tb.data),
        (ta, tb),
        lambda g: (_unbroadcast(g * pick_a, ta.shape), _unbroadcast(g * ~pick_a, tb.shape)),
    )


def clamp(x: Tensor, lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    lo_v = -np.inf if lo is None else lo
    hi_v = np.inf if hi is None else hi
    inside = (x.data >= lo_v) & (x.data <= hi_v)
    return _make("clamp", np.clip(x.data, lo_v, hi_v), (x,), lambda g: (g * inside,))


# --- shape -----------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from e
    src = x.shape
    return _make("reshape", out, (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose: {axes} is not a permutation of {x.ndim} axes")
    inverse = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise DimensionError("concat: nothing to concatenate")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)):
            raise DimensionError(f"concat: shape {t.shape} does not match {ref} off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    return _make(
        "concat",
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, bounds, axis=axis)),
    )


def gather(x: Tensor, indices: Sequence[int], axis: int = 0) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[axis]):
        raise DimensionError(f"gather: index out of range for axis {axis} of size {x.shape[axis]}")
    src = x.shape

    def _back(g: np.ndarray) -> Tuple[np.ndarray]:
        full = np.zeros(src, dtype=g.dtype)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)

    return _make("gather", np.take(x.data, idx, axis=axis), (x,), _back)


def scatter(x: Tensor, indices: Sequence[int], size: int, axis: int = 0) -> Tensor:
    """Place slices of ``x`` at ``indices`` of a zero tensor with ``size`` slots along ``axis``."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size != x.shape[axis]:
        raise DimensionError("scatter: one index per slice is required")
    if len(np.unique(idx)) != idx.size:
        raise ContractError("scatter: duplicate target indices")
    if idx.size and (idx.min() < 0 or idx.max() >= size):
        raise DimensionError(f"scatter: index out of range for size {size}")
    shape = list(x.shape)
    shape[axis] = size
    out = np.zeros(shape, dtype=x.dtype)
    np.moveaxis(out, axis, 0)[idx] = np.moveaxis(x.data, axis, 0)
    return _make("scatter", out, (x,), lambda g: (np.take(g, idx, axis=axis),))


# --- reductions ------------------------------------------------------------

def sum_(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    src = x.shape

    def _back(g: np.ndarray) -> Tuple[np.ndarray]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make("sum", np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), _back)


def mean(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return scale(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


# --- linear algebra --------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul: expected 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    _count("matmul", a.shape[0] * a.shape[1] * b.shape[1])
    return _make("matmul", a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def softmax_rows(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows: expected 2-D input, got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    return _make("softmax_rows", s, (x,), lambda g: (s * (g - (g * s).sum(axis=1, keepdims=True)),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(f"layer_norm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def _back(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        dxhat = g * gamma.data
        dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _make("layer_norm", out, (x, gamma, beta), _back)


def _im2col(x: np.ndarray, k: int, pad: int) -> np.ndarray:
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((c, k, k, h, w), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, i : i + h, j : j + w]
    return cols.reshape(c * k * k, h * w)


def _col2im(cols: np.ndarray, shape: Tuple[int, int, int], k: int, pad: int) -> np.ndarray:
    c, h, w = shape
    cols = cols.reshape(c, k, k, h, w)
    xp = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            xp[:, i : i + h, j : j + w] += cols[:, i, j]
    return xp[:, pad : pad + h, pad : pad + w]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Stride-1, same-padding local mixing over a ``[C, H, W]`` feature map."""
    if x.ndim != 3 or weight.ndim != 4:
        raise DimensionError(f"conv2d: x {x.shape}, weight {weight.shape}")
    o, c, k, k2 = weight.shape
    if c != x.shape[0] or k != k2 or k % 2 == 0 or bias.shape != (o,):
        raise DimensionError(f"conv2d: x {x.shape}, weight {weight.shape}, bias {bias.shape}")
    _, h, w = x.shape
    pad = k // 2
    cols = _im2col(x.data, k, pad)
    wmat = weight.data.reshape(o, -1)
    _count("conv2d", o * c * k * k * h * w)
    out = (wmat @ cols + bias.data[:, None]).reshape(o, h, w)

    def _back(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        gm = g.reshape(o, h * w)
        dw = (gm @ cols.T).reshape(weight.shape)
        dx = _col2im(wmat.T @ gm, x.shape, k, pad)
        return dx, dw, gm.sum(axis=1)

    return _make("conv2d", out, (x, weight, bias), _back)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return add(matmul(x, weight), bias)
