"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is deliberately small: immutable tensors, a handful of
operations (elementwise arithmetic, 2-D matrix product, reductions,
shape manipulation, gather/concat), and a tape that records the forward
pass so gradients can be accumulated by a single reverse sweep.

Usage:

    x = Tensor([1.0, 2.0], requires_grad=True)
    with GradTape() as tape:
        y = sum(mul(x, x))
    g = tape.gradients(y)[x]          # Tensor([2., 4.])

Tensors are immutable after construction and safe to share across
threads for reading. A tape is single-writer: the thread that opens it
owns it until the context exits. Every array is stored contiguous
row-major; operations copy rather than alias.
"""

from __future__ import annotations

import struct
import threading
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .errors import NumericError, SerializationError, ShapeError

__all__ = [
    "Tensor",
    "GradTape",
    "Gradients",
    "GradCheckReport",
    "as_tensor",
    "stop_recording",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "sigmoid",
    "leaky_relu",
    "exp",
    "log",
    "sqrt",
    "sum",
    "mean",
    "var",
    "reshape",
    "transpose",
    "concat",
    "take",
    "check_gradients",
    "save_tensor",
    "load_tensor",
    "load_csv",
]

_np_sum = np.sum


class Tensor:
    """Immutable row-major float64 array, hashable by identity."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, order="C", copy=True)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "requires_grad", bool(requires_grad))

    def __setattr__(self, name, value):
        raise AttributeError("Tensor is immutable")

    # Identity hashing (no __eq__ override) lets tensors key gradient maps.

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Same values, severed from gradient flow."""
        return Tensor(self.data, requires_grad=False)

    def __copy__(self) -> "Tensor":
        return self

    def __deepcopy__(self, memo) -> "Tensor":
        # a fresh object so copied structures do not alias gradient keys
        out = Tensor(self.data, requires_grad=self.requires_grad)
        memo[id(self)] = out
        return out

    def __float__(self) -> float:
        return self.item()

    def __repr__(self) -> str:
        body = np.array2string(self.data, threshold=8, precision=6)
        return f"Tensor(shape={self.shape}, data={body})"

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

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)


def as_tensor(value) -> Tensor:
    """Wrap scalars / array-likes; pass tensors through untouched."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


# ---------------------------------------------------------------------------
# Tape machinery


class _TapeStack(threading.local):
    def __init__(self):
        self.stack = []
        self.paused = 0


_TAPES = _TapeStack()


def _active_tape():
    if _TAPES.paused or not _TAPES.stack:
        return None
    return _TAPES.stack[-1]


@contextmanager
def stop_recording():
    """Suspend recording on the current thread (e.g. around bookkeeping)."""
    _TAPES.paused += 1
    try:
        yield
    finally:
        _TAPES.paused -= 1


class Gradients:
    """Read-only map from leaf tensors to their accumulated gradients."""

    def __init__(self, table):
        self._table = table

    def __contains__(self, t: Tensor) -> bool:
        return t in self._table

    def __getitem__(self, t: Tensor) -> Tensor:
        arr = self._table.get(t)
        if arr is None:
            raise KeyError("tensor did not participate in the recorded computation")
        return Tensor(arr)

    def get(self, t: Tensor, default=None):
        arr = self._table.get(t)
        return default if arr is None else Tensor(arr)


class GradTape:
    """Records operations on entry; replays them backward for gradients.

    One forward/backward pass owns the tape exclusively. Nested tapes
    record to the innermost context only.
    """

    def __init__(self):
        self._entries = []
        self._used = False

    def __enter__(self) -> "GradTape":
        if self._used:
            raise RuntimeError("a GradTape cannot be reopened")
        self._used = True
        _TAPES.stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPES.stack.pop()
        assert popped is self
        return False

    def gradients(self, target: Tensor) -> Gradients:
        """Accumulate d(target)/d(leaf) for every recorded tensor.

        The seed must be a single-element tensor. Each leaf receives
        exactly one accumulated gradient with the leaf's shape.
        """
        if target.size != 1:
            raise ShapeError(f"gradient seed must be scalar, got shape {target.shape}")
        table = {target: np.ones_like(target.data)}
        for out, inputs, backward in reversed(self._entries):
            g_out = table.get(out)
            if g_out is None:
                continue
            for inp, g_in in zip(inputs, backward(g_out)):
                if g_in is None or not inp.requires_grad:
                    continue
                held = table.get(inp)
                table[inp] = g_in if held is None else held + g_in
        return Gradients(table)


def _record(out: Tensor, inputs, backward):
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape._entries.append((out, tuple(inputs), backward))


def _result(arr, inputs, backward) -> Tensor:
    out = Tensor(arr, requires_grad=any(i.requires_grad for i in inputs))
    _record(out, inputs, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    squeeze = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if squeeze:
        grad = grad.sum(axis=squeeze, keepdims=True)
    return grad


def _broadcast_check(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# Elementwise operations


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "add")
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "sub")
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "mul")
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "div")
    if np.any(b.data == 0.0):
        raise NumericError("division by exact zero")
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _result(out, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul needs 2-D operands with agreeing inner extents, got {a.shape} and {b.shape}")
    return _result(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # Split by sign so neither branch exponentiates a large positive value.
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.where(x > 0, x, slope * x)
    return _result(out, (a,), lambda g: (g * np.where(x > 0, 1.0, slope),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise NumericError("log of a non-positive value")
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0.0):
        raise NumericError("sqrt of a negative value")
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


# ---------------------------------------------------------------------------
# Reductions


def _norm_axes(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _check_nonempty(a: Tensor, axes, op: str):
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    if count == 0:
        raise NumericError(f"{op} over an empty extent, shape {a.shape}")
    return count


def _expand_reduced(g: np.ndarray, shape, axes, keepdims) -> np.ndarray:
    if not keepdims:
        kept = list(shape)
        for ax in axes:
            kept[ax] = 1
        g = g.reshape(kept)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    _check_nonempty(a, axes, "sum")
    out = _np_sum(a.data, axis=axes, keepdims=keepdims)
    return _result(
        out,
        (a,),
        lambda g: (np.ascontiguousarray(_expand_reduced(g, a.shape, axes, keepdims)),),
    )


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = _check_nonempty(a, axes, "mean")
    out = np.mean(a.data, axis=axes, keepdims=keepdims)
    return _result(
        out,
        (a,),
        lambda g: (_expand_reduced(g, a.shape, axes, keepdims) / n,),
    )


def var(a, axis=None, keepdims: bool = False) -> Tensor:
    """Biased variance (divide by N), matching batch-statistic convention."""
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = _check_nonempty(a, axes, "var")
    mu = np.mean(a.data, axis=axes, keepdims=True)
    out = np.mean((a.data - mu) ** 2, axis=axes, keepdims=keepdims)

    def backward(g):
        g_full = _expand_reduced(g, a.shape, axes, keepdims)
        return (g_full * 2.0 * (a.data - mu) / n,)

    return _result(out, (a,), backward)


# ---------------------------------------------------------------------------
# Shape manipulation


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape) if not isinstance(shape, int) else (shape,)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from None
    return _result(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(
        np.transpose(a.data, axes),
        (a,),
        lambda g: (np.ascontiguousarray(np.transpose(g, inverse)),),
    )


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat: incompatible shapes {[t.shape for t in tensors]} along axis {axis}"
        ) from None
    offsets = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, offsets, axis=axis))

    return _result(out, tuple(tensors), backward)


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather slices along an axis; gradients scatter-add back."""
    a = as_tensor(a)
    axis = axis % a.ndim
    idx = np.asarray(indices, dtype=np.intp)
    extent = a.shape[axis]
    if idx.size and (idx.min() < -extent or idx.max() >= extent):
        raise ShapeError(f"take: index out of range for extent {extent} on axis {axis}")
    idx = np.where(idx < 0, idx + extent, idx)
    out = np.take(a.data, idx, axis=axis)

    def backward(g):
        gz = np.zeros(a.shape, dtype=np.float64)
        np.add.at(gz, (slice(None),) * axis + (idx,), g)
        return (gz,)

    return _result(out, (a,), backward)


# ---------------------------------------------------------------------------
# Gradient checking


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    tol: float
    step: float
    worst_index: tuple
    analytic: Tensor
    numeric: Tensor

    def __str__(self) -> str:
        word = "pass" if self.passed else "FAIL"
        return f"gradient check {word}: max rel err {self.max_rel_error:.3e} (tol {self.tol:.1e})"


def check_gradients(f, x, h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare the taped gradient of a scalar function against central differences.

    Relative error per element is |a - n| / max(1, |a|, |n|); the report
    passes iff the maximum over elements is at most tol.
    """
    x = as_tensor(x)
    leaf = Tensor(x.data, requires_grad=True)
    with GradTape() as tape:
        y = f(leaf)
    found = tape.gradients(as_tensor(y)).get(leaf)
    analytic = np.zeros_like(x.data) if found is None else found.data

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    with stop_recording():
        for i in range(flat.size):
            bumped = flat.copy()
            bumped[i] = flat[i] + h
            up = as_tensor(f(Tensor(bumped.reshape(x.shape)))).item()
            bumped[i] = flat[i] - h
            down = as_tensor(f(Tensor(bumped.reshape(x.shape)))).item()
            numeric.reshape(-1)[i] = (up - down) / (2.0 * h)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    rel = np.abs(analytic - numeric) / denom
    worst = np.unravel_index(int(np.argmax(rel)), rel.shape) if rel.size else ()
    max_rel = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(
        passed=bool(max_rel <= tol),
        max_rel_error=max_rel,
        tol=tol,
        step=h,
        worst_index=worst,
        analytic=Tensor(analytic),
        numeric=Tensor(numeric),
    )


# ---------------------------------------------------------------------------
# Serialization

_MAGIC = b"DMX1"


def save_tensor(path, t) -> None:
    """Write magic "DMX1", u32 rank, u64 extents, little-endian f64 payload."""
    t = as_tensor(t)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", t.ndim))
        if t.ndim:
            fh.write(struct.pack(f"<{t.ndim}Q", *t.shape))
        fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise SerializationError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 8:
        raise SerializationError(f"{path}: truncated header")
    (rank,) = struct.unpack_from("<I", blob, 4)
    offset = 8
    if len(blob) < offset + 8 * rank:
        raise SerializationError(f"{path}: truncated extents")
    shape = struct.unpack_from(f"<{rank}Q", blob, offset) if rank else ()
    offset += 8 * rank
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    if len(blob) != offset + 8 * count:
        raise SerializationError(
            f"{path}: payload is {len(blob) - offset} bytes, expected {8 * count}"
        )
    data = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
    return Tensor(data.reshape(shape))


def load_csv(path) -> Tensor:
    """Read a comma-separated numeric fixture as a 2-D tensor."""
    try:
        rows = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    except ValueError as err:
        raise SerializationError(f"{path}: {err}") from None
    return Tensor(rows)
