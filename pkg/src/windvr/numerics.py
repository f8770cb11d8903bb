"""Dense float64 tensors with a reverse-mode gradient tape.

Tensors are immutable wrappers around numpy arrays. Operations record onto
the active :class:`GradTape` (if any) whenever one of their inputs requires
a gradient. Because records are appended in execution order the tape is
already topologically sorted, so :meth:`GradTape.backward` is one reverse
sweep.

    >>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> with GradTape() as tape:
    ...     loss = (x * x).sum()
    >>> tape.backward(loss)[x].data
    array([2., 4., 6.])

Broadcasting is deliberately narrow: binary ops accept equal shapes or an
operand whose shape is a suffix of the other's (leading-axis expansion).
Anything else needs an explicit :func:`broadcast_to` or :func:`reshape`.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64
TENSOR_MAGIC = b"WVT1"

_ACTIVE: list["GradTape"] = []

# ops that cannot turn finite inputs into non-finite outputs skip the output scan
_VALUE_PRESERVING = frozenset({
    "reshape", "transpose", "broadcast_to", "concat", "slice", "take",
    "softmax", "layer_norm", "sigmoid", "rope", "abs",
})


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def _check_finite(arr: np.ndarray, where: str) -> None:
    # a single reduction is cheaper than an elementwise mask; overflow only errs toward raising
    if arr.size and not math.isfinite(float(arr.sum())):
        raise NonFiniteError(f"{where}: non-finite values encountered")


class Tensor:
    __slots__ = ("data", "requires_grad", "tape_id", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, _check: bool = True):
        if _check:
            arr = np.array(data, dtype=DTYPE)
            _check_finite(arr, "Tensor")
        else:
            arr = np.asarray(data, dtype=DTYPE)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.tape_id: int | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, _check=False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return mul(self, reciprocal(as_tensor(other)))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class GradTape:
    """Records differentiable operations while active (use as a context manager)."""

    def __init__(self):
        self.records: list[_Record] = []
        self.leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "GradTape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def reset(self) -> None:
        for rec in self.records:
            rec.output.tape_id = None
        self.records.clear()
        self.leaves.clear()

    def backward(self, loss: Tensor, retain: bool = False) -> dict[Tensor, Tensor]:
        """Return d(loss)/d(leaf) for every tracked leaf that ``loss`` depends on.

        Leaves that received no contribution are absent from the map. The tape
        is reset afterwards unless ``retain`` is set.
        """
        if loss.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        if not self.records:
            raise RuntimeError("backward: tape is empty")
        if loss.tape_id is None or loss.tape_id >= len(self.records) or self.records[loss.tape_id].output is not loss:
            raise RuntimeError("backward: loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
        for rec in reversed(self.records[: loss.tape_id + 1]):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        out = {}
        for key, leaf in self.leaves.items():
            if key in grads:
                out[leaf] = Tensor(grads[key], _check=False)
        if not retain:
            self.reset()
        return out


def backward(loss: Tensor, tape: GradTape | None = None) -> dict[Tensor, Tensor]:
    tape = tape or (_ACTIVE[-1] if _ACTIVE else None)
    if tape is None:
        raise RuntimeError("backward: no tape given and none active")
    return tape.backward(loss)


def record(op: str, inputs: Sequence[Tensor], out: np.ndarray, vjp) -> Tensor:
    """Wrap ``out`` as a Tensor and append a tape record if any input needs a gradient.

    ``vjp(g)`` maps the output cotangent to one cotangent per input (or None).
    This is the extension point for new primitives.
    """
    if op not in _VALUE_PRESERVING:
        _check_finite(out, op)
    res = Tensor(out, _check=False)
    if _ACTIVE and any(t.requires_grad for t in inputs):
        tape = _ACTIVE[-1]
        for t in inputs:
            if t.requires_grad and t.tape_id is None:
                tape.leaves[id(t)] = t
        res.requires_grad = True
        res.tape_id = len(tape.records)
        tape.records.append(_Record(op, tuple(inputs), res, vjp))
    return res


def is_recording() -> bool:
    return bool(_ACTIVE)


# ---------------------------------------------------------------- broadcasting

def _suffix_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, int]:
    """Number of leading axes each operand is expanded over."""
    sa, sb = a.shape, b.shape
    if sa == sb:
        return 0, 0
    if len(sb) <= len(sa) and sa[len(sa) - len(sb):] == sb:
        return 0, len(sa) - len(sb)
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return len(sb) - len(sa), 0
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def _reduce_lead(g: np.ndarray, lead: int) -> np.ndarray:
    if lead == 0:
        return g
    return g.reshape((-1,) + g.shape[lead:]).sum(axis=0)


# ---------------------------------------------------------------- elementwise binary

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    la, lb = _suffix_broadcast("add", a, b)
    return record("add", (a, b), a.data + b.data,
                  lambda g: (_reduce_lead(g, la), _reduce_lead(g, lb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    la, lb = _suffix_broadcast("sub", a, b)
    return record("sub", (a, b), a.data - b.data,
                  lambda g: (_reduce_lead(g, la), -_reduce_lead(g, lb)))


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        return scale(a, float(b))
    if isinstance(a, (int, float)):
        return scale(b, float(a))
    a, b = as_tensor(a), as_tensor(b)
    la, lb = _suffix_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    return record("mul", (a, b), ad * bd,
                  lambda g: (_reduce_lead(g * bd, la) if a.requires_grad else None,
                             _reduce_lead(g * ad, lb) if b.requires_grad else None))


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return record("scale", (a,), a.data * c, lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    return record("add_scalar", (a,), a.data + float(c), lambda g: (g,))


def reciprocal(a: Tensor) -> Tensor:
    if np.any(a.data == 0):
        raise NonFiniteError("reciprocal: division by zero")
    out = 1.0 / a.data
    return record("reciprocal", (a,), out, lambda g: (-g * out * out,))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes follow the suffix rule.

    A 2-D right operand is shared across all leading axes of the left one.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ba, bb = a.shape[:-2], b.shape[:-2]
    if ba != bb and not (len(bb) <= len(ba) and ba[len(ba) - len(bb):] == bb) \
            and not (len(ba) < len(bb) and bb[len(bb) - len(ba):] == ba):
        raise ShapeError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd
    la, lb = len(out.shape) - len(a.shape), len(out.shape) - len(b.shape)

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _reduce_lead(g @ np.swapaxes(bd, -1, -2), la)
        if b.requires_grad:
            if b.ndim == 2 and g.ndim > 2:
                gb = ad.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _reduce_lead(np.swapaxes(ad, -1, -2) @ g, lb)
        return ga, gb

    return record("matmul", (a, b), out, vjp)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---------------------------------------------------------------- shape ops

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {src} to {shape}") from None
    return record("reshape", (a,), out, lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: bad axes {axes} for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return record("transpose", (a,), a.data.transpose(axes), lambda g: (g.transpose(inv),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit numpy-style broadcast; backward sums over the expanded axes."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None
    src = a.shape
    lead = len(shape) - len(src)

    def vjp(g):
        g = _reduce_lead(g, lead) if lead else g
        axes = tuple(i for i, s in enumerate(src) if s == 1 and g.shape[i] != 1)
        return (g.sum(axis=axes, keepdims=True) if axes else g,)

    return record("broadcast_to", (a,), np.ascontiguousarray(out), vjp)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} along axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    cuts = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return record("concat", tuple(tensors), out, lambda g: tuple(np.split(g, cuts, axis=ax)))


def slice_(a: Tensor, index) -> Tensor:
    """Basic (non-advanced) indexing: ints, slices, Ellipsis."""
    out = a.data[index]
    src = a.shape

    def vjp(g):
        full = np.zeros(src, dtype=DTYPE)
        full[index] = g
        return (full,)

    return record("slice", (a,), np.array(out), vjp)


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis`` by an integer index map (repeats allowed)."""
    idx = np.asarray(indices, dtype=np.intp)
    ax = axis % a.ndim
    if idx.size and (idx.min() < -a.shape[ax] or idx.max() >= a.shape[ax]):
        raise ShapeError(f"take: index out of range for axis {axis} of shape {a.shape}")
    out = np.take(a.data, idx, axis=ax)
    src = a.shape
    unique = idx.ndim == 1 and len(np.unique(idx)) == idx.size

    def vjp(g):
        full = np.zeros(src, dtype=DTYPE)
        full_moved = np.moveaxis(full, ax, 0)
        g_moved = np.moveaxis(g, list(range(ax, ax + idx.ndim)), list(range(idx.ndim)))
        if unique:
            full_moved[idx] = g_moved
        else:
            np.add.at(full_moved, idx, g_moved)
        return (full,)

    return record("take", (a,), out, vjp)


# ---------------------------------------------------------------- reductions

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    src = a.shape
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, src).copy(),)

    return record("sum", (a,), np.asarray(out), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return scale(sum_(a, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------- nonlinearities

def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return record("softmax", (a,), s, vjp)


def layer_norm(a: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no affine terms)."""
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    n = a.shape[-1]

    def vjp(g):
        gy = g * inv
        return (gy - gy.mean(axis=-1, keepdims=True) - y * (g * y).sum(axis=-1, keepdims=True) * inv / n,)

    return record("layer_norm", (a,), y, vjp)


_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    t = np.tanh(x * (_SQRT_2_OVER_PI + (_SQRT_2_OVER_PI * 0.044715) * x2))
    half = 0.5 * (1.0 + t)
    out = x * half

    def vjp(g):
        du = _SQRT_2_OVER_PI + (3 * _SQRT_2_OVER_PI * 0.044715) * x2
        return (g * (half + 0.5 * x * (1.0 - t * t) * du),)

    return record("gelu", (a,), out, vjp)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid_np(a.data)
    return record("sigmoid", (a,), s, lambda g: (g * s * (1.0 - s),))


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = _sigmoid_np(x)
    return record("silu", (a,), x * s, lambda g: (g * (s + x * s * (1.0 - s)),))


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), evaluated stably."""
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    s = _sigmoid_np(x)
    return record("softplus", (a,), out, lambda g: (g * s,))


def abs_(a: Tensor) -> Tensor:
    sgn = np.sign(a.data)
    return record("abs", (a,), np.abs(a.data), lambda g: (g * sgn,))


def square(a: Tensor) -> Tensor:
    x = a.data
    return record("square", (a,), x * x, lambda g: (2.0 * g * x,))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise NonFiniteError("sqrt: negative input")
    out = np.sqrt(a.data)

    def vjp(g):
        if np.any(out == 0):
            raise NonFiniteError("sqrt: gradient undefined at 0")
        return (g * 0.5 / out,)

    return record("sqrt", (a,), out, vjp)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow surfaces as NonFiniteError instead
        out = np.exp(a.data)
    return record("exp", (a,), out, lambda g: (g * out,))


# ---------------------------------------------------------------- gradient check

@dataclass
class GradCheckReport:
    max_rel_err: float
    max_abs_err: float
    passed: bool
    analytic: np.ndarray
    numeric: np.ndarray

    @property
    def pass_(self) -> bool:
        return self.passed


def numeric_grad(f: Callable[[Tensor], Tensor], x: np.ndarray, step: float) -> np.ndarray:
    """Central-difference gradient of a scalar function, one element at a time."""
    x = np.array(x, dtype=DTYPE)
    flat = x.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(Tensor(x)).item()
        flat[i] = orig - step
        fm = f(Tensor(x)).item()
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * step)
    return out.reshape(x.shape)


def grad_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-4, tol: float = 1e-4,
               atol: float = 1e-8) -> GradCheckReport:
    """Compare tape gradients of scalar ``f`` at ``x`` with central differences.

    Elements where both gradients are within ``atol`` of zero are judged on
    absolute error instead of relative error.
    """
    if not 1e-6 <= step <= 1e-3:
        raise ValueError(f"grad_check: step {step} outside [1e-6, 1e-3]")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=DTYPE)
    first, second = f(Tensor(x0)), f(Tensor(x0))
    if first.size != 1:
        raise ShapeError(f"grad_check: f must be scalar-valued, got shape {first.shape}")
    if first.data.tobytes() != second.data.tobytes():
        raise RuntimeError("grad_check: f is not deterministic")

    leaf = Tensor(x0, requires_grad=True)
    with GradTape() as tape:
        y = f(leaf)
    grads = tape.backward(y)
    analytic = grads[leaf].data if leaf in grads else np.zeros_like(x0)
    numeric = numeric_grad(f, x0, step)
    abs_err = np.abs(analytic - numeric)
    denom = np.maximum(np.abs(analytic), np.abs(numeric))
    near_zero = denom <= atol
    rel = np.where(near_zero, np.where(abs_err <= atol, 0.0, np.inf),
                   abs_err / np.where(near_zero, 1.0, denom))
    max_rel = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(max_rel, float(abs_err.max()) if abs_err.size else 0.0,
                           max_rel <= tol, analytic, numeric)


# ---------------------------------------------------------------- serialization

def tensor_to_bytes(t) -> bytes:
    arr = np.asarray(t.data if isinstance(t, Tensor) else t, dtype="<f8")
    header = TENSOR_MAGIC + struct.pack("<Q", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr).tobytes()


def tensor_from_bytes(buf: bytes) -> Tensor:
    if buf[:4] != TENSOR_MAGIC:
        raise ValueError("not a WVT1 tensor file")
    (rank,) = struct.unpack_from("<Q", buf, 4)
    shape = struct.unpack_from(f"<{rank}Q", buf, 12)
    off = 12 + 8 * rank
    n = int(np.prod(shape)) if rank else 1
    payload = np.frombuffer(buf, dtype="<f8", count=n, offset=off)
    if len(buf) != off + 8 * n:
        raise ValueError(f"tensor payload size mismatch: expected {8 * n} bytes, got {len(buf) - off}")
    return Tensor(payload.reshape(shape).astype(DTYPE))


def save_tensor(path, t) -> None:
    Path(path).write_bytes(tensor_to_bytes(t))


def load_tensor(path) -> Tensor:
    return tensor_from_bytes(Path(path).read_bytes())
