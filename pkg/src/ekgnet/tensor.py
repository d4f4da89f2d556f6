"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a contiguous numpy array (float32 or float64).  Every
differentiable operation executed while gradients are enabled appends a node
to the active :class:`Tape`; :func:`backward` replays the tape in reverse and
then consumes it.  Only first-order gradients are supported.
"""
from __future__ import annotations

import contextlib
import struct
from typing import BinaryIO, Callable, Sequence

import numpy as np

from .errors import FormatError, NumericDomainError, ShapeError, TapeError

DTYPES = (np.float32, np.float64)

# checked after every forward op; disable only for profiling
CHECK_FINITE = True


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if dtype is None and arr.dtype not in DTYPES:
        arr = arr.astype(np.float64)
    if arr.dtype not in DTYPES:
        raise TypeError(f"unsupported dtype {arr.dtype}; use float32 or float64")
    return np.ascontiguousarray(arr)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = _as_array(data, dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- arithmetic ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self.dtype)))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def backward(self) -> None:
        backward(self)


class Parameter(Tensor):
    """A leaf tensor that always requires gradients."""

    __slots__ = ()

    def __init__(self, data, dtype=None, name: str | None = None):
        super().__init__(data, requires_grad=True, dtype=dtype, name=name)


# ----------------------------------------------------------------------
# Tape
# ----------------------------------------------------------------------
class _Node:
    __slots__ = ("out", "inputs", "backward_fn", "op", "tape")

    def __init__(self, out, inputs, backward_fn, op, tape):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.op = op
        self.tape = tape


class Tape:
    """Ordered record of differentiable operations for one forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward_fn, op: str) -> None:
        node = _Node(out, tuple(inputs), backward_fn, op, self)
        out._node = node
        self.nodes.append(node)

    def clear(self) -> None:
        for node in self.nodes:
            node.out._node = None
        self.nodes = []


_tape = Tape()
_grad_enabled = True


def active_tape() -> Tape:
    return _tape


def reset_tape() -> None:
    """Drop every recorded node without computing gradients."""
    _tape.clear()


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    if CHECK_FINITE and not np.isfinite(arr).all():
        raise NumericDomainError(f"{op} produced non-finite values")


def make_result(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap ``data`` as an op output and record it on the tape when needed.

    ``backward_fn(grad_out)`` must return one gradient (or ``None``) per input.
    """
    _check_finite(data, op)
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _tape.record(out, inputs, backward_fn, op)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf that contributed to ``loss``.

    Leaf gradients accumulate across calls; intermediate gradients are freed.
    The tape is consumed.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    node = loss._node
    if node is None or node.tape is not _tape:
        raise TapeError("loss is not attached to the active tape")
    nodes = _tape.nodes
    stop = nodes.index(node)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for n in reversed(nodes[: stop + 1]):
        g = grads.pop(id(n.out), None)
        if g is None:
            continue
        in_grads = n.backward_fn(g)
        for inp, ig in zip(n.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if ig.shape != inp.shape:
                raise ShapeError(f"{n.op} backward returned {ig.shape} for input {inp.shape}")
            if inp._node is None:
                # leaf: additive accumulation across consumers and calls
                inp.grad = ig.astype(inp.dtype, copy=True) if inp.grad is None else inp.grad + ig
            else:
                key = id(inp)
                grads[key] = ig if key not in grads else grads[key] + ig
    _tape.clear()


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ----------------------------------------------------------------------
# Elementary ops
# ----------------------------------------------------------------------
def add(a, b) -> Tensor:
    a = _wrap(a, None if not isinstance(b, Tensor) else b.dtype)
    b = _wrap(b, a.dtype)
    out = a.data + b.data
    sa, sb = a.shape, b.shape
    return make_result(out.astype(a.dtype, copy=False), (a, b),
                       lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        s = b
        return make_result((a.data * s).astype(a.dtype, copy=False), (a,),
                           lambda g: ((g * s).astype(g.dtype, copy=False),), "scale")
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b),
                       lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)), "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} are incompatible")
    ad, bd = a.data, b.data
    return make_result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return make_result(out, (a,), lambda g: (g.reshape(src),), "reshape")


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return make_result(out, (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    if len(tensors) == 1:
        return tensors[0]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, bounds, axis=axis))

    return make_result(out, tensors, bw, "concat")


def take_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Select entries ``a[i, index[i]]`` of a 2-D tensor."""
    rows = np.arange(a.shape[0])
    src = a.shape

    def bw(g):
        full = np.zeros(src, dtype=g.dtype)
        full[rows, index] = g
        return (full,)

    return make_result(a.data[rows, index], (a,), bw, "take_rows")


# ----------------------------------------------------------------------
# Serialization: "EKGT" | u8 dtype | u8 rank | u64 extents... | raw LE values
# ----------------------------------------------------------------------
TENSOR_MAGIC = b"EKGT"
_DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def write_tensor(fh: BinaryIO, arr) -> None:
    arr = np.asarray(arr.data if isinstance(arr, Tensor) else arr)
    code = _DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise TypeError(f"cannot serialize dtype {arr.dtype}")
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<BB", code, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated tensor record: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor(fh: BinaryIO) -> np.ndarray:
    if _read_exact(fh, 4) != TENSOR_MAGIC:
        raise FormatError("bad tensor magic")
    code, rank = struct.unpack("<BB", _read_exact(fh, 2))
    if code not in _CODE_DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
    dtype = _CODE_DTYPES[code].newbyteorder("<")
    count = int(np.prod(shape, dtype=np.int64))
    raw = _read_exact(fh, count * dtype.itemsize)
    return np.frombuffer(raw, dtype=dtype).astype(_CODE_DTYPES[code]).reshape(shape)


def save_tensor(path, arr) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)

