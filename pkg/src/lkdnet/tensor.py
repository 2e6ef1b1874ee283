"""Rank-4 tensor container, parameters, and the on-disk tensor format.

Every value flowing through the network is a Tensor with shape
[batch, channels, height, width], backed by a contiguous row-major numpy
array in the working dtype (see precision.py). Vectors such as channel
attention weights ride along as [N, C, 1, 1]; per-channel parameters as
[1, C, 1, 1].

Binary format (little-endian throughout):
    magic   4 bytes  b"LKDT"
    version u16      currently 1
    dtype   u8       0 = float32, 1 = float64
    shape   4 x u64  N, C, H, W
    payload N*C*H*W scalars, row-major
"""

from __future__ import annotations

import struct

import numpy as np

from . import precision


class ShapeError(ValueError):
    """Shape mismatch; the message carries both offending shapes."""


class NumericError(ArithmeticError):
    """Non-finite value produced where a finite one is required."""


_MAGIC = b"LKDT"
_VERSION = 1
_DTYPE_CODES = {0: np.float32, 1: np.float64}
_CODE_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class Tensor:
    """Contiguous [N, C, H, W] array in the working dtype."""

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else precision.dtype())
        if arr.ndim != 4:
            raise ShapeError(f"tensor must be rank 4, got shape {arr.shape}")
        if arr.dtype not in (np.float32, np.float64):
            raise ValueError(f"unsupported dtype {arr.dtype}")
        self.data = np.ascontiguousarray(arr)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @classmethod
    def zeros(cls, shape, dtype=None):
        return cls(np.zeros(shape, dtype=dtype if dtype is not None else precision.dtype()))

    @classmethod
    def ones(cls, shape, dtype=None):
        return cls(np.ones(shape, dtype=dtype if dtype is not None else precision.dtype()))

    @classmethod
    def full(cls, shape, value, dtype=None):
        return cls(np.full(shape, value, dtype=dtype if dtype is not None else precision.dtype()))

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), dtype=dtype)

    def __add__(self, other):
        return elementwise("add", self, other)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name})"


def _broadcast_ok(a_shape, b_shape) -> bool:
    # Exact match, or b is a per-channel [N, C, 1, 1] vector over a's grid.
    if a_shape == b_shape:
        return True
    return (
        b_shape[0] == a_shape[0]
        and b_shape[1] == a_shape[1]
        and b_shape[2] == b_shape[3] == 1
    )


def elementwise(kind: str, a: Tensor, b) -> Tensor:
    """Pointwise add/sub/mul; b may be a scalar or a [N, C, 1, 1] vector."""
    if kind not in ("add", "sub", "mul"):
        raise ValueError(f"unknown elementwise kind {kind!r}")
    if isinstance(b, (int, float)):
        bv = a.data.dtype.type(b)
    else:
        if not _broadcast_ok(a.shape, b.shape):
            raise ShapeError(f"elementwise {kind}: shapes {a.shape} and {b.shape} do not align")
        bv = b.data
    if kind == "add":
        out = a.data + bv
    elif kind == "sub":
        out = a.data - bv
    else:
        out = a.data * bv
    return Tensor(out, dtype=a.data.dtype)


def reduce(t: Tensor, kind: str, axes) -> Tensor:
    """Sum or mean over a subset of {0, 2, 3}; reduced axes keep size 1.

    Channel reduction is deliberately unsupported: nothing in the network
    mixes channels outside a conv or linear layer.
    """
    if kind not in ("sum", "mean"):
        raise ValueError(f"unknown reduce kind {kind!r}")
    axes = tuple(sorted(set(axes)))
    if not axes or any(ax not in (0, 2, 3) for ax in axes):
        raise ValueError(f"reduce axes must be a non-empty subset of (0, 2, 3), got {axes}")
    fn = np.sum if kind == "sum" else np.mean
    out = fn(t.data, axis=axes, keepdims=True)
    return Tensor(out, dtype=t.data.dtype)


def gap(t: Tensor) -> Tensor:
    """Global average pool over the spatial grid: [N, C, H, W] -> [N, C, 1, 1]."""
    return reduce(t, "mean", (2, 3))


class Parameter:
    """Learnable tensor plus its gradient accumulator.

    The name is assigned once when the owning model finalizes its module
    tree; it doubles as the key in optimizer state and checkpoints.
    """

    __slots__ = ("value", "grad", "name")

    def __init__(self, value: Tensor, name: str = ""):
        self.value = value
        self.grad = Tensor.zeros(value.shape, dtype=value.data.dtype)
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad.data.fill(0.0)

    def accumulate_grad(self, g: Tensor) -> None:
        if g.shape != self.value.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match parameter "
                f"{self.name or '<unnamed>'} shape {self.value.shape}"
            )
        self.grad.data += g.data

    def __repr__(self):
        return f"Parameter({self.name or '<unnamed>'}, shape={self.value.shape})"


def write_tensor(f, t: Tensor) -> None:
    """Serialize one tensor to a binary file object."""
    code = _CODE_FOR[t.data.dtype]
    f.write(_MAGIC)
    f.write(struct.pack("<HB", _VERSION, code))
    f.write(struct.pack("<4Q", *t.shape))
    f.write(np.ascontiguousarray(t.data, dtype=t.data.dtype.newbyteorder("<")).tobytes())


def read_tensor(f) -> Tensor:
    """Read one tensor written by write_tensor; validates header and length."""
    magic = f.read(4)
    if magic != _MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}, expected {_MAGIC!r}")
    version, code = struct.unpack("<HB", f.read(3))
    if version != _VERSION:
        raise ValueError(f"unsupported tensor format version {version}")
    if code not in _DTYPE_CODES:
        raise ValueError(f"unknown dtype code {code}")
    dt = np.dtype(_DTYPE_CODES[code]).newbyteorder("<")
    shape = struct.unpack("<4Q", f.read(32))
    count = 1
    for s in shape:
        count *= s
    raw = f.read(count * dt.itemsize)
    if len(raw) != count * dt.itemsize:
        raise ValueError(f"truncated tensor payload: wanted {count * dt.itemsize} bytes, got {len(raw)}")
    arr = np.frombuffer(raw, dtype=dt).reshape(shape)
    return Tensor(arr.astype(_DTYPE_CODES[code]), dtype=_DTYPE_CODES[code])


def save_tensor(path, t: Tensor) -> None:
    with open(path, "wb") as f:
        write_tensor(f, t)


def load_tensor(path) -> Tensor:
    with open(path, "rb") as f:
        return read_tensor(f)
