"""Dense tensors, seeded random streams and the raw tensor file format.

A :class:`Tensor` wraps a read-only numpy array.  Every public op in
:mod:`mmprompt.ops` allocates a fresh output, so a tensor's buffer never
changes after construction.  Parameters rebind ``data`` on update instead of
writing into it.
"""
from __future__ import annotations

import hashlib
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEFAULT_DTYPE = np.float64
FLOAT_DTYPES = {"float64": np.float64, "float32": np.float32}
FILE_DTYPES = {"float64": "<f8", "float32": "<f4", "int64": "<i8"}


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


class Tensor:
    """Immutable row-major array, optionally tracked by an autograd tape."""

    __slots__ = ("data", "requires_grad", "tape", "node_id")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            src = np.asarray(data)
            dtype = src.dtype if src.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        arr = np.array(data, dtype=dtype, copy=True, order="C")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor constructed from non-finite values")
        self.data = _freeze(arr)
        self.requires_grad = requires_grad
        self.tape = None
        self.node_id = None

    @classmethod
    def wrap(cls, arr: np.ndarray) -> "Tensor":
        """Adopt a freshly allocated array without copying."""
        t = cls.__new__(cls)
        if not isinstance(arr, np.ndarray):
            arr = np.array(arr)
        elif not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        t.data = _freeze(arr)
        t.requires_grad = False
        t.tape = None
        t.node_id = None
        return t

    @property
    def shape(self) -> tuple:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar; the op suite lives in mmprompt.ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {where}")


def zeros(shape, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor.wrap(np.zeros(shape, dtype=dtype))


def ones(shape, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor.wrap(np.ones(shape, dtype=dtype))


@dataclass(frozen=True)
class RngState:
    """Root seed for a family of independent counter-based (Philox) streams.

    Streams are addressed by a path of names, e.g.
    ``RngState(7).generator("init", "encoder", "a")``.  The same seed and
    path always yield the same stream.
    """

    seed: int
    algorithm: str = "philox"

    def generator(self, *path) -> np.random.Generator:
        key = tuple(zlib.crc32(str(p).encode("utf-8")) for p in path)
        ss = np.random.SeedSequence(int(self.seed) & (2**64 - 1), spawn_key=key)
        return np.random.Generator(np.random.Philox(ss))


# ----------------------------------------------------------------------------
# raw tensor files: little-endian, row-major, no header

def write_tensor_file(path, arr: np.ndarray, dtype: str) -> dict:
    """Write ``arr`` and return its manifest reference ``{path, shape, dtype}``."""
    path = Path(path)
    raw = np.ascontiguousarray(arr, dtype=FILE_DTYPES[dtype])
    path.write_bytes(raw.tobytes(order="C"))
    return {"path": path.name, "shape": list(raw.shape), "dtype": dtype}


def expected_nbytes(shape, dtype: str) -> int:
    return int(np.prod(shape, dtype=np.int64)) * np.dtype(FILE_DTYPES[dtype]).itemsize


def read_tensor_file(path, shape, dtype: str) -> np.ndarray:
    """Read a raw tensor file; raises ValueError on a byte-length mismatch."""
    raw = Path(path).read_bytes()
    want = expected_nbytes(shape, dtype)
    if len(raw) != want:
        raise ValueError(f"{path}: {len(raw)} bytes, expected {want} for shape {list(shape)} {dtype}")
    arr = np.frombuffer(raw, dtype=FILE_DTYPES[dtype]).reshape(shape)
    native = {"float64": np.float64, "float32": np.float32, "int64": np.int64}[dtype]
    return arr.astype(native, copy=True)


def digest_arrays(named: list[tuple[str, np.ndarray]]) -> str:
    """sha256 over (name, shape, dtype, bytes) of each array, in the given order."""
    h = hashlib.sha256()
    for name, arr in named:
        h.update(name.encode("utf-8"))
        h.update(repr((arr.shape, arr.dtype.str)).encode("utf-8"))
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
