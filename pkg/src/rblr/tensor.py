"""Dense 5-D state tensors with a zero-copy block-vector view.

A network state is a volume of shape (nx, ny, nz) with nchan channels.
Data is stored channel-major, so channel c is one contiguous sub-vector
and flattening the whole tensor concatenates the per-channel vectors.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np


class Shape(NamedTuple):
    nx: int
    ny: int
    nz: int
    nchan: int

    @property
    def volume(self) -> int:
        """Number of voxels in one channel."""
        return self.nx * self.ny * self.nz

    @property
    def size(self) -> int:
        return self.volume * self.nchan

    def validate(self) -> "Shape":
        if any(int(d) < 1 for d in self):
            raise ValueError(f"shape components must be >= 1, got {tuple(self)}")
        return Shape(*(int(d) for d in self))


class Tensor5D:
    """Immutable multichannel volume.

    The backing array has shape (nchan, nx, ny, nz) in C order, which is
    exactly the channel-major layout: ``data[c].ravel()`` is the sub-vector
    of channel c without copying.
    """

    __slots__ = ("data", "dims", "__weakref__")

    def __init__(self, data: np.ndarray, dims: Shape | None = None):
        arr = np.ascontiguousarray(data)
        if arr.ndim != 4:
            raise ValueError(f"expected 4 axes (nchan, nx, ny, nz), got {arr.ndim}")
        if arr.dtype not in (np.float64, np.float32):
            arr = arr.astype(np.float64)
        nchan, nx, ny, nz = arr.shape
        shape = Shape(nx, ny, nz, nchan).validate()
        if dims is not None and Shape(*dims) != shape:
            raise ValueError(f"dims {tuple(dims)} inconsistent with array shape {arr.shape}")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "dims", shape)

    def __setattr__(self, name, value):
        raise AttributeError("Tensor5D is immutable")

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def nchan(self) -> int:
        return self.dims.nchan

    @classmethod
    def from_array(cls, arr: np.ndarray, channels_last: bool = True) -> "Tensor5D":
        """Build from a conventional (nx, ny, nz, nchan) array (or channel-major
        (nchan, nx, ny, nz) when ``channels_last`` is False)."""
        arr = np.asarray(arr)
        if arr.ndim != 4:
            raise ValueError(f"expected a 4-axis array, got {arr.ndim} axes")
        if channels_last:
            arr = np.moveaxis(arr, -1, 0)
        return cls(arr)

    @classmethod
    def zeros(cls, dims: Shape, dtype=np.float64) -> "Tensor5D":
        d = Shape(*dims).validate()
        return cls(np.zeros((d.nchan, d.nx, d.ny, d.nz), dtype=dtype))

    def to_array(self, channels_last: bool = True) -> np.ndarray:
        """Copy out as (nx, ny, nz, nchan) (or channel-major if requested)."""
        if channels_last:
            return np.moveaxis(self.data, 0, -1).copy()
        return self.data.copy()

    def astype(self, dtype) -> "Tensor5D":
        if np.dtype(dtype) == self.dtype:
            return self
        return Tensor5D(self.data.astype(dtype))

    def __repr__(self) -> str:
        d = self.dims
        return f"Tensor5D({d.nx}x{d.ny}x{d.nz}x{d.nchan}, {self.dtype})"


def flatten_view(t: Tensor5D) -> list[np.ndarray]:
    """Per-channel sub-vectors of the block-vector view. Zero copy: each
    entry is a read-only view into the tensor's buffer."""
    return [t.data[c].ravel() for c in range(t.nchan)]


def block_vector(t: Tensor5D) -> np.ndarray:
    """(nchan, volume) view of the state; rows are the channel sub-vectors."""
    return t.data.reshape(t.nchan, -1)


def unflatten(blocks: list[np.ndarray], dims: Shape) -> Tensor5D:
    dims = Shape(*dims).validate()
    if len(blocks) != dims.nchan:
        raise ValueError(f"need {dims.nchan} sub-vectors, got {len(blocks)}")
    data = np.stack([np.asarray(b).reshape(dims.nx, dims.ny, dims.nz) for b in blocks])
    return Tensor5D(data)


def _check_same_dims(x: Tensor5D, y: Tensor5D) -> None:
    if x.dims != y.dims:
        raise ValueError(f"shape mismatch: {tuple(x.dims)} vs {tuple(y.dims)}")


def axpy(a: float, x: Tensor5D, y: Tensor5D) -> Tensor5D:
    """a*x + y, elementwise."""
    _check_same_dims(x, y)
    return Tensor5D(a * x.data + y.data)


def add(x: Tensor5D, y: Tensor5D) -> Tensor5D:
    _check_same_dims(x, y)
    return Tensor5D(x.data + y.data)


def scale(a: float, x: Tensor5D) -> Tensor5D:
    return Tensor5D(a * x.data)


def neg(x: Tensor5D) -> Tensor5D:
    return Tensor5D(-x.data)


def inner(x: Tensor5D, y: Tensor5D) -> float:
    """Euclidean inner product of the flattened states."""
    _check_same_dims(x, y)
    return float(np.dot(x.data.ravel(), y.data.ravel()))


def norm(x: Tensor5D) -> float:
    return float(np.linalg.norm(x.data.ravel()))


def rel_error(x: Tensor5D, y: Tensor5D) -> float:
    """Relative difference ||x - y|| / max(||y||, tiny)."""
    _check_same_dims(x, y)
    denom = max(norm(y), np.finfo(np.float64).tiny)
    return float(np.linalg.norm((x.data - y.data).ravel())) / denom
