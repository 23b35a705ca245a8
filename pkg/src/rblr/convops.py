"""3-D convolution, its adjoint, and block convolution operators.

A layer's kernels form an m x n grid of 3x3x3 stencils, one per
(output channel, input channel) pair. ``apply_block`` applies the whole
grid as a single linear operator on a multichannel state; ``apply_block_t``
applies its exact adjoint. Convolution here means cross-correlation with
zero padding of one voxel per face and stride 1, so spatial dims are
preserved and the operator is strictly linear (bias is added by the layer,
not here).

Internally the operators are evaluated by gathering the 27 neighbor shifts
of every voxel once per input and contracting with a single matrix product,
which is equivalent to running all m*n stencils independently.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor5D

KERNEL_SIZE = 27  # 3*3*3 taps per stencil


@dataclass
class ConvCounter:
    """Tally of logical stencil applications (one per kernel per operator
    call), split into forward and transposed convolutions."""

    forward: int = 0
    adjoint: int = 0

    @property
    def total(self) -> int:
        return self.forward + self.adjoint


_active_counters: list[ConvCounter] = []


@contextmanager
def count_convolutions():
    """Collect convolution counts for all block operators run in the body.

    >>> with count_convolutions() as c:
    ...     apply_block(ks, y)
    >>> c.forward == ks.m * ks.n
    """
    counter = ConvCounter()
    _active_counters.append(counter)
    try:
        yield counter
    finally:
        _active_counters.remove(counter)


def _tally(forward: int = 0, adjoint: int = 0) -> None:
    for c in _active_counters:
        c.forward += forward
        c.adjoint += adjoint


def as_kernel(weights: np.ndarray) -> np.ndarray:
    """Validate a single 3x3x3 stencil (27 weights)."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (3, 3, 3):
        if w.size == KERNEL_SIZE:
            w = w.reshape(3, 3, 3)
        else:
            raise ValueError(f"kernel must have 27 weights, got shape {w.shape}")
    return w


def delta_kernel(dtype=np.float64) -> np.ndarray:
    """Stencil whose application is the identity map."""
    w = np.zeros((3, 3, 3), dtype=dtype)
    w[1, 1, 1] = 1.0
    return w


class KernelStack:
    """m x n grid of 3x3x3 stencils plus one bias scalar per output channel.

    m is the number of block rows (output channels of the inner product with
    the state), n the number of block columns (input channels). The kernel
    count is exactly m*n.
    """

    __slots__ = ("weights", "bias")

    def __init__(self, weights: np.ndarray, bias: np.ndarray | None = None):
        w = np.ascontiguousarray(weights, dtype=np.float64)
        if w.ndim != 5 or w.shape[2:] != (3, 3, 3):
            raise ValueError(f"weights must have shape (m, n, 3, 3, 3), got {w.shape}")
        m, n = w.shape[:2]
        if m < 1 or n < 1:
            raise ValueError("kernel grid must be fully populated (m, n >= 1)")
        b = np.zeros(m) if bias is None else np.ascontiguousarray(bias, dtype=np.float64)
        if b.shape != (m,):
            raise ValueError(f"bias must have shape ({m},), got {b.shape}")
        w.flags.writeable = False
        b.flags.writeable = False
        self.weights = w
        self.bias = b

    @property
    def m(self) -> int:
        return self.weights.shape[0]

    @property
    def n(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_count(self) -> int:
        return self.m * self.n

    @classmethod
    def zeros(cls, m: int, n: int) -> "KernelStack":
        return cls(np.zeros((m, n, 3, 3, 3)))

    @classmethod
    def random(cls, m: int, n: int, rng: np.random.Generator, sigma: float | None = None) -> "KernelStack":
        """Gaussian init; default scale 1/sqrt(27*n) keeps the operator norm
        of the block matrix O(1) regardless of width."""
        if sigma is None:
            sigma = (KERNEL_SIZE * n) ** -0.5
        return cls(rng.normal(0.0, sigma, size=(m, n, 3, 3, 3)))

    def with_bias(self, bias: np.ndarray) -> "KernelStack":
        return KernelStack(self.weights, bias)

    def __repr__(self) -> str:
        return f"KernelStack(m={self.m}, n={self.n})"


def neighbor_columns(channels: np.ndarray) -> np.ndarray:
    """Gather the 27 zero-padded neighbor shifts of every voxel.

    channels: (nc, nx, ny, nz) -> (nc, 27, nx*ny*nz), where column k holds
    the neighbor at offset (k // 9 - 1, k // 3 % 3 - 1, k % 3 - 1).
    """
    nc, nx, ny, nz = channels.shape
    padded = np.zeros((nc, nx + 2, ny + 2, nz + 2), dtype=channels.dtype)
    padded[:, 1:-1, 1:-1, 1:-1] = channels
    win = np.lib.stride_tricks.sliding_window_view(padded, (3, 3, 3), axis=(1, 2, 3))
    # win: (nc, nx, ny, nz, 3, 3, 3) -> (nc, 27, vol); the reshape copies.
    return win.reshape(nc, nx * ny * nz, KERNEL_SIZE).transpose(0, 2, 1).copy()


def _contract(weights_2d: np.ndarray, cols: np.ndarray, out_shape: tuple[int, ...]) -> np.ndarray:
    """(m, nc*27) @ (nc*27, vol) -> (m, *spatial)."""
    nc, _, vol = cols.shape
    out = weights_2d @ cols.reshape(nc * KERNEL_SIZE, vol)
    return out.reshape(out_shape)


def conv3d(kernel: np.ndarray, volume: np.ndarray) -> np.ndarray:
    """Correlate one single-channel volume with a 3x3x3 stencil (zero
    padding, stride 1; output dims equal input dims)."""
    w = as_kernel(kernel)
    x = np.asarray(volume)
    if x.ndim != 3:
        raise ValueError(f"expected a single-channel volume, got {x.ndim} axes")
    cols = neighbor_columns(x[None])
    _tally(forward=1)
    return _contract(w.reshape(1, KERNEL_SIZE), cols, x.shape)


def flip_kernel(kernel: np.ndarray) -> np.ndarray:
    """Reverse the stencil along every axis; correlating with the flipped
    stencil is the adjoint of correlating with the original."""
    return as_kernel(kernel)[::-1, ::-1, ::-1].copy()


def conv3d_adjoint(kernel: np.ndarray, volume: np.ndarray) -> np.ndarray:
    """Exact adjoint of :func:`conv3d` under the Euclidean inner product."""
    w = as_kernel(kernel)
    x = np.asarray(volume)
    if x.ndim != 3:
        raise ValueError(f"expected a single-channel volume, got {x.ndim} axes")
    cols = neighbor_columns(x[None])
    _tally(adjoint=1)
    return _contract(w[::-1, ::-1, ::-1].reshape(1, KERNEL_SIZE), cols, x.shape)


def _check_nchan(t: Tensor5D, expected: int, role: str) -> None:
    if t.nchan != expected:
        raise ValueError(f"channel mismatch: {role} expects {expected} channels, state has {t.nchan}")


def apply_block(ks: KernelStack, y: Tensor5D, cols: np.ndarray | None = None) -> Tensor5D:
    """Apply the block convolution matrix: out channel i is the sum over
    input channels j of the (i, j) stencil applied to channel j.

    ``cols`` lets callers reuse a precomputed :func:`neighbor_columns`
    gather of ``y`` across several operators on the same state.
    """
    _check_nchan(y, ks.n, "block operator")
    if cols is None:
        cols = neighbor_columns(y.data)
    w2d = ks.weights.reshape(ks.m, ks.n * KERNEL_SIZE)
    _tally(forward=ks.kernel_count)
    out = _contract(w2d, cols, (ks.m,) + y.data.shape[1:])
    return Tensor5D(out)


def apply_block_t(ks: KernelStack, y: Tensor5D, cols: np.ndarray | None = None) -> Tensor5D:
    """Apply the transpose of the block convolution matrix: out channel j is
    the sum over i of the adjoint of the (i, j) stencil applied to channel i."""
    _check_nchan(y, ks.m, "transposed block operator")
    if cols is None:
        cols = neighbor_columns(y.data)
    # Transposing the block matrix swaps (i, j) and replaces each stencil by
    # its adjoint, i.e. the all-axis flip = reversal of the flattened taps.
    wt = ks.weights.reshape(ks.m, ks.n, KERNEL_SIZE)[:, :, ::-1]
    w2d = wt.transpose(1, 0, 2).reshape(ks.n, ks.m * KERNEL_SIZE)
    _tally(adjoint=ks.kernel_count)
    out = _contract(w2d, cols, (ks.n,) + y.data.shape[1:])
    return Tensor5D(out)


def weight_gradient(cols_in: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Gradient of <upstream, apply_block(K, x)> with respect to the stencil
    weights, given the neighbor gather of x.

    cols_in: (n, 27, vol) from the operator input; upstream: (m, *spatial).
    Returns (m, n, 3, 3, 3).
    """
    n = cols_in.shape[0]
    m = upstream.shape[0]
    u = upstream.reshape(m, -1)
    g = u @ cols_in.reshape(n * KERNEL_SIZE, -1).T
    return g.reshape(m, n, 3, 3, 3)
