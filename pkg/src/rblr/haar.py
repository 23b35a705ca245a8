"""Invertible resolution changes: orthonormal 3-D Haar coarsening.

Coarsening halves each of the three volume axes and multiplies the channel
count by eight, keeping the total element count; because the basis is
orthonormal the map is exactly invertible (inverse == adjoint). Refinement
is the inverse map. Identity is available for layers that keep resolution.
"""

from __future__ import annotations

import enum

import numpy as np

from .tensor import Shape, Tensor5D

#: Subband order per input channel: the first letter is the x axis, then y,
#: then z; L = average, H = difference within each 2x2x2 block.
SUBBAND_ORDER = ("LLL", "HLL", "LHL", "LLH", "HHL", "HLH", "LHH", "HHH")


def _basis() -> np.ndarray:
    """(8, 2, 2, 2) orthonormal Haar basis; every entry is +-1/sqrt(8)."""
    lo = np.array([1.0, 1.0])
    hi = np.array([1.0, -1.0])
    rows = []
    for name in SUBBAND_ORDER:
        fx = hi if name[0] == "H" else lo
        fy = hi if name[1] == "H" else lo
        fz = hi if name[2] == "H" else lo
        rows.append(np.einsum("a,b,c->abc", fx, fy, fz))
    return np.stack(rows) / np.sqrt(8.0)


_HAAR = _basis()


def haar_forward(t: Tensor5D) -> Tensor5D:
    """Coarsen: (nx, ny, nz, c) -> (nx/2, ny/2, nz/2, 8c).

    Each input channel contributes eight consecutive output channels in
    :data:`SUBBAND_ORDER`; input channels are outermost, so output channel
    8*c + s is subband s of input channel c.
    """
    nx, ny, nz, c = t.dims
    if nx % 2 or ny % 2 or nz % 2:
        raise ValueError(f"all spatial dims must be even to coarsen, got {(nx, ny, nz)}")
    basis = _HAAR.astype(t.dtype)
    blocks = t.data.reshape(c, nx // 2, 2, ny // 2, 2, nz // 2, 2)
    out = np.einsum("sabc,qXaYbZc->qsXYZ", basis, blocks, optimize=True)
    return Tensor5D(out.reshape(8 * c, nx // 2, ny // 2, nz // 2))


def haar_inverse(t: Tensor5D) -> Tensor5D:
    """Refine: exact inverse of :func:`haar_forward`.

    Requires the channel count to be divisible by eight.
    """
    nx, ny, nz, c8 = t.dims
    if c8 % 8:
        raise ValueError(f"channel count must be divisible by 8 to refine, got {c8}")
    c = c8 // 8
    basis = _HAAR.astype(t.dtype)
    sub = t.data.reshape(c, 8, nx, ny, nz)
    blocks = np.einsum("sabc,qsXYZ->qXaYbZc", basis, sub, optimize=True)
    return Tensor5D(blocks.reshape(c, 2 * nx, 2 * ny, 2 * nz))


def channels_after_coarsening(base_channels: int, steps: int) -> int:
    """Channel count after repeatedly coarsening: grows by 8 per step."""
    return base_channels * 8**steps


class ResolutionChange(enum.Enum):
    """Per-layer resolution operator: keep, coarsen, or refine."""

    IDENTITY = "identity"
    HAAR_FORWARD = "haar_forward"
    HAAR_INVERSE = "haar_inverse"

    def apply(self, t: Tensor5D) -> Tensor5D:
        if self is ResolutionChange.IDENTITY:
            return t
        if self is ResolutionChange.HAAR_FORWARD:
            return haar_forward(t)
        return haar_inverse(t)

    def invert(self, t: Tensor5D) -> Tensor5D:
        if self is ResolutionChange.IDENTITY:
            return t
        if self is ResolutionChange.HAAR_FORWARD:
            return haar_inverse(t)
        return haar_forward(t)

    # The Haar basis is orthonormal, so the adjoint coincides with the
    # inverse; kept as a named alias because callers of the backward pass
    # mean "adjoint" even though they compute the same thing.
    adjoint = invert

    def apply_to_shape(self, s: Shape) -> Shape:
        s = Shape(*s)
        if self is ResolutionChange.IDENTITY:
            return s
        if self is ResolutionChange.HAAR_FORWARD:
            if s.nx % 2 or s.ny % 2 or s.nz % 2:
                raise ValueError(f"cannot coarsen odd dims {tuple(s)}")
            return Shape(s.nx // 2, s.ny // 2, s.nz // 2, 8 * s.nchan)
        if s.nchan % 8:
            raise ValueError(f"cannot refine {s.nchan} channels (not divisible by 8)")
        return Shape(2 * s.nx, 2 * s.ny, 2 * s.nz, s.nchan // 8)
