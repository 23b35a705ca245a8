"""Independent oracles the tests compare the library against.

Everything here is deliberately written the slow, obvious way — dense
matrices assembled index by index, straight-line loops — and shares no code
with the implementation under test.
"""

from __future__ import annotations

import numpy as np

from rblr import KernelStack, Shape, Tensor5D
from rblr.haar import ResolutionChange


def dense_conv_matrix(kernel: np.ndarray, vol_shape: tuple[int, int, int]) -> np.ndarray:
    """(vol, vol) matrix of the zero-padded stride-1 correlation with a
    3x3x3 stencil, built one entry at a time from the definition:
    out[p] = sum_{offsets d in [-1,1]^3} kernel[d+1] * x[p+d]."""
    nx, ny, nz = vol_shape
    vol = nx * ny * nz

    def flat(i, j, k):
        return (i * ny + j) * nz + k

    mat = np.zeros((vol, vol))
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                row = flat(i, j, k)
                for di in (-1, 0, 1):
                    for dj in (-1, 0, 1):
                        for dk in (-1, 0, 1):
                            si, sj, sk = i + di, j + dj, k + dk
                            if 0 <= si < nx and 0 <= sj < ny and 0 <= sk < nz:
                                mat[row, flat(si, sj, sk)] += kernel[di + 1, dj + 1, dk + 1]
    return mat


def dense_block_matrix(ks: KernelStack, vol_shape: tuple[int, int, int]) -> np.ndarray:
    """(m*vol, n*vol) dense version of the block convolution matrix."""
    vol = int(np.prod(vol_shape))
    mat = np.zeros((ks.m * vol, ks.n * vol))
    for i in range(ks.m):
        for j in range(ks.n):
            mat[i * vol:(i + 1) * vol, j * vol:(j + 1) * vol] = dense_conv_matrix(
                ks.weights[i, j], vol_shape
            )
    return mat


def flatten_tensor(t: Tensor5D) -> np.ndarray:
    """Concatenated per-channel sub-vectors (the block-vector as one array)."""
    return t.data.reshape(-1).copy()


def tensor_from_flat(flat: np.ndarray, dims: Shape) -> Tensor5D:
    d = Shape(*dims)
    return Tensor5D(np.asarray(flat, dtype=np.float64).reshape(d.nchan, d.nx, d.ny, d.nz))


def scipy_conv3d(kernel: np.ndarray, volume: np.ndarray) -> np.ndarray:
    """Third-party cross-check: zero-padded correlation via scipy.ndimage."""
    from scipy.ndimage import correlate

    return correlate(volume, kernel, mode="constant", cval=0.0)


def leapfrog_oracle(
    layer_specs,
    stacks,
    h: float,
    x: Tensor5D,
    activation=None,
) -> list[Tensor5D]:
    """Straight-line reimplementation of the forward propagation using dense
    matrices and explicit channel loops. Returns the state after every layer
    (y_1 .. y_depth on their respective grids).

    Written independently of the library's stepping code: the only shared
    pieces are the Haar transform (orthogonality is tested separately) and
    the data container.
    """
    from rblr import haar_forward, haar_inverse

    def resolve(t: Tensor5D, res: ResolutionChange) -> Tensor5D:
        if res is ResolutionChange.HAAR_FORWARD:
            return haar_forward(t)
        if res is ResolutionChange.HAAR_INVERSE:
            return haar_inverse(t)
        return t

    def relu(v):
        return np.maximum(v, 0.0)

    f = relu if activation is None else activation

    states = []
    y_prev, y_curr = x, x
    for spec, ks in zip(layer_specs, stacks):
        u = resolve(y_curr, spec.resolution)
        w_prev = resolve(y_prev, spec.resolution)
        vol_shape = u.data.shape[1:]
        vol = int(np.prod(vol_shape))
        kmat = dense_block_matrix(ks, vol_shape)
        z = kmat @ flatten_tensor(u)
        bias = np.repeat(ks.bias, vol)
        a = f(z + bias)
        force = kmat.T @ a
        y_next_flat = 2.0 * flatten_tensor(u) - flatten_tensor(w_prev) - h * h * force
        y_next = tensor_from_flat(y_next_flat, u.dims)
        states.append(y_next)
        y_prev, y_curr = u, y_next
    return states


def quadratic_loss(state: Tensor5D):
    """0.5 ||state||^2 with its exact gradient; aux is None."""
    return 0.5 * float(np.vdot(state.data, state.data)), state, None
