"""The symmetric block-low-rank layer and its gradients.

The layer maps a state y to ``-B^T f(B y + bias)`` where B is the block
convolution operator of a :class:`~rblr.convops.KernelStack` and f is a
non-negative pointwise activation. Because the same stack appears on both
sides, the composite operator equals ``B^T D B`` for a diagonal 0/1 mask D,
which is symmetric positive-semidefinite and has block-rank at most m, the
number of block rows. Channel count is preserved for any m <= n, which is
what lets a flat (m < n) stack sit inside a reversible network.

The backward pass recomputes the activation mask from its input instead of
storing it, so no layer state needs to be kept between forward and backward.
"""

from __future__ import annotations

import numpy as np

from .convops import (
    KERNEL_SIZE,
    KernelStack,
    apply_block,
    apply_block_t,
    neighbor_columns,
    weight_gradient,
)
from .tensor import Tensor5D


class ReLU:
    """Pointwise max(0, x). The derivative mask is 1 where the input is
    strictly positive; the subgradient at exactly 0 is taken as 0, which
    makes recomputed masks bit-reproducible."""

    name = "relu"

    @staticmethod
    def value(z: np.ndarray) -> np.ndarray:
        return np.maximum(z, 0.0)

    @staticmethod
    def derivative_mask(z: np.ndarray) -> np.ndarray:
        return (z > 0.0).astype(z.dtype)


class IdentityActivation:
    """f(x) = x. Test mode only: it turns the layer into the pure quadratic
    operator -B^T B, which dense linear-algebra oracles can check directly.
    Not a training option."""

    name = "identity"

    @staticmethod
    def value(z: np.ndarray) -> np.ndarray:
        return z

    @staticmethod
    def derivative_mask(z: np.ndarray) -> np.ndarray:
        return np.ones_like(z)


Activation = ReLU | IdentityActivation

RELU = ReLU()
IDENTITY = IdentityActivation()


def _broadcast_bias(ks: KernelStack, like: np.ndarray) -> np.ndarray:
    return ks.bias.astype(like.dtype).reshape(-1, 1, 1, 1)


def layer_apply(ks: KernelStack, f: Activation, y: Tensor5D) -> Tensor5D:
    """-B^T f(B y + bias). Output channel count equals input channel count."""
    z = apply_block(ks, y)
    a = f.value(z.data + _broadcast_bias(ks, z.data))
    return Tensor5D(-apply_block_t(ks, Tensor5D(a)).data)


def layer_quadratic_form(ks: KernelStack, y: Tensor5D, f: Activation = RELU) -> float:
    """<y, B^T f(B y)> = <z, f(z)> with z = B y and zero bias.

    Non-negative for any pointwise f with x*f(x) >= 0 (ReLU in particular):
    the layer acts as a positive-semidefinite operator.
    """
    z = apply_block(ks, y).data
    return float(np.dot(z.ravel(), f.value(z).ravel()))


def layer_vjp(
    ks: KernelStack,
    f: Activation,
    y: Tensor5D,
    upstream: Tensor5D,
) -> tuple[Tensor5D, np.ndarray, np.ndarray]:
    """Vector-Jacobian products of :func:`layer_apply` at y.

    Returns (grad_y, grad_weights, grad_bias) for the scalar
    <upstream, layer_apply(ks, f, y)>. The activation mask is recomputed
    from y; nothing from the forward pass is required.
    """
    if y.nchan != ks.n:
        raise ValueError(f"channel mismatch: layer expects {ks.n} channels, state has {y.nchan}")
    if upstream.dims != y.dims:
        raise ValueError(f"shape mismatch: upstream {tuple(upstream.dims)} vs input {tuple(y.dims)}")

    cols_y = neighbor_columns(y.data)
    z = apply_block(ks, y, cols=cols_y).data + _broadcast_bias(ks, y.data)
    a = f.value(z)
    mask = f.derivative_mask(z)

    # out = -B^T a: differentiate through both appearances of the stack.
    cols_up = neighbor_columns(upstream.data)
    a_bar = -apply_block(ks, upstream, cols=cols_up).data
    z_bar = mask * a_bar

    grad_y = apply_block_t(ks, Tensor5D(z_bar))
    grad_w = weight_gradient(cols_y, z_bar) - weight_gradient(cols_up, a)
    grad_b = z_bar.reshape(ks.m, -1).sum(axis=1)
    return grad_y, grad_w, grad_b
