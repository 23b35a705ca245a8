"""Fully reversible multilevel network: leapfrog propagation, exact reverse
state reconstruction, and recompute-as-you-go gradients.

Propagation follows the conservative three-level scheme

    y_next = 2 W(y_curr) - W(y_prev) - h^2 * B^T f(B W(y_curr) + bias)

where W is the layer's resolution change (identity, coarsen, or refine) and
B the layer's kernel stack. The two carried states always live on the same
grid, so a resolution change transforms both; with W orthonormal the step is
exactly invertible:

    y_prev = W^-1( 2 W(y_curr) - y_next - h^2 * B^T f(B W(y_curr) + bias) )

The backward sweep reconstructs each state from the two later ones just in
time, recomputes the activation mask there, and accumulates parameter
gradients, holding a depth-independent handful of state tensors.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .convops import KernelStack, apply_block, apply_block_t
from .haar import ResolutionChange
from .layer import RELU, Activation, layer_vjp
from .tensor import Shape, Tensor5D


@dataclass(frozen=True)
class LayerSpec:
    """Block shape of one layer's stack plus its resolution change.

    n must equal the channel count arriving after the resolution change;
    flat stacks (m < n) are the expected case.
    """

    m: int
    n: int
    resolution: ResolutionChange = ResolutionChange.IDENTITY

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise ValueError(f"block shape must be positive, got {self.m}x{self.n}")


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layer descriptions, the time step, and the input shape."""

    layers: tuple[LayerSpec, ...]
    h: float
    input_shape: Shape

    def __post_init__(self):
        if self.h <= 0:
            raise ValueError(f"time step must be positive, got {self.h}")
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", Shape(*self.input_shape).validate())
        self.grid_shapes()  # validates channel/divisibility bookkeeping

    def grid_shapes(self) -> list[Shape]:
        """Shape of the state after each layer's resolution change; entry 0
        is the input shape, entry i+1 the grid layer i operates on."""
        shapes = [self.input_shape]
        s = self.input_shape
        for i, layer in enumerate(self.layers):
            try:
                s = layer.resolution.apply_to_shape(s)
            except ValueError as e:
                raise ValueError(f"layer {i}: {e}") from e
            if layer.n != s.nchan:
                raise ValueError(
                    f"layer {i}: stack has n={layer.n} block columns but the state "
                    f"carries {s.nchan} channels at this level"
                )
            shapes.append(s)
        return shapes

    @property
    def output_shape(self) -> Shape:
        return self.grid_shapes()[-1]

    @property
    def depth(self) -> int:
        return len(self.layers)


def init_params(spec: NetworkSpec, rng: np.random.Generator) -> list[KernelStack]:
    """Per-layer stacks with the default Gaussian scale 1/sqrt(27*n)."""
    return [KernelStack.random(layer.m, layer.n, rng) for layer in spec.layers]


def check_params(spec: NetworkSpec, params: Sequence[KernelStack]) -> None:
    if len(params) != spec.depth:
        raise ValueError(f"expected {spec.depth} kernel stacks, got {len(params)}")
    for i, (layer, ks) in enumerate(zip(spec.layers, params)):
        if (ks.m, ks.n) != (layer.m, layer.n):
            raise ValueError(f"layer {i}: stack is {ks.m}x{ks.n}, spec says {layer.m}x{layer.n}")


# ---------------------------------------------------------------------------
# State accounting


@dataclass
class StateLedger:
    """Counter of state tensors held across engine operations.

    The engine acquires a slot when it stores a state tensor it must keep and
    releases it when the tensor is dropped; buffers internal to a single
    operation count as the workspace allowance, not as held states. The peak
    is the constant-memory figure: it must not grow with depth.
    """

    current: int = 0
    peak: int = 0

    def acquire(self, k: int = 1) -> None:
        self.current += k
        self.peak = max(self.peak, self.current)

    def release(self, k: int = 1) -> None:
        self.current -= k


_active_ledgers: list[StateLedger] = []


@contextmanager
def track_states():
    """Measure the peak number of concurrently held state tensors."""
    ledger = StateLedger()
    _active_ledgers.append(ledger)
    try:
        yield ledger
    finally:
        _active_ledgers.remove(ledger)


def _hold(k: int = 1) -> None:
    for led in _active_ledgers:
        led.acquire(k)


def _drop(k: int = 1) -> None:
    for led in _active_ledgers:
        led.release(k)


# ---------------------------------------------------------------------------
# Forward propagation


def _force(ks: KernelStack, f: Activation, u: Tensor5D, h: float) -> Tensor5D:
    """-h^2 * B^T f(B u + bias); the forcing term of one step."""
    z = apply_block(ks, u)
    a = f.value(z.data + ks.bias.astype(z.data.dtype).reshape(-1, 1, 1, 1))
    return Tensor5D((-h * h) * apply_block_t(ks, Tensor5D(a)).data)


def forward_step(
    layer: LayerSpec,
    ks: KernelStack,
    h: float,
    y_prev: Tensor5D,
    y_curr: Tensor5D,
    f: Activation = RELU,
) -> tuple[Tensor5D, Tensor5D]:
    """One leapfrog step. y_prev and y_curr must share a grid; both are
    moved through the layer's resolution change. Returns the new pair
    (W(y_curr), y_next), again on one grid."""
    if y_prev.dims != y_curr.dims:
        raise ValueError(f"carried states disagree: {tuple(y_prev.dims)} vs {tuple(y_curr.dims)}")
    u = layer.resolution.apply(y_curr)
    v = layer.resolution.apply(y_prev)
    force = _force(ks, f, u, h)
    y_next = Tensor5D(2.0 * u.data - v.data + force.data)
    return u, y_next


def forward(
    spec: NetworkSpec,
    params: Sequence[KernelStack],
    x: Tensor5D,
    f: Activation = RELU,
) -> tuple[Tensor5D, tuple[Tensor5D, Tensor5D]]:
    """Propagate through all layers keeping two time levels.

    The leapfrog needs two initial states; both are seeded with the input
    (zero initial velocity). Returns the final state and the final pair
    (second-to-last, last) that seeds reverse reconstruction.
    """
    if x.dims != spec.input_shape:
        raise ValueError(f"input shape {tuple(x.dims)} != spec input {tuple(spec.input_shape)}")
    check_params(spec, params)
    prev, curr = x, x
    _hold(2)
    for layer, ks in zip(spec.layers, params):
        prev, curr = forward_step(layer, ks, spec.h, prev, curr, f)
        _hold(1)  # the new state, before the superseded one is dropped
        _drop(1)
    _drop(2)
    return curr, (prev, curr)


def forward_with_history(
    spec: NetworkSpec,
    params: Sequence[KernelStack],
    x: Tensor5D,
    f: Activation = RELU,
) -> list[tuple[Tensor5D, Tensor5D]]:
    """Store-everything forward: the carried pair after every layer.

    Entry i is (W_i(y_i), y_(i+1)). This is the memory-hungry baseline that
    reverse reconstruction is checked against.
    """
    if x.dims != spec.input_shape:
        raise ValueError(f"input shape {tuple(x.dims)} != spec input {tuple(spec.input_shape)}")
    check_params(spec, params)
    pairs = []
    prev, curr = x, x
    for layer, ks in zip(spec.layers, params):
        prev, curr = forward_step(layer, ks, spec.h, prev, curr, f)
        pairs.append((prev, curr))
    return pairs


# ---------------------------------------------------------------------------
# Reverse reconstruction


def reverse_step(
    layer: LayerSpec,
    ks: KernelStack,
    h: float,
    u: Tensor5D,
    y_next: Tensor5D,
    f: Activation = RELU,
) -> tuple[Tensor5D, Tensor5D]:
    """Invert :func:`forward_step`: from the output pair (u, y_next) recover
    the input pair (y_prev, y_curr). Exact up to float round-off because the
    forcing term depends only on u and the resolution change is orthonormal."""
    force = _force(ks, f, u, h)
    v = Tensor5D(2.0 * u.data - y_next.data + force.data)
    y_curr = layer.resolution.invert(u)
    y_prev = layer.resolution.invert(v)
    return y_prev, y_curr


def reverse_reconstruct(
    spec: NetworkSpec,
    params: Sequence[KernelStack],
    pair: tuple[Tensor5D, Tensor5D],
    f: Activation = RELU,
) -> Iterable[tuple[int, Tensor5D, Tensor5D]]:
    """Walk the layers backwards from the final pair, yielding
    (layer_index, u, y_next) for every layer, where u = W(y_curr) is the
    post-resolution state the layer's stack acted on.

    After the generator is exhausted the initial pair has been recovered.
    """
    check_params(spec, params)
    prev, curr = pair
    for i in range(spec.depth - 1, -1, -1):
        u, y_next = prev, curr
        yield i, u, y_next
        prev, curr = reverse_step(spec.layers[i], params[i], spec.h, u, y_next, f)


def reconstruct_states(
    spec: NetworkSpec,
    params: Sequence[KernelStack],
    pair: tuple[Tensor5D, Tensor5D],
    f: Activation = RELU,
) -> list[tuple[Tensor5D, Tensor5D]]:
    """All carried pairs in forward order, rebuilt from the final pair only.
    Mirrors :func:`forward_with_history` for comparison."""
    out: list[tuple[Tensor5D, Tensor5D]] = []
    prev, curr = pair
    for i in range(spec.depth - 1, -1, -1):
        out.append((prev, curr))
        prev, curr = reverse_step(spec.layers[i], params[i], spec.h, prev, curr, f)
    out.reverse()
    return out


# ---------------------------------------------------------------------------
# Gradients


@dataclass
class NetworkGradients:
    """Per-layer stack gradients; aux carries whatever the loss closure
    produced (head gradients, predictions)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    aux: object = None


LossFn = Callable[[Tensor5D], tuple[float, Tensor5D, object]]
"""Differentiable loss on the trunk output: returns (loss, d loss / d output,
auxiliary payload)."""


def _step_vjp(
    layer: LayerSpec,
    ks: KernelStack,
    h: float,
    u: Tensor5D,
    g_u: Tensor5D,
    g_next: Tensor5D,
    f: Activation,
) -> tuple[Tensor5D, Tensor5D, np.ndarray, np.ndarray]:
    """Adjoint of one forward step.

    Given gradients (g_u, g_next) with respect to the step's output pair
    (u, y_next), return gradients with respect to the input pair plus this
    layer's parameter gradients. Uses only u, not the pre-step states.
    """
    h2 = h * h
    # y_next = 2u - v + force(u): pull the force's VJP back through u.
    g_force_in, g_w, g_b = layer_vjp(ks, f, u, g_next)
    g_w *= h2
    g_b *= h2
    g_u_total = Tensor5D(g_u.data + 2.0 * g_next.data + h2 * g_force_in.data)
    g_curr = layer.resolution.adjoint(g_u_total)
    g_prev = layer.resolution.adjoint(Tensor5D(-g_next.data))
    return g_prev, g_curr, g_w, g_b


def gradient(
    spec: NetworkSpec,
    params: Sequence[KernelStack],
    x: Tensor5D,
    loss_fn: LossFn,
    f: Activation = RELU,
) -> tuple[float, NetworkGradients]:
    """Loss and parameter gradients with recompute-as-you-go backprop.

    Runs the forward keeping only the final pair, then sweeps backwards:
    each earlier state is reconstructed via :func:`reverse_step` exactly when
    its layer's VJP needs it. At most four state tensors (current pair plus
    gradient pair) are held at any layer boundary, independent of depth.
    """
    _, pair = forward(spec, params, x, f)
    loss, g_out, aux = loss_fn(pair[1])

    grads_w: list[np.ndarray | None] = [None] * spec.depth
    grads_b: list[np.ndarray | None] = [None] * spec.depth

    u, y_next = pair
    g_u = Tensor5D(np.zeros_like(u.data))
    g_next = g_out
    _hold(4)
    for i in range(spec.depth - 1, -1, -1):
        layer, ks = spec.layers[i], params[i]
        g_u, g_next, grads_w[i], grads_b[i] = _step_vjp(layer, ks, spec.h, u, g_u, g_next, f)
        if i > 0:
            u, y_next = reverse_step(layer, ks, spec.h, u, y_next, f)
    _drop(4)
    # Both initial states equal the input, so input gradients from the two
    # slots would sum here if needed; parameter training does not use them.
    return loss, NetworkGradients(list(grads_w), list(grads_b), aux)


def gradient_stored(
    spec: NetworkSpec,
    params: Sequence[KernelStack],
    x: Tensor5D,
    loss_fn: LossFn,
    f: Activation = RELU,
) -> tuple[float, NetworkGradients]:
    """Baseline gradient that stores every forward state instead of
    reconstructing. Same step adjoints; memory grows with depth. Used to
    check that reconstruction does not perturb gradients."""
    pairs = forward_with_history(spec, params, x, f)
    loss, g_out, aux = loss_fn(pairs[-1][1])

    grads_w: list[np.ndarray | None] = [None] * spec.depth
    grads_b: list[np.ndarray | None] = [None] * spec.depth

    g_u = Tensor5D(np.zeros_like(pairs[-1][0].data))
    g_next = g_out
    for i in range(spec.depth - 1, -1, -1):
        u = pairs[i][0]
        g_u, g_next, grads_w[i], grads_b[i] = _step_vjp(
            spec.layers[i], params[i], spec.h, u, g_u, g_next, f
        )
    return loss, NetworkGradients(list(grads_w), list(grads_b), aux)


# ---------------------------------------------------------------------------
# Classification head


class LinearHead:
    """Trainable 1x1x1 linear map from state channels to class logits.

    Sits outside the reversible trunk (it needs no reconstruction) and is the
    only place channel count changes without a resolution change.
    """

    __slots__ = ("weights", "bias")

    def __init__(self, weights: np.ndarray, bias: np.ndarray):
        w = np.ascontiguousarray(weights, dtype=np.float64)
        b = np.ascontiguousarray(bias, dtype=np.float64)
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise ValueError(f"head weights (k, c) and bias (k,) required, got {w.shape}, {b.shape}")
        self.weights = w
        self.bias = b

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def n_channels(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def init(cls, n_classes: int, n_channels: int, rng: np.random.Generator) -> "LinearHead":
        w = rng.normal(0.0, n_channels**-0.5, size=(n_classes, n_channels))
        return cls(w, np.zeros(n_classes))

    def logits(self, state: Tensor5D) -> np.ndarray:
        """(n_classes, nx, ny, nz) logit volume."""
        if state.nchan != self.n_channels:
            raise ValueError(f"head expects {self.n_channels} channels, state has {state.nchan}")
        flat = state.data.reshape(state.nchan, -1)
        out = self.weights @ flat + self.bias[:, None]
        return out.reshape((self.n_classes,) + state.data.shape[1:])

    def vjp(self, state: Tensor5D, g_logits: np.ndarray) -> tuple[Tensor5D, np.ndarray, np.ndarray]:
        """Gradients w.r.t. (state, weights, bias) for upstream d loss/d logits."""
        k = self.n_classes
        g2 = g_logits.reshape(k, -1)
        flat = state.data.reshape(state.nchan, -1)
        g_state = (self.weights.T @ g2).reshape(state.data.shape)
        g_w = g2 @ flat.T
        g_b = g2.sum(axis=1)
        return Tensor5D(g_state), g_w, g_b


def softmax_channels(logits: np.ndarray) -> np.ndarray:
    """Softmax over axis 0 (the class axis), numerically stabilised."""
    shifted = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)
