"""Built-in verification suite: the operator and engine invariants that must
hold for the mathematics to be trustworthy, each measured against a pinned
tolerance on deterministic toy problems.

``corrupt_adjoint`` injects a deliberate error into the adjoint under test so
the suite's failure path can itself be exercised (a verify command that can
never fail proves nothing).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .convops import KernelStack, apply_block, apply_block_t, conv3d, conv3d_adjoint, count_convolutions
from .haar import ResolutionChange, haar_forward, haar_inverse
from .layer import RELU, layer_apply, layer_quadratic_form, layer_vjp
from .network import (
    LayerSpec,
    NetworkSpec,
    forward_with_history,
    gradient,
    gradient_stored,
    init_params,
    reconstruct_states,
)
from .tensor import Shape, Tensor5D, inner, rel_error


@dataclass(frozen=True)
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error <= self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<28} error {self.error:.3e}  tolerance {self.tolerance:.0e}"


def _random_tensor(rng: np.random.Generator, dims: Shape) -> Tensor5D:
    d = Shape(*dims)
    return Tensor5D(rng.standard_normal((d.nchan, d.nx, d.ny, d.nz)))


def check_haar_roundtrip(rng: np.random.Generator) -> CheckResult:
    t = _random_tensor(rng, Shape(4, 4, 4, 6))
    back = haar_inverse(haar_forward(t))
    return CheckResult("haar_roundtrip", rel_error(back, t), 1e-13)


def check_haar_adjoint_is_inverse(rng: np.random.Generator) -> CheckResult:
    x = _random_tensor(rng, Shape(4, 4, 4, 2))
    y = _random_tensor(rng, Shape(2, 2, 2, 16))
    lhs = inner(haar_forward(x), y)
    rhs = inner(x, haar_inverse(y))
    err = abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300)
    return CheckResult("haar_adjoint_is_inverse", err, 1e-12)


def check_conv_adjoint(rng: np.random.Generator, corrupt: bool = False) -> CheckResult:
    kernel = rng.standard_normal((3, 3, 3))
    x = rng.standard_normal((4, 4, 4))
    y = rng.standard_normal((4, 4, 4))
    ky = conv3d_adjoint(kernel, y)
    if corrupt:
        ky = ky * (1.0 + 1e-3)  # fault injection: adjoint off by 0.1%
    lhs = float(np.vdot(conv3d(kernel, x), y))
    rhs = float(np.vdot(x, ky))
    err = abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300)
    return CheckResult("conv_adjoint", err, 1e-12)


def check_block_adjoint(rng: np.random.Generator) -> CheckResult:
    ks = KernelStack.random(2, 3, rng)
    x = _random_tensor(rng, Shape(4, 4, 2, 3))
    y = _random_tensor(rng, Shape(4, 4, 2, 2))
    lhs = inner(apply_block(ks, x), y)
    rhs = inner(x, apply_block_t(ks, y))
    err = abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300)
    return CheckResult("block_matrix_adjoint", err, 1e-12)


def check_psd(rng: np.random.Generator, trials: int = 100) -> CheckResult:
    worst = 0.0
    for _ in range(trials):
        ks = KernelStack.random(2, 3, rng)
        y = _random_tensor(rng, Shape(3, 3, 2, 3))
        q = layer_quadratic_form(ks, y)
        worst = max(worst, -q)
    return CheckResult("layer_quadratic_form_psd", worst, 1e-12)


def check_conv_count(rng: np.random.Generator) -> CheckResult:
    ks = KernelStack.random(2, 3, rng)
    y = _random_tensor(rng, Shape(4, 4, 2, 3))
    with count_convolutions() as counter:
        layer_apply(ks, RELU, y)
    expected = 2 * ks.m * ks.n
    return CheckResult("convolutions_per_layer_2mn", float(abs(counter.total - expected)), 0.0)


def _toy_spec() -> NetworkSpec:
    layers = (
        LayerSpec(2, 3),
        LayerSpec(3, 24, ResolutionChange.HAAR_FORWARD),
        LayerSpec(3, 24),
        LayerSpec(2, 3, ResolutionChange.HAAR_INVERSE),
        LayerSpec(2, 3),
        LayerSpec(2, 3),
    )
    return NetworkSpec(layers, 0.1, Shape(8, 8, 4, 3))


def check_reconstruction(rng: np.random.Generator) -> CheckResult:
    spec = _toy_spec()
    params = init_params(spec, rng)
    x = _random_tensor(rng, spec.input_shape)
    stored = forward_with_history(spec, params, x)
    rebuilt = reconstruct_states(spec, params, stored[-1])
    worst = 0.0
    for (su, sn), (ru, rn) in zip(stored, rebuilt):
        worst = max(worst, rel_error(ru, su), rel_error(rn, sn))
    return CheckResult("reverse_reconstruction", worst, 1e-10)


def _quadratic_loss(state: Tensor5D):
    loss = 0.5 * float(np.vdot(state.data, state.data))
    return loss, state, None


def network_fd_error(
    spec: NetworkSpec,
    params: list[KernelStack],
    x: Tensor5D,
    loss_fn=_quadratic_loss,
    eps: float = 1e-6,
    weight_indices: str | int = "all",
    rng: np.random.Generator | None = None,
) -> float:
    """Worst finite-difference mismatch over network parameters.

    Per layer, every parameter's central difference is compared against the
    analytic gradient and the largest absolute mismatch is normalized by the
    layer's gradient magnitude scale. Pointwise division would be
    ill-conditioned: entries with near-zero gradient sit at the finite
    difference's own cancellation noise (~eps_machine * loss / step), which
    says nothing about gradient correctness.
    """
    from .network import forward

    _, grads = gradient(spec, params, x, loss_fn)

    def loss_at(p) -> float:
        out, _ = forward(spec, p, x)
        return loss_fn(out)[0]

    worst = 0.0
    for li, ks in enumerate(params):
        if weight_indices == "all":
            flats = np.arange(ks.weights.size)
        else:
            flats = rng.choice(ks.weights.size, size=int(weight_indices), replace=False)
        diffs = []
        fds = []

        def probe(build_plus, build_minus, analytic):
            lp = list(params)
            lm = list(params)
            lp[li] = build_plus
            lm[li] = build_minus
            fd = (loss_at(lp) - loss_at(lm)) / (2 * eps)
            diffs.append(abs(analytic - fd))
            fds.append(abs(fd))

        for flat in flats:
            idx = np.unravel_index(int(flat), ks.weights.shape)
            wp = ks.weights.copy()
            wp[idx] += eps
            wm = ks.weights.copy()
            wm[idx] -= eps
            probe(KernelStack(wp, ks.bias), KernelStack(wm, ks.bias), grads.weights[li][idx])
        for bi in range(ks.m):
            bp = ks.bias.copy()
            bp[bi] += eps
            bm = ks.bias.copy()
            bm[bi] -= eps
            probe(ks.with_bias(bp), ks.with_bias(bm), grads.biases[li][bi])
        scale = max(max(fds), 1e-300)
        worst = max(worst, max(diffs) / scale)
    return worst


def check_gradient_fd(rng: np.random.Generator) -> CheckResult:
    spec = NetworkSpec((LayerSpec(2, 3), LayerSpec(2, 3), LayerSpec(2, 3)), 0.1,
                       Shape(4, 4, 2, 3))
    params = init_params(spec, rng)
    x = _random_tensor(rng, spec.input_shape)
    err = network_fd_error(spec, params, x)
    return CheckResult("gradient_finite_difference", err, 1e-6)


def check_gradient_recompute_vs_stored(rng: np.random.Generator) -> CheckResult:
    spec = _toy_spec()
    params = init_params(spec, rng)
    x = _random_tensor(rng, spec.input_shape)
    _, g_rec = gradient(spec, params, x, _quadratic_loss)
    _, g_sto = gradient_stored(spec, params, x, _quadratic_loss)
    worst = 0.0
    for a, b in zip(g_rec.weights, g_sto.weights):
        worst = max(worst, float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-300)))
    for a, b in zip(g_rec.biases, g_sto.biases):
        scale = max(float(np.abs(b).max()), 1e-300)
        worst = max(worst, float(np.abs(a - b).max()) / scale)
    return CheckResult("gradient_recompute_vs_stored", worst, 1e-12)


def check_layer_vjp_fd(rng: np.random.Generator) -> CheckResult:
    ks = KernelStack.random(2, 3, rng).with_bias(rng.standard_normal(2) * 0.1)
    y = _random_tensor(rng, Shape(4, 4, 2, 3))
    up = _random_tensor(rng, Shape(4, 4, 2, 3))
    _, g_w, g_b = layer_vjp(ks, RELU, y, up)
    eps = 1e-6
    diffs = []
    fds = []
    for flat in range(ks.weights.size):
        idx = np.unravel_index(flat, ks.weights.shape)
        wp = ks.weights.copy()
        wp[idx] += eps
        wm = ks.weights.copy()
        wm[idx] -= eps
        fp = inner(layer_apply(KernelStack(wp, ks.bias), RELU, y), up)
        fm = inner(layer_apply(KernelStack(wm, ks.bias), RELU, y), up)
        fd = (fp - fm) / (2 * eps)
        diffs.append(abs(g_w[idx] - fd))
        fds.append(abs(fd))
    for i in range(ks.m):
        bp = ks.bias.copy()
        bp[i] += eps
        bm = ks.bias.copy()
        bm[i] -= eps
        fp = inner(layer_apply(ks.with_bias(bp), RELU, y), up)
        fm = inner(layer_apply(ks.with_bias(bm), RELU, y), up)
        fd = (fp - fm) / (2 * eps)
        diffs.append(abs(g_b[i] - fd))
        fds.append(abs(fd))
    worst = max(diffs) / max(max(fds), 1e-300)
    return CheckResult("layer_vjp_finite_difference", worst, 1e-6)


def run_all(seed: int = 0, corrupt_adjoint: bool = False) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    return [
        check_haar_roundtrip(rng),
        check_haar_adjoint_is_inverse(rng),
        check_conv_adjoint(rng, corrupt=corrupt_adjoint),
        check_block_adjoint(rng),
        check_psd(rng),
        check_conv_count(rng),
        check_reconstruction(rng),
        check_layer_vjp_fd(rng),
        check_gradient_fd(rng),
        check_gradient_recompute_vs_stored(rng),
    ]


def format_results(results: list[CheckResult]) -> str:
    lines = [r.line() for r in results]
    failed = sum(not r.passed for r in results)
    lines.append(f"{len(results) - failed}/{len(results)} checks passed")
    return "\n".join(lines)
