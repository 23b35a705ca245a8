"""Acceptance gate: the nine shipping criteria, one test per criterion.

Each test measures its criterion at the pinned tolerance, records a one-line
PASS/FAIL verdict (printed in the terminal summary by conftest), and then
asserts. Criterion 7 trains real models and dominates the runtime (~2 min);
everything else completes in seconds.
"""

from __future__ import annotations

from time import perf_counter

import numpy as np

from rblr import (
    IDENTITY,
    RELU,
    KernelStack,
    LayerSpec,
    NetworkSpec,
    RankEvent,
    ResolutionChange,
    Shape,
    Tensor5D,
    TrainConfig,
    apply_block,
    build_multilevel_spec,
    channels_after_coarsening,
    count_convolutions,
    forward,
    forward_with_history,
    gradient,
    gradient_stored,
    haar_forward,
    haar_inverse,
    init_params,
    layer_apply,
    layer_quadratic_form,
    make_synthetic_task,
    mean_iou,
    reconstruct_states,
    reference_network,
    rel_error,
    report,
    train,
    track_states,
)
from rblr.cli import main as cli_main
from rblr.selfcheck import network_fd_error
from oracles import dense_block_matrix, flatten_tensor, quadratic_loss

RESULTS: dict[int, tuple[str, bool, str]] = {}

IDENT = ResolutionChange.IDENTITY
HAAR = ResolutionChange.HAAR_FORWARD
HAARI = ResolutionChange.HAAR_INVERSE


def _record(n: int, title: str, ok: bool, detail: str) -> None:
    RESULTS[n] = (title, ok, detail)
    assert ok, f"criterion {n} ({title}): {detail}"


def format_result_lines() -> list[str]:
    lines = []
    for n in sorted(RESULTS):
        title, ok, detail = RESULTS[n]
        lines.append(f"{'PASS' if ok else 'FAIL'}  criterion {n}: {title} — {detail}")
    return lines


def _rand(rng, dims: Shape) -> Tensor5D:
    return Tensor5D(rng.standard_normal((dims.nchan, dims.nx, dims.ny, dims.nz)))


def test_criterion_1_memory_table_reproduction():
    t0 = perf_counter()
    expected = {4: (7, 528, 534), 8: (14, 528, 541), None: (4206, 528, 4734)}
    got = {rank: report(reference_network(rank)).rounded() for rank in expected}
    elapsed = perf_counter() - t0
    ok = got == expected and elapsed < 1.0
    _record(1, "memory table reproduction",
            ok, f"rounded MB {got[4]}/{got[8]}/{got[None]} vs {expected[4]}/{expected[8]}/"
                f"{expected[None]}, {elapsed * 1e3:.0f} ms < 1 s")


def test_criterion_2_channel_explosion_arithmetic():
    two, five = channels_after_coarsening(3, 2), channels_after_coarsening(3, 5)
    ok = two == 192 and five == 98304
    _record(2, "channel growth under coarsening",
            ok, f"3 channels -> {two} after 2 steps, {five} after 5 (expected 192, 98304)")


def test_criterion_3_exact_reversal_12_layers():
    t0 = perf_counter()
    layers = [
        LayerSpec(2, 3, IDENT), LayerSpec(2, 3, IDENT),
        LayerSpec(8, 24, HAAR), LayerSpec(8, 24, IDENT), LayerSpec(8, 24, IDENT),
        LayerSpec(16, 192, HAAR), LayerSpec(16, 192, IDENT),
        LayerSpec(8, 24, HAARI), LayerSpec(8, 24, IDENT), LayerSpec(8, 24, IDENT),
        LayerSpec(2, 3, HAARI), LayerSpec(2, 3, IDENT),
    ]
    spec = NetworkSpec(tuple(layers), 0.1, Shape(16, 16, 8, 3))
    assert all(l.m < l.n for l in spec.layers)
    params = init_params(spec, np.random.default_rng(13))
    x = _rand(np.random.default_rng(12), spec.input_shape)
    stored = forward_with_history(spec, params, x)
    _, finals = forward(spec, params, x)
    rebuilt = reconstruct_states(spec, params, finals)
    err = max(max(rel_error(gp, wp), rel_error(gc, wc))
              for (gp, gc), (wp, wc) in zip(rebuilt, stored))
    elapsed = perf_counter() - t0
    ok = len(rebuilt) == len(stored) == 12 and err <= 1e-10 and elapsed < 30.0
    _record(3, "exact state reconstruction (12 layers, m < n, 2 coarsenings)",
            ok, f"max relative error {err:.2e} <= 1e-10, {elapsed:.1f} s < 30 s")


def test_criterion_4_gradient_correctness():
    t0 = perf_counter()
    spec = NetworkSpec(
        (LayerSpec(2, 3, IDENT), LayerSpec(2, 3, IDENT), LayerSpec(3, 3, IDENT)),
        0.1, Shape(4, 4, 2, 3))
    params = init_params(spec, np.random.default_rng(16))
    x = _rand(np.random.default_rng(17), spec.input_shape)
    fd_err = network_fd_error(spec, params, x, quadratic_loss)

    l1, g1 = gradient(spec, params, x, quadratic_loss)
    l2, g2 = gradient_stored(spec, params, x, quadratic_loss)
    stored_err = abs(l1 - l2) / max(abs(l2), 1.0)
    for a, b in zip(g1.weights + g1.biases, g2.weights + g2.biases):
        stored_err = max(stored_err, np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1.0))
    elapsed = perf_counter() - t0
    ok = fd_err <= 1e-6 and stored_err <= 1e-12 and elapsed < 120.0
    _record(4, "gradient vs finite differences and stored baseline",
            ok, f"FD error {fd_err:.2e} <= 1e-6, stored-baseline error {stored_err:.2e} "
                f"<= 1e-12, {elapsed:.1f} s < 2 min")


def test_criterion_5_operator_properties():
    rng = np.random.default_rng(5)

    t = Tensor5D(rng.standard_normal((3, 8, 8, 8)))
    haar_err = rel_error(haar_inverse(haar_forward(t)), t)

    u = Tensor5D(rng.standard_normal((24, 4, 4, 4)))
    coarse_adjoint_err = rel_error(haar_forward(haar_inverse(u)), u)

    ks = KernelStack.random(3, 4, np.random.default_rng(6))
    dims = Shape(5, 5, 5, 4)
    y = _rand(rng, dims)
    mat = dense_block_matrix(ks, (dims.nx, dims.ny, dims.nz))
    dense_err = float(np.max(np.abs(flatten_tensor(apply_block(ks, y)) - mat @ flatten_tensor(y))))
    dense_err /= max(float(np.max(np.abs(mat @ flatten_tensor(y)))), 1.0)

    z = Tensor5D(rng.standard_normal((3, 5, 5, 5)))
    lhs = float(np.vdot(apply_block(ks, y).data, z.data))
    rhs = float(flatten_tensor(y) @ (mat.T @ flatten_tensor(z)))
    conv_adjoint_err = abs(lhs - rhs) / max(abs(rhs), 1.0)

    worst_quad = min(
        layer_quadratic_form(KernelStack.random(2, 3, np.random.default_rng(1000 + k)),
                             _rand(np.random.default_rng(2000 + k), Shape(4, 4, 2, 3)), RELU)
        for k in range(100)
    )

    vol = dims.nx * dims.ny * dims.nz
    d = np.repeat(rng.random(ks.m * vol) < 0.5, 1).astype(float)
    gram = mat.T @ (d[:, None] * mat)
    svals = np.linalg.svd(gram, compute_uv=False)
    trailing = float(svals[ks.m * vol:].max()) if svals.size > ks.m * vol else 0.0

    ok = (haar_err <= 1e-13 and coarse_adjoint_err <= 1e-12 and conv_adjoint_err <= 1e-12
          and dense_err <= 1e-12 and worst_quad >= -1e-12 and trailing <= 1e-10)
    _record(5, "operator properties",
            ok, f"coarsen roundtrip {haar_err:.1e}<=1e-13, adjoint=inverse "
                f"{coarse_adjoint_err:.1e}<=1e-12, conv adjoint {conv_adjoint_err:.1e}<=1e-12, "
                f"dense oracle {dense_err:.1e}<=1e-12, min quadratic form {worst_quad:.1e}>=-1e-12, "
                f"trailing singular value {trailing:.1e}<=1e-10")


def test_criterion_6_convolution_count():
    rng = np.random.default_rng(7)
    counts = {}
    for m, n in ((2, 3), (4, 6), (3, 3)):
        ks = KernelStack.random(m, n, rng)
        y = Tensor5D(rng.standard_normal((n, 4, 4, 2)))
        with count_convolutions() as c:
            layer_apply(ks, RELU, y)
        counts[(m, n)] = (c.forward, c.adjoint, c.total)
    ok = all(v == (m * n, m * n, 2 * m * n) for (m, n), v in counts.items())
    _record(6, "2mn convolutions per layer",
            ok, ", ".join(f"m={m} n={n}: {v[2]} == {2 * m * n}" for (m, n), v in counts.items()))


def _full_volume_iou(result, task) -> float:
    state, _ = forward(result.spec, result.stacks, task.video)
    pred = result.head.logits(state).argmax(axis=0)
    return mean_iou(pred, task.labels, np.ones_like(task.mask), task.n_classes)


def test_criterion_7_synthetic_training():
    t0 = perf_counter()
    task = make_synthetic_task((32, 32, 16), 1234, coarsenings=2)
    shape = Shape(32, 32, 16, 3)

    fixed_spec = build_multilevel_spec(shape, depth=12, coarsenings=2, block_rank=8)
    fixed = train(fixed_spec, TrainConfig(optimizer="momentum", lr=0.3, iterations=120, seed=0),
                  task)
    fixed_iou = _full_volume_iou(fixed, task)

    adaptive_spec = build_multilevel_spec(shape, depth=12, coarsenings=2, block_rank=8)
    adaptive = train(adaptive_spec,
                     TrainConfig(optimizer="momentum", lr=0.3, iterations=120, seed=0,
                                 initial_rank=4,
                                 rank_schedule=(RankEvent(new_m=8, at_iteration=60),)),
                     task)
    adaptive_iou = _full_volume_iou(adaptive, task)

    base_spec = build_multilevel_spec(shape, depth=12, coarsenings=2, block_rank=4)
    base = train(base_spec, TrainConfig(optimizer="momentum", lr=0.3, iterations=4, seed=3), task)
    grown_spec = build_multilevel_spec(shape, depth=12, coarsenings=2, block_rank=4)
    grown = train(grown_spec,
                  TrainConfig(optimizer="momentum", lr=0.3, iterations=4, seed=3, init_scale=0.0,
                              rank_schedule=(RankEvent(new_m=8, at_iteration=3),)),
                  task)
    switch_delta = abs(base.metrics[3].loss - grown.metrics[3].loss)

    elapsed = perf_counter() - t0
    ok = (fixed_iou >= 0.90 and adaptive_iou >= fixed_iou - 0.02
          and switch_delta <= 1e-10 and elapsed < 600.0)
    _record(7, "synthetic segmentation training",
            ok, f"fixed-rank IoU {fixed_iou:.4f} >= 0.90, adaptive IoU {adaptive_iou:.4f} "
                f"within 0.02, zero-init switch loss delta {switch_delta:.1e} <= 1e-10, "
                f"{elapsed:.0f} s < 10 min")


def test_criterion_8_constant_memory_in_depth():
    peaks = {}
    for depth in (10, 20, 30):
        spec = NetworkSpec(tuple(LayerSpec(2, 3, IDENT) for _ in range(depth)),
                           0.1, Shape(4, 4, 2, 3))
        params = init_params(spec, np.random.default_rng(200 + depth))
        x = _rand(np.random.default_rng(100 + depth), spec.input_shape)
        with track_states() as ledger:
            gradient(spec, params, x, quadratic_loss)
        peaks[depth] = ledger.peak
    ok = all(p <= 4 for p in peaks.values()) and len(set(peaks.values())) == 1
    _record(8, "constant live-state count during gradient",
            ok, f"peaks {peaks} (<= 4, identical at depths 10/20/30)")


def test_criterion_9_train_determinism(tmp_path):
    cfg_text = (
        "seed: 7\nout: {out}\n"
        "network: {{depth: 4, coarsenings: 1, block_rank: 4, h: 0.1}}\n"
        "train: {{optimizer: momentum, lr: 0.3, iterations: 20}}\n"
        "data: {{kind: synthetic, dims: [8, 8, 8], seed: 42}}\n"
    )
    for run in ("a", "b"):
        path = tmp_path / f"{run}.yaml"
        path.write_text(cfg_text.format(out=tmp_path / run))
        assert cli_main(["train", "--config", str(path)]) == 0
    bytes_a = (tmp_path / "a" / "metrics.csv").read_bytes()
    bytes_b = (tmp_path / "b" / "metrics.csv").read_bytes()
    ok = bytes_a == bytes_b and len(bytes_a) > 0
    _record(9, "bit-identical training metrics for identical config and seed",
            ok, f"two runs, {len(bytes_a)} bytes each, byte-for-byte equal: {bytes_a == bytes_b}")
