"""Trainer: loss masking, IoU, plateau/rank machinery, optimizer, loop."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rblr import (
    IDENTITY,
    RELU,
    KernelStack,
    LinearHead,
    Optimizer,
    RankEvent,
    SegmentationTask,
    Shape,
    Tensor5D,
    TrainConfig,
    TrainingDivergedError,
    build_multilevel_spec,
    decrease_rank,
    evaluate,
    increase_rank,
    init_params,
    layer_apply,
    layer_quadratic_form,
    make_synthetic_task,
    masked_cross_entropy,
    mean_iou,
    metrics_to_csv,
    plateau_detect,
    predict_labels,
    train,
)
from rblr.training import apply_rank_change


# -- mean IoU -----------------------------------------------------------------


def test_iou_perfect_prediction():
    labels = np.array([[0, 1], [1, 0]])[..., None]
    mask = np.ones_like(labels, dtype=bool)
    assert mean_iou(labels, labels, mask, 2) == 1.0


def test_iou_disjoint_masks():
    pred = np.array([1, 1, 0, 0]).reshape(2, 2, 1)
    label = np.array([0, 0, 1, 1]).reshape(2, 2, 1)
    mask = np.ones_like(label, dtype=bool)
    assert mean_iou(pred, label, mask, 2) == 0.0


def test_iou_half_covered_foreground():
    # Label has 2 fg voxels, prediction covers 1 with no false positives:
    # IoU_fg = 1/2, IoU_bg = 2/3, mean = 7/12.
    label = np.array([1, 1, 0, 0]).reshape(4, 1, 1)
    pred = np.array([1, 0, 0, 0]).reshape(4, 1, 1)
    mask = np.ones_like(label, dtype=bool)
    got = mean_iou(pred, label, mask, 2)
    assert abs(got - (0.5 + 2.0 / 3.0) / 2.0) < 1e-15


def test_iou_respects_mask():
    label = np.array([1, 1, 0, 0]).reshape(4, 1, 1)
    pred = np.array([1, 0, 1, 0]).reshape(4, 1, 1)
    mask = np.array([True, False, False, True]).reshape(4, 1, 1)
    # inside the mask pred == label exactly
    assert mean_iou(pred, label, mask, 2) == 1.0


def test_iou_empty_union_class_counts_as_one():
    label = np.zeros((2, 2, 1), dtype=int)
    pred = np.zeros((2, 2, 1), dtype=int)
    mask = np.ones_like(label, dtype=bool)
    assert mean_iou(pred, label, mask, 3) == 1.0  # classes 1,2 absent → 1 each


def test_iou_ignores_negative_labels_under_mask():
    label = np.array([1, -1, -1, 0]).reshape(4, 1, 1)
    pred = np.array([1, 0, 1, 0]).reshape(4, 1, 1)
    mask = label >= 0
    assert mean_iou(pred, label, mask, 2) == 1.0


# -- plateau detection ---------------------------------------------------------


def test_plateau_halving_loss_not_detected():
    losses = [1.0 * 0.5**k for k in range(12)]
    assert plateau_detect(losses, window=5, tol=0.01) is False


def test_plateau_constant_loss_detected():
    assert plateau_detect([0.7] * 12, window=5, tol=0.01) is True


def test_plateau_slow_decrease_detected():
    # 0.1% decrease per window with a 1% threshold counts as a plateau.
    losses = [1.0 * (1 - 0.001) ** k for k in range(30)]
    assert plateau_detect(losses, window=10, tol=0.01) is True


def test_plateau_insufficient_history_false():
    assert plateau_detect([1.0, 0.9], window=5, tol=0.01) is False
    assert plateau_detect([], window=5, tol=0.01) is False


def test_plateau_window_validation():
    with pytest.raises(ValueError):
        plateau_detect([1.0] * 10, window=1, tol=0.01)


# -- masked cross-entropy -------------------------------------------------------


def test_masked_cross_entropy_uniform_logits():
    logits = np.zeros((2, 2, 2, 1))
    labels = np.array([[0, 1], [1, 0]])[..., None]
    mask = np.ones_like(labels, dtype=bool)
    loss, grad = masked_cross_entropy(logits, labels, mask)
    assert abs(loss - np.log(2.0)) < 1e-12
    assert grad.shape == logits.shape


def test_masked_cross_entropy_ignores_unmasked_voxels():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((2, 4, 1, 1))
    labels = np.array([0, 1, -1, -1]).reshape(4, 1, 1)
    mask = labels >= 0
    loss, grad = masked_cross_entropy(logits, labels, mask)
    # corrupting the unmasked logits changes nothing
    logits2 = logits.copy()
    logits2[:, 2:] += 100.0
    loss2, grad2 = masked_cross_entropy(logits2, labels, mask)
    assert loss == loss2
    assert np.array_equal(grad[:, :2], grad2[:, :2])
    assert np.all(grad[:, 2:] == 0.0)


def test_masked_cross_entropy_gradient_fd():
    rng = np.random.default_rng(1)
    logits = rng.standard_normal((3, 2, 2, 2))
    labels = rng.integers(0, 3, size=(2, 2, 2))
    mask = rng.random((2, 2, 2)) > 0.3
    _, grad = masked_cross_entropy(logits, labels, mask)
    eps = 1e-6
    for idx in [(0, 0, 0, 0), (1, 1, 0, 1), (2, 0, 1, 0)]:
        up = logits.copy()
        up[idx] += eps
        dn = logits.copy()
        dn[idx] -= eps
        fd = (masked_cross_entropy(up, labels, mask)[0]
              - masked_cross_entropy(dn, labels, mask)[0]) / (2 * eps)
        assert abs(grad[idx] - fd) < 1e-8


def test_masked_cross_entropy_rejects_out_of_range_labels():
    logits = np.zeros((2, 2, 1, 1))
    labels = np.array([[5], [0]])[..., None]
    mask = np.ones_like(labels, dtype=bool)
    with pytest.raises(ValueError):
        masked_cross_entropy(logits, labels, mask)


# -- rank changes ----------------------------------------------------------------


def test_increase_rank_preserves_existing_rows_bit_exact():
    rng = np.random.default_rng(2)
    ks = KernelStack.random(4, 48, rng)
    grown = increase_rank(ks, 8, init_scale=0.05, rng=np.random.default_rng(3))
    assert grown.m == 8 and grown.n == 48
    assert grown.weights[:4].tobytes() == ks.weights.tobytes()
    assert grown.bias[:4].tobytes() == ks.bias.tobytes()
    assert np.all(grown.bias[4:] == 0.0)
    assert np.any(grown.weights[4:] != 0.0)


def test_increase_rank_requires_growth():
    ks = KernelStack.random(4, 8, np.random.default_rng(4))
    with pytest.raises(ValueError):
        increase_rank(ks, 4, init_scale=0.0, rng=np.random.default_rng(5))
    with pytest.raises(ValueError):
        increase_rank(ks, 3, init_scale=0.0, rng=np.random.default_rng(6))


def test_increase_rank_zero_init_layer_output_unchanged():
    rng = np.random.default_rng(7)
    ks = KernelStack.random(2, 3, np.random.default_rng(8))
    grown = increase_rank(ks, 5, init_scale=0.0, rng=np.random.default_rng(9))
    y = Tensor5D(rng.standard_normal((3, 4, 4, 2)))
    before = layer_apply(ks, RELU, y)
    after = layer_apply(grown, RELU, y)
    assert np.array_equal(before.data, after.data)


def test_decrease_rank_truncates():
    ks = KernelStack.random(8, 48, np.random.default_rng(10))
    assert ks.kernel_count == 384
    cut = decrease_rank(ks, 4)
    assert cut.kernel_count == 192
    assert cut.weights.tobytes() == ks.weights[:4].tobytes()
    with pytest.raises(ValueError):
        decrease_rank(ks, 0)
    with pytest.raises(ValueError):
        decrease_rank(ks, 8)


def test_decrease_then_increase_roundtrip_keeps_rows():
    ks = KernelStack.random(6, 8, np.random.default_rng(11))
    back = increase_rank(decrease_rank(ks, 3), 6, init_scale=0.0,
                         rng=np.random.default_rng(12))
    assert back.weights[:3].tobytes() == ks.weights[:3].tobytes()
    assert np.all(back.weights[3:] == 0.0)


def test_decrease_rank_preserves_psd():
    rng = np.random.default_rng(13)
    ks = KernelStack.random(6, 4, np.random.default_rng(14))
    cut = decrease_rank(ks, 2)
    for _ in range(20):
        y = Tensor5D(rng.standard_normal((4, 3, 2, 2)))
        assert layer_quadratic_form(cut, y) >= -1e-12


def test_rank_event_validation():
    RankEvent(new_m=8, at_iteration=10)
    RankEvent(new_m=8, on_plateau=True)
    with pytest.raises(ValueError):
        RankEvent(new_m=8)  # no trigger
    with pytest.raises(ValueError):
        RankEvent(new_m=8, at_iteration=10, on_plateau=True)  # both triggers


def test_apply_rank_change_respects_channel_caps():
    # Retargeting to rank 8 leaves narrow (n < 8) layers square.
    spec = build_multilevel_spec(Shape(8, 8, 8, 3), depth=7, coarsenings=1, block_rank=4)
    stacks = init_params(spec, np.random.default_rng(15))
    spec2, stacks2 = apply_rank_change(spec, stacks, 8, 0.0, np.random.default_rng(16))
    for layer, ks in zip(spec2.layers, stacks2):
        assert layer.m == min(8, layer.n)
        assert ks.m == layer.m


# -- optimizer -------------------------------------------------------------------


def test_optimizer_zero_lr_is_identity():
    rng = np.random.default_rng(17)
    arrays = [rng.standard_normal((3, 4)), rng.standard_normal(5)]
    grads = [rng.standard_normal((3, 4)), rng.standard_normal(5)]
    opt = Optimizer("sgd", lr=0.0)
    out = opt.step(arrays, grads)
    for a, b in zip(arrays, out):
        assert a.tobytes() == b.tobytes()


def test_optimizer_sgd_step():
    opt = Optimizer("sgd", lr=0.5)
    (out,) = opt.step([np.array([1.0, 2.0])], [np.array([2.0, -2.0])])
    assert out.tolist() == [0.0, 3.0]


def test_optimizer_momentum_accumulates():
    opt = Optimizer("momentum", lr=1.0, momentum=0.9)
    x = np.array([0.0])
    g = np.array([1.0])
    (x,) = opt.step([x], [g])
    assert x[0] == -1.0  # v = g
    (x,) = opt.step([x], [g])
    assert abs(x[0] - (-1.0 - 1.9)) < 1e-15  # v = 0.9·1 + 1 = 1.9


def test_optimizer_buffers_survive_rank_growth():
    # Moment buffers zero-pad along axis 0 when a parameter grows rows.
    opt = Optimizer("momentum", lr=1.0, momentum=0.5)
    w = np.zeros((2, 3))
    g = np.ones((2, 3))
    (w,) = opt.step([w], [g])
    big_w = np.vstack([w, np.zeros((1, 3))])
    big_g = np.ones((3, 3))
    (out,) = opt.step([big_w], [big_g])
    # old rows carry momentum 0.5·1+1 = 1.5; the new row has fresh momentum 1
    assert np.allclose(out[:2], w[:2] - 1.5)
    assert np.allclose(out[2], -1.0)


def test_optimizer_rejects_unknown_kind():
    with pytest.raises(ValueError):
        Optimizer("adagrad", lr=0.1)


# -- training loop ----------------------------------------------------------------


def _tiny_task_and_spec(seed=0):
    task = make_synthetic_task((8, 8, 8), seed=99, coarsenings=1)
    spec = build_multilevel_spec(Shape(8, 8, 8, 3), depth=4, coarsenings=1, block_rank=4)
    return task, spec


def test_train_zero_iterations_returns_initial_params():
    task, spec = _tiny_task_and_spec()
    cfg = TrainConfig(lr=0.1, iterations=0, seed=5)
    res = train(spec, cfg, task)
    fresh = init_params(spec, np.random.default_rng(5))
    for a, b in zip(res.stacks, fresh):
        assert a.weights.tobytes() == b.weights.tobytes()
    assert len(res.metrics) == 1  # the final evaluation row only
    assert res.metrics[0].iteration == 0


def test_train_reduces_loss():
    task, spec = _tiny_task_and_spec()
    cfg = TrainConfig(lr=0.2, iterations=12, seed=3)
    res = train(spec, cfg, task)
    assert res.metrics[-1].loss < res.metrics[0].loss


def test_train_metrics_rows_and_csv_shape():
    task, spec = _tiny_task_and_spec()
    cfg = TrainConfig(lr=0.1, iterations=3, seed=1)
    res = train(spec, cfg, task)
    assert [r.iteration for r in res.metrics] == [0, 1, 2, 3]
    csv_text = metrics_to_csv(res.metrics)
    lines = csv_text.splitlines()
    assert lines[0] == "iter,loss,mean_iou,current_m,wall_time_s"
    assert len(lines) == 5
    # wall time stays zero unless timing was requested (determinism)
    assert all(line.endswith(",0.0") for line in lines[1:])


def test_train_is_deterministic():
    task, spec = _tiny_task_and_spec()
    cfg = TrainConfig(lr=0.1, iterations=4, seed=7)
    a = train(spec, cfg, task)
    b = train(spec, cfg, task)
    assert metrics_to_csv(a.metrics) == metrics_to_csv(b.metrics)
    for x, y in zip(a.stacks, b.stacks):
        assert x.weights.tobytes() == y.weights.tobytes()


def test_train_rank_schedule_fires_and_logs_m():
    task, spec = _tiny_task_and_spec()
    cfg = TrainConfig(lr=0.1, iterations=6, seed=2,
                      rank_schedule=(RankEvent(new_m=8, at_iteration=3),))
    res = train(spec, cfg, task)
    ms = [r.current_m for r in res.metrics]
    assert ms[:3] == [4, 4, 4]
    assert all(m == 8 for m in ms[3:])
    assert max(ks.m for ks in res.stacks) == 8


def test_train_zero_init_rank_increase_keeps_loss():
    task, spec = _tiny_task_and_spec()
    base = train(spec, TrainConfig(lr=0.1, iterations=5, seed=4), task)
    spec2 = build_multilevel_spec(Shape(8, 8, 8, 3), depth=4, coarsenings=1, block_rank=4)
    grown = train(spec2, TrainConfig(lr=0.1, iterations=5, seed=4, init_scale=0.0,
                                     rank_schedule=(RankEvent(new_m=8, at_iteration=3),)), task)
    assert abs(base.metrics[3].loss - grown.metrics[3].loss) <= 1e-10


def test_train_divergence_raises():
    task, spec = _tiny_task_and_spec()
    cfg = TrainConfig(lr=1e9, iterations=30, seed=0)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(TrainingDivergedError):
            train(spec, cfg, task)


def test_train_shape_mismatch_raises():
    task, _ = _tiny_task_and_spec()
    wrong = build_multilevel_spec(Shape(16, 16, 8, 3), depth=4, coarsenings=1, block_rank=4)
    with pytest.raises(ValueError):
        train(wrong, TrainConfig(iterations=1), task)


def test_final_metrics_row_matches_fresh_evaluation():
    # The trailing row must agree with evaluating the returned parameters, so
    # downstream inference can check itself against the training log.
    task, spec = _tiny_task_and_spec()
    res = train(spec, TrainConfig(lr=0.2, iterations=6, seed=8), task)
    loss, iou = evaluate(res.spec, res.stacks, res.head, task)
    assert abs(loss - res.metrics[-1].loss) < 1e-12
    assert abs(iou - res.metrics[-1].mean_iou) < 1e-12
    pred = predict_labels(res.spec, res.stacks, res.head, task.video)
    assert abs(mean_iou(pred, task.labels, task.mask, 2) - res.metrics[-1].mean_iou) < 1e-12


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=-0.1)
    with pytest.raises(ValueError):
        TrainConfig(iterations=-1)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="lbfgs")


# -- properties --------------------------------------------------------------------


@given(
    seed=st.integers(0, 2**31 - 1),
    n_classes=st.integers(2, 4),
)
@settings(max_examples=40, deadline=None)
def test_property_iou_bounds(seed, n_classes):
    rng = np.random.default_rng(seed)
    pred = rng.integers(0, n_classes, size=(3, 3, 2))
    label = rng.integers(0, n_classes, size=(3, 3, 2))
    mask = rng.random((3, 3, 2)) > 0.3
    v = mean_iou(pred, label, mask, n_classes)
    assert 0.0 <= v <= 1.0


@given(seed=st.integers(0, 2**31 - 1), m0=st.integers(1, 4), extra=st.integers(1, 4))
@settings(max_examples=25, deadline=None)
def test_property_rank_roundtrip_bit_exact(seed, m0, extra):
    rng = np.random.default_rng(seed)
    ks = KernelStack.random(m0 + extra, 5, rng)
    cut = decrease_rank(ks, m0)
    back = increase_rank(cut, m0 + extra, init_scale=0.0, rng=rng)
    assert back.weights[:m0].tobytes() == ks.weights[:m0].tobytes()
    assert back.bias[:m0].tobytes() == ks.bias[:m0].tobytes()
