"""Loss, optimizers, the training loop, and adaptive block-rank control.

Training fits one volumetric input (e.g. a whole video) to a sparse
segmentation: the loss is cross-entropy restricted to labeled voxels. The
block rank of every layer can be raised or lowered while training without
touching existing kernels, either at fixed iterations or when the loss
plateaus.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .convops import KERNEL_SIZE, KernelStack
from .network import (
    LinearHead,
    NetworkSpec,
    forward,
    gradient,
    init_params,
    softmax_channels,
)
from .tensor import Tensor5D


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; carries the iteration it happened at."""


@dataclass(frozen=True)
class RankEvent:
    """Switch every layer's block-row count toward ``new_m`` (capped at each
    layer's n), triggered at a fixed iteration or on loss plateau."""

    new_m: int
    at_iteration: int | None = None
    on_plateau: bool = False

    def __post_init__(self):
        if self.new_m < 1:
            raise ValueError("new_m must be >= 1")
        if (self.at_iteration is None) == (not self.on_plateau):
            raise ValueError("exactly one trigger required: at_iteration or on_plateau")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    iterations: int = 200
    optimizer: str = "sgd"  # sgd | momentum | adam
    momentum: float = 0.9
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    rank_schedule: tuple[RankEvent, ...] = ()
    plateau_window: int = 20
    plateau_tol: float = 0.01
    init_scale: float | None = None  # None: 1e-3 * RMS of existing kernels
    initial_rank: int | None = None  # reported in metrics; default max layer m
    seed: int = 0
    record_timing: bool = False  # wall_time_s is 0.0 unless enabled, so that
    #                              metric files are bit-reproducible by default

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.optimizer not in ("sgd", "momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        object.__setattr__(self, "rank_schedule", tuple(self.rank_schedule))


@dataclass
class MetricsRow:
    iteration: int
    loss: float
    mean_iou: float
    current_m: int
    wall_time_s: float


METRICS_COLUMNS = ("iter", "loss", "mean_iou", "current_m", "wall_time_s")


def metrics_to_csv(rows: list[MetricsRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_COLUMNS)
    for r in rows:
        w.writerow([r.iteration, repr(r.loss), repr(r.mean_iou), r.current_m, repr(r.wall_time_s)])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Metrics


def mean_iou(pred: np.ndarray, label: np.ndarray, mask: np.ndarray | None = None,
             n_classes: int | None = None) -> float:
    """Mean over classes of intersection-over-union, restricted to ``mask``.

    A class absent from both prediction and label (empty union) counts as a
    perfect 1.0 so that trivial classes do not drag the mean down.
    """
    pred = np.asarray(pred)
    label = np.asarray(label)
    if pred.shape != label.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs label {label.shape}")
    if mask is not None:
        pred = pred[mask]
        label = label[mask]
    if n_classes is None:
        n_classes = int(max(pred.max(initial=0), label.max(initial=0))) + 1
    scores = []
    for c in range(n_classes):
        p = pred == c
        l = label == c
        union = np.logical_or(p, l).sum()
        if union == 0:
            scores.append(1.0)
        else:
            scores.append(float(np.logical_and(p, l).sum()) / float(union))
    return float(np.mean(scores))


def plateau_detect(loss_history: list[float] | np.ndarray, window: int, tol: float) -> bool:
    """True when the loss stopped decreasing: relative drop over the last
    ``window`` iterations is below ``tol``. False until enough history."""
    if window < 2:
        raise ValueError("window must be >= 2")
    h = list(loss_history)
    if len(h) < window + 1:
        return False
    ref = h[-1 - window]
    return (ref - h[-1]) / abs(ref) < tol


# ---------------------------------------------------------------------------
# Masked cross-entropy over class logits


def masked_cross_entropy(logits: np.ndarray, labels: np.ndarray, mask: np.ndarray
                         ) -> tuple[float, np.ndarray]:
    """Cross-entropy of softmax(logits) against integer labels, averaged over
    masked voxels only. Returns (loss, d loss / d logits)."""
    k = logits.shape[0]
    if labels.shape != logits.shape[1:]:
        raise ValueError(f"labels {labels.shape} do not match logit volume {logits.shape[1:]}")
    count = int(mask.sum())
    if count == 0:
        raise ValueError("loss mask selects no voxels")
    safe = np.where(mask, labels, 0)  # labels may be -1 outside the mask
    if safe.min() < 0 or safe.max() >= k:
        raise ValueError(f"masked labels must lie in [0, {k}), got [{safe.min()}, {safe.max()}]")
    shifted = logits - logits.max(axis=0, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=0, keepdims=True))
    logp = shifted - logz
    picked = np.take_along_axis(logp, safe[None], axis=0)[0]
    loss = -float(picked[mask].sum()) / count

    grad = np.exp(logp)
    onehot_rows = safe[None] == np.arange(k).reshape((k,) + (1,) * labels.ndim)
    grad = (grad - onehot_rows) * (mask[None] / count)
    return loss, grad


@dataclass
class SegmentationTask:
    """One volumetric input with (possibly sparse) voxel labels."""

    video: Tensor5D
    labels: np.ndarray  # (nx, ny, nz) integer class ids
    mask: np.ndarray  # (nx, ny, nz) bool; True where labels supervise
    n_classes: int = 2
    labeled_slices: tuple[int, ...] = ()

    def __post_init__(self):
        vol = self.video.dims[:3]
        if self.labels.shape != vol or self.mask.shape != vol:
            raise ValueError(
                f"labels/mask {self.labels.shape}/{self.mask.shape} do not match volume {vol}"
            )


def make_segmentation_loss(head: LinearHead, task: SegmentationTask):
    """Loss closure over the trunk output. aux carries the head gradients and
    the argmax prediction so the training loop logs IoU for free."""

    def loss_fn(state: Tensor5D):
        logits = head.logits(state)
        loss, g_logits = masked_cross_entropy(logits, task.labels, task.mask)
        g_state, g_hw, g_hb = head.vjp(state, g_logits)
        aux = {"head_grads": (g_hw, g_hb), "pred": logits.argmax(axis=0)}
        return loss, g_state, aux

    return loss_fn


# ---------------------------------------------------------------------------
# Adaptive block rank


def increase_rank(ks: KernelStack, m_new: int, init_scale: float,
                  rng: np.random.Generator) -> KernelStack:
    """Add block rows without modifying existing kernels.

    Rows 0..m-1 and their biases are preserved bit-exactly; new rows draw
    from Normal(0, init_scale^2) and new biases start at zero, so with
    init_scale == 0 the layer's output is unchanged.
    """
    if m_new <= ks.m:
        raise ValueError(f"m_new must exceed current m={ks.m}, got {m_new}")
    extra = rng.normal(0.0, init_scale, size=(m_new - ks.m, ks.n, 3, 3, 3)) if init_scale > 0 \
        else np.zeros((m_new - ks.m, ks.n, 3, 3, 3))
    w = np.concatenate([ks.weights, extra], axis=0)
    b = np.concatenate([ks.bias, np.zeros(m_new - ks.m)])
    return KernelStack(w, b)


def decrease_rank(ks: KernelStack, m_new: int) -> KernelStack:
    """Drop trailing block rows (and their biases), keeping the first
    m_new rows bit-exactly."""
    if m_new < 1:
        raise ValueError(f"m_new must be >= 1, got {m_new}")
    if m_new >= ks.m:
        raise ValueError(f"m_new must be below current m={ks.m}, got {m_new}")
    return KernelStack(ks.weights[:m_new].copy(), ks.bias[:m_new].copy())


def default_new_row_scale(ks: KernelStack) -> float:
    """1e-3 times the RMS of the existing kernels (or of the default init
    scale when the stack is all zeros)."""
    rms = float(np.sqrt(np.mean(ks.weights**2)))
    if rms == 0.0:
        rms = (KERNEL_SIZE * ks.n) ** -0.5
    return 1e-3 * rms


def apply_rank_change(
    spec: NetworkSpec,
    stacks: list[KernelStack],
    new_m: int,
    init_scale: float | None,
    rng: np.random.Generator,
) -> tuple[NetworkSpec, list[KernelStack]]:
    """Retarget every layer's block-row count to min(new_m, n). Layers
    already at the target (including square layers with n <= new_m) are
    untouched."""
    new_layers = []
    new_stacks = []
    for layer, ks in zip(spec.layers, stacks):
        target = min(new_m, layer.n)
        if target > ks.m:
            scale = default_new_row_scale(ks) if init_scale is None else init_scale
            ks = increase_rank(ks, target, scale, rng)
        elif target < ks.m:
            ks = decrease_rank(ks, target)
        new_layers.append(replace(layer, m=target))
        new_stacks.append(ks)
    return replace(spec, layers=tuple(new_layers)), new_stacks


# ---------------------------------------------------------------------------
# Optimizers


class Optimizer:
    """SGD, SGD with momentum, or Adam over a flat list of arrays.

    Keeps per-slot moment buffers; when a slot's leading dimension changes
    (block-rank events) the buffers are zero-padded or truncated so existing
    rows keep their optimizer state.
    """

    def __init__(self, kind: str, lr: float, momentum: float = 0.9,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if kind not in ("sgd", "momentum", "adam"):
            raise ValueError(f"unknown optimizer {kind!r}; choose sgd, momentum, or adam")
        self.kind = kind
        self.lr = lr
        self.momentum = momentum
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._state: dict[int, list[np.ndarray]] = {}

    def _buffers(self, slot: int, shape: tuple[int, ...], count: int) -> list[np.ndarray]:
        bufs = self._state.get(slot)
        if bufs is None:
            bufs = [np.zeros(shape) for _ in range(count)]
            self._state[slot] = bufs
        elif bufs[0].shape != shape:
            resized = []
            for b in bufs:
                nb = np.zeros(shape)
                keep = min(b.shape[0], shape[0])
                nb[:keep] = b[:keep]
                resized.append(nb)
            bufs = resized
            self._state[slot] = bufs
        return bufs

    def step(self, arrays: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
        self.t += 1
        out = []
        for slot, (a, g) in enumerate(zip(arrays, grads)):
            if self.kind == "sgd":
                out.append(a - self.lr * g)
            elif self.kind == "momentum":
                (v,) = self._buffers(slot, a.shape, 1)
                v *= self.momentum
                v += g
                out.append(a - self.lr * v)
            else:  # adam
                m1, m2 = self._buffers(slot, a.shape, 2)
                m1 *= self.beta1
                m1 += (1 - self.beta1) * g
                m2 *= self.beta2
                m2 += (1 - self.beta2) * g * g
                mhat = m1 / (1 - self.beta1**self.t)
                vhat = m2 / (1 - self.beta2**self.t)
                out.append(a - self.lr * mhat / (np.sqrt(vhat) + self.eps))
        return out


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class TrainResult:
    spec: NetworkSpec
    stacks: list[KernelStack]
    head: LinearHead
    metrics: list[MetricsRow] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.metrics]


def evaluate(spec: NetworkSpec, stacks: list[KernelStack], head: LinearHead,
             task: SegmentationTask) -> tuple[float, float]:
    """(masked loss, masked mean IoU) of the current model, no gradients."""
    state, _ = forward(spec, stacks, task.video)
    logits = head.logits(state)
    loss, _ = masked_cross_entropy(logits, task.labels, task.mask)
    iou = mean_iou(logits.argmax(axis=0), task.labels, task.mask, task.n_classes)
    return loss, iou


def train(
    spec: NetworkSpec,
    config: TrainConfig,
    task: SegmentationTask,
    stacks: list[KernelStack] | None = None,
    head: LinearHead | None = None,
) -> TrainResult:
    """Fit the network to one labeled volume.

    All randomness (kernel init, new rank rows) flows from ``config.seed``.
    Raises :class:`TrainingDivergedError` if the loss becomes non-finite.
    """
    if task.video.dims != spec.input_shape:
        raise ValueError(
            f"task volume {tuple(task.video.dims)} does not match spec input "
            f"{tuple(spec.input_shape)}"
        )
    rng = np.random.default_rng(config.seed)
    if stacks is None:
        stacks = init_params(spec, rng)
    if head is None:
        head = LinearHead.init(task.n_classes, spec.output_shape.nchan, rng)

    opt = Optimizer(config.optimizer, config.lr, momentum=config.momentum,
                    beta1=config.adam_beta1, beta2=config.adam_beta2, eps=config.adam_eps)
    current_m = config.initial_rank
    if current_m is None:
        current_m = max(l.m for l in spec.layers)

    pending = list(config.rank_schedule)
    metrics: list[MetricsRow] = []
    losses: list[float] = []
    t0 = time.perf_counter()

    for it in range(config.iterations):
        fired = [ev for ev in pending
                 if (ev.at_iteration is not None and ev.at_iteration == it)
                 or (ev.on_plateau and plateau_detect(losses, config.plateau_window,
                                                      config.plateau_tol))]
        for ev in fired:
            spec, stacks = apply_rank_change(spec, stacks, ev.new_m, config.init_scale, rng)
            current_m = ev.new_m
            pending.remove(ev)

        loss_fn = make_segmentation_loss(head, task)
        loss, grads = gradient(spec, stacks, task.video, loss_fn)
        if not np.isfinite(loss):
            raise TrainingDivergedError(
                f"loss became non-finite at iteration {it} (lr={config.lr}, "
                f"optimizer={config.optimizer}); reduce the learning rate or time step"
            )
        losses.append(loss)
        iou = mean_iou(grads.aux["pred"], task.labels, task.mask, task.n_classes)
        elapsed = time.perf_counter() - t0 if config.record_timing else 0.0
        metrics.append(MetricsRow(it, loss, iou, current_m, elapsed))

        arrays = [a for ks in stacks for a in (ks.weights, ks.bias)]
        arrays += [head.weights, head.bias]
        garrs = [a for gw, gb in zip(grads.weights, grads.biases) for a in (gw, gb)]
        garrs += [grads.aux["head_grads"][0], grads.aux["head_grads"][1]]
        updated = opt.step(arrays, garrs)
        stacks = [KernelStack(updated[2 * i], updated[2 * i + 1]) for i in range(len(stacks))]
        head = LinearHead(updated[-2], updated[-1])

    # Trailing evaluation row: metrics at the final parameters, so the log's
    # last entry agrees with inference on the saved model.
    loss, iou = evaluate(spec, stacks, head, task)
    if not np.isfinite(loss):
        raise TrainingDivergedError(
            f"loss became non-finite after the final update (lr={config.lr})"
        )
    elapsed = time.perf_counter() - t0 if config.record_timing else 0.0
    metrics.append(MetricsRow(config.iterations, loss, iou, current_m, elapsed))

    return TrainResult(spec, stacks, head, metrics)


def predict_labels(spec: NetworkSpec, stacks: list[KernelStack], head: LinearHead,
                   video: Tensor5D) -> np.ndarray:
    """Argmax class volume for one input."""
    state, _ = forward(spec, stacks, video)
    return head.logits(state).argmax(axis=0)


def predict_proba(spec: NetworkSpec, stacks: list[KernelStack], head: LinearHead,
                  video: Tensor5D) -> np.ndarray:
    """(n_classes, nx, ny, nz) softmax probabilities."""
    state, _ = forward(spec, stacks, video)
    return softmax_channels(head.logits(state))
