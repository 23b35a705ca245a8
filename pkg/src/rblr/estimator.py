"""Scikit-learn style estimator wrapping the reversible segmentation network.

One "sample" here is an entire video volume: ``fit`` overfits the network to
a single volume with sparse voxel labels (label ``-1`` marks unsupervised
voxels), ``predict`` returns the per-voxel class volume, and ``score`` is the
mean intersection-over-union on the labeled voxels. Hyperparameters follow
scikit-learn conventions (``get_params``/``set_params``/``clone`` work), but
X is a 4-axis volume rather than a 2-D design matrix, so this estimator is
not interchangeable with tabular ones.
"""

from __future__ import annotations

import numbers

import numpy as np
from sklearn.base import BaseEstimator

from .network import forward, softmax_channels
from .memory import build_multilevel_spec
from .tensor import Shape, Tensor5D
from .training import RankEvent, SegmentationTask, TrainConfig, mean_iou, train


def validate_video(X, coarsenings: int = 0) -> Tensor5D:
    """Coerce X to a float64 Tensor5D and check it suits ``coarsenings``
    Haar levels. Accepts a channels-last (nx, ny, nz, nchan) array or an
    existing Tensor5D."""
    if isinstance(X, Tensor5D):
        t = X.astype(np.float64)
    else:
        arr = np.asarray(X)
        if arr.ndim != 4:
            raise ValueError(
                f"X must be a 4-axis (nx, ny, nz, nchan) volume, got {arr.ndim} axes"
            )
        if arr.dtype.kind not in "fiu":
            raise ValueError(f"X must be numeric, got dtype {arr.dtype}")
        t = Tensor5D.from_array(arr.astype(np.float64, copy=False))
    if not np.isfinite(t.data).all():
        raise ValueError("X contains non-finite values")
    div = 2**coarsenings
    d = t.dims
    bad = [name for name, v in zip("nx ny nz".split(), (d.nx, d.ny, d.nz)) if v % div]
    if bad:
        raise ValueError(
            f"spatial dims {tuple(d[:3])} must be divisible by 2^{coarsenings}={div} "
            f"for {coarsenings} coarsenings (offending: {', '.join(bad)})"
        )
    return t


def validate_labels(y, volume: tuple[int, int, int]) -> tuple[np.ndarray, np.ndarray, int]:
    """Coerce y to an integer label volume; -1 means unlabeled.

    Returns (labels clipped to >= 0, supervision mask, n_classes).
    """
    arr = np.asarray(y)
    if arr.shape != tuple(volume):
        raise ValueError(f"y has shape {arr.shape}, expected {tuple(volume)}")
    if arr.dtype.kind not in "iu":
        if arr.dtype.kind == "f" and np.all(arr == np.round(arr)):
            arr = arr.astype(np.int64)
        else:
            raise ValueError(f"y must hold integer class ids, got dtype {arr.dtype}")
    arr = arr.astype(np.int64, copy=False)
    if arr.min() < -1:
        raise ValueError("labels must be >= -1 (-1 marks unlabeled voxels)")
    mask = arr >= 0
    if not mask.any():
        raise ValueError("y labels no voxels (all entries are -1)")
    n_classes = int(arr.max()) + 1
    if n_classes < 2:
        n_classes = 2
    return np.where(mask, arr, 0), mask, n_classes


def _normalize_schedule(schedule) -> tuple[RankEvent, ...]:
    events = []
    for i, ev in enumerate(schedule or ()):
        if isinstance(ev, RankEvent):
            events.append(ev)
        elif isinstance(ev, dict):
            events.append(RankEvent(**ev))
        elif isinstance(ev, (tuple, list)) and len(ev) == 2:
            events.append(RankEvent(int(ev[0]), at_iteration=int(ev[1])))
        else:
            raise ValueError(
                f"rank_schedule[{i}]: expected RankEvent, mapping, or (new_m, at_iteration), "
                f"got {ev!r}"
            )
    return tuple(events)


class ReversibleVideoSegmenter(BaseEstimator):
    """Volumetric segmenter with a fully reversible multilevel trunk.

    Parameters mirror the training configuration: network shape (depth,
    coarsenings, block_rank, h), optimization (lr, iterations, optimizer,
    momentum), and the adaptive-rank schedule. All randomness flows from
    ``random_state``.
    """

    def __init__(
        self,
        depth: int = 12,
        coarsenings: int = 2,
        block_rank: int | None = 8,
        h: float = 0.1,
        lr: float = 0.05,
        iterations: int = 200,
        optimizer: str = "sgd",
        momentum: float = 0.9,
        rank_schedule: tuple = (),
        plateau_window: int = 20,
        plateau_tol: float = 0.01,
        init_scale: float | None = None,
        record_timing: bool = False,
        random_state: int = 0,
    ):
        self.depth = depth
        self.coarsenings = coarsenings
        self.block_rank = block_rank
        self.h = h
        self.lr = lr
        self.iterations = iterations
        self.optimizer = optimizer
        self.momentum = momentum
        self.rank_schedule = rank_schedule
        self.plateau_window = plateau_window
        self.plateau_tol = plateau_tol
        self.init_scale = init_scale
        self.record_timing = record_timing
        self.random_state = random_state

    # -- scikit-learn plumbing ------------------------------------------------

    def _check_hyperparams(self) -> None:
        if not isinstance(self.depth, numbers.Integral) or self.depth < 1:
            raise ValueError(f"depth must be a positive integer, got {self.depth!r}")
        if not isinstance(self.coarsenings, numbers.Integral) or self.coarsenings < 0:
            raise ValueError(f"coarsenings must be >= 0, got {self.coarsenings!r}")
        if self.block_rank is not None and (
            not isinstance(self.block_rank, numbers.Integral) or self.block_rank < 1
        ):
            raise ValueError(f"block_rank must be a positive integer or None, got {self.block_rank!r}")

    def _check_fitted(self) -> None:
        if not hasattr(self, "spec_"):
            raise RuntimeError("this ReversibleVideoSegmenter is not fitted yet; call fit first")

    # -- estimator API ---------------------------------------------------------

    def fit(self, X, y):
        """Fit to one labeled volume.

        X: (nx, ny, nz, nchan) array or Tensor5D. y: (nx, ny, nz) integer
        class volume with -1 on unlabeled voxels.
        """
        self._check_hyperparams()
        video = validate_video(X, self.coarsenings)
        labels, mask, n_classes = validate_labels(y, tuple(video.dims)[:3])
        task = SegmentationTask(video, labels, mask, n_classes)

        spec = build_multilevel_spec(
            video.dims, self.depth, self.coarsenings, self.block_rank, self.h
        )
        cfg = TrainConfig(
            lr=self.lr,
            iterations=self.iterations,
            optimizer=self.optimizer,
            momentum=self.momentum,
            rank_schedule=_normalize_schedule(self.rank_schedule),
            plateau_window=self.plateau_window,
            plateau_tol=self.plateau_tol,
            init_scale=self.init_scale,
            initial_rank=None if self.block_rank is None else int(self.block_rank),
            seed=int(self.random_state),
            record_timing=self.record_timing,
        )
        result = train(spec, cfg, task)
        self.spec_ = result.spec
        self.stacks_ = result.stacks
        self.head_ = result.head
        self.metrics_ = result.metrics
        self.classes_ = np.arange(n_classes)
        self.n_classes_ = n_classes
        self.n_iter_ = self.iterations
        return self

    def _forward(self, X) -> Tensor5D:
        self._check_fitted()
        video = validate_video(X, self.coarsenings)
        if video.dims != self.spec_.input_shape:
            raise ValueError(
                f"X has shape {tuple(video.dims)}, the fitted network expects "
                f"{tuple(self.spec_.input_shape)}"
            )
        state, _ = forward(self.spec_, self.stacks_, video)
        return state

    def predict(self, X) -> np.ndarray:
        """Per-voxel class ids, shape (nx, ny, nz)."""
        state = self._forward(X)
        return self.head_.logits(state).argmax(axis=0)

    def predict_proba(self, X) -> np.ndarray:
        """Per-voxel class probabilities, channels last: (nx, ny, nz, n_classes)."""
        state = self._forward(X)
        proba = softmax_channels(self.head_.logits(state))
        return np.moveaxis(proba, 0, -1)

    def score(self, X, y) -> float:
        """Mean IoU over the voxels labeled in y (entries >= 0)."""
        pred = self.predict(X)
        labels, mask, _ = validate_labels(y, pred.shape)
        return mean_iou(pred, labels, mask, self.n_classes_)
