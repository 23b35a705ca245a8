"""Command-line interface.

Subcommands:
    plan    memory report for a network configuration (stdout table + CSV)
    train   fit a model, writing a checkpoint and a metrics CSV
    verify  run the built-in numerical verification suite
    infer   segment a volume with a saved checkpoint

Shared flags: ``--config PATH`` (YAML run configuration), ``--seed N`` and
``--out DIR`` override the config. Exit codes: 0 success, 1 validation
failure (bad config/inputs), 2 runtime failure (divergence, I/O trouble,
failed verification). ``RBLR_THREADS`` caps the linear-algebra thread pools.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, apply_overrides, load_config
from .dataio import (
    TensorFileError,
    import_frames,
    load_checkpoint,
    make_synthetic_task,
    read_array,
    read_tensor,
    save_checkpoint,
    write_array,
)
from .memory import format_report, memory_curves, report, sweep_csv
from .network import forward
from .selfcheck import format_results, run_all
from .training import (
    SegmentationTask,
    TrainingDivergedError,
    mean_iou,
    metrics_to_csv,
    train,
)


class _Parser(argparse.ArgumentParser):
    """Argument errors become ConfigError so misuse exits with code 1."""

    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rblr", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, desc in (
        ("plan", cmd_plan, "memory report for the configured network"),
        ("train", cmd_train, "train on the configured data"),
        ("verify", cmd_verify, "run the numerical verification suite"),
        ("infer", cmd_infer, "segment a volume with a checkpoint"),
    ):
        p = sub.add_parser(name, help=desc)
        p.add_argument("--config", type=str, default=None, help="YAML run configuration")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", type=str, default=None, help="override the output directory")
        p.set_defaults(func=fn)
    return parser


def _load(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    return apply_overrides(cfg, seed=args.seed, out=args.out)


def _outdir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_task(cfg: RunConfig, require_labels: bool) -> SegmentationTask:
    """Build the segmentation task the config describes. Imported data with
    no label volume yields a task whose supervision mask is empty (valid for
    inference only)."""
    d = cfg.data
    if d.kind == "synthetic":
        steps = 3 if cfg.network.preset == "reference" else cfg.network.coarsenings
        return make_synthetic_task(d.dims, d.seed, coarsenings=steps, noise=d.noise)
    if not d.path:
        raise ConfigError(f"data.kind={d.kind!r} requires data.path")
    video = read_tensor(d.path) if d.kind == "tensor" else import_frames(d.path)
    video = video.astype(np.float64)
    vol = tuple(video.dims)[:3]
    if not d.labels:
        if require_labels:
            raise ConfigError("training on imported data requires data.labels")
        return SegmentationTask(video, np.full(vol, -1, dtype=np.int64),
                                np.zeros(vol, dtype=bool), 2)
    labels = np.asarray(read_array(d.labels)).astype(np.int64)
    if labels.shape != vol:
        raise ConfigError(f"labels shape {labels.shape} does not match volume {vol}")
    mask = labels >= 0
    if d.labeled_slices is not None:
        slice_mask = np.zeros_like(mask)
        for t in d.labeled_slices:
            if not 0 <= t < video.dims.nz:
                raise ConfigError(f"labeled slice {t} outside volume depth {video.dims.nz}")
            slice_mask[:, :, t] = True
        mask &= slice_mask
    if not mask.any():
        raise ConfigError("labels supervise no voxels")
    n_classes = max(int(labels.max()) + 1, 2)
    return SegmentationTask(video, labels, mask, n_classes)


def cmd_plan(cfg: RunConfig, out: Path) -> int:
    spec = cfg.network.build()
    rep = report(spec)
    rank = cfg.network.block_rank
    label = f"{cfg.network.preset}, block rank {'full' if rank is None else rank}"
    print(format_report(rep, label=label))

    import csv
    import io

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "m", "n", "kernel_bytes"])
    for i, (layer, b) in enumerate(zip(spec.layers, rep.kernel_bytes_per_layer)):
        w.writerow([i, layer.m, layer.n, b])
    w.writerow(["total", "", "", rep.kernel_bytes_total])
    w.writerow(["states", "", "", rep.state_bytes])
    (out / "memory_report.csv").write_text(buf.getvalue())
    print(f"wrote {out / 'memory_report.csv'}")

    if cfg.sweep:
        rows = memory_curves(block_rank=4 if rank is None else rank)
        (out / "memory_sweep.csv").write_text(sweep_csv(rows))
        print(f"wrote {out / 'memory_sweep.csv'}")
    return 0


def cmd_train(cfg: RunConfig, out: Path) -> int:
    task = _load_task(cfg, require_labels=True)
    spec = cfg.network.build(task.video.dims)
    result = train(spec, cfg.train, task)

    metrics_path = out / "metrics.csv"
    metrics_path.write_text(metrics_to_csv(result.metrics))
    ckpt_path = out / "checkpoint.rblr"
    save_checkpoint(ckpt_path, result.spec, result.stacks, result.head,
                    extra={"n_classes": task.n_classes, "seed": cfg.train.seed,
                           "data_kind": cfg.data.kind, "data_seed": cfg.data.seed})
    last = result.metrics[-1]
    print(f"trained {spec.depth} layers for {cfg.train.iterations} iterations")
    print(f"final loss {last.loss!r}")
    print(f"final mean IoU {last.mean_iou!r}")
    print(f"wrote {metrics_path}")
    print(f"wrote {ckpt_path}")
    return 0


def cmd_verify(cfg: RunConfig, out: Path) -> int:
    results = run_all(seed=cfg.seed, corrupt_adjoint=cfg.corrupt_adjoint)
    text = format_results(results)
    print(text)
    (out / "verify_report.txt").write_text(text + "\n")
    return 0 if all(r.passed for r in results) else 2


def cmd_infer(cfg: RunConfig, out: Path) -> int:
    if not cfg.checkpoint:
        raise ConfigError("infer requires infer.checkpoint in the config")
    ckpt = load_checkpoint(cfg.checkpoint)
    if ckpt.head is None:
        raise ConfigError(f"{cfg.checkpoint} stores no classification head")
    task = _load_task(cfg, require_labels=False)
    video = task.video
    if video.dims != ckpt.spec.input_shape:
        raise ConfigError(
            f"input volume is {tuple(video.dims)} but the checkpoint network "
            f"expects {tuple(ckpt.spec.input_shape)}"
        )
    state, _ = forward(ckpt.spec, ckpt.stacks, video)
    logits = ckpt.head.logits(state)
    pred = logits.argmax(axis=0)
    seg_path = out / "segmentation.rblr"
    write_array(seg_path, pred.astype(np.float32))
    print(f"wrote {seg_path}")

    if task.mask.any():
        n_classes = max(task.n_classes, ckpt.head.n_classes)
        overall = mean_iou(pred, task.labels, task.mask, n_classes)
        print(f"mean IoU over supervised voxels: {overall!r}")

        import csv
        import io

        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["slice", "iou"])
        labeled_everywhere = task.labels >= 0
        for t in range(video.dims.nz):
            sl = labeled_everywhere[:, :, t]
            if sl.any():
                iou = mean_iou(pred[:, :, t][sl], task.labels[:, :, t][sl],
                               n_classes=n_classes)
            else:
                iou = float("nan")
            w.writerow([t, repr(iou)])
        (out / "slice_iou.csv").write_text(buf.getvalue())
        print(f"wrote {out / 'slice_iou.csv'}")
    else:
        print("no labels provided; skipping IoU report")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _load(args)
        out = _outdir(cfg)
        return args.func(cfg, out)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (TensorFileError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except TrainingDivergedError as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
