"""Run configuration: strict YAML schema shared by every CLI subcommand.

The file is a mapping of sections; unknown keys anywhere are an error that
names the offending key, so typos cannot silently fall back to defaults.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import yaml

from .memory import REFERENCE_INPUT_SHAPE, build_multilevel_spec, reference_network
from .network import NetworkSpec
from .tensor import Shape
from .training import RankEvent, TrainConfig


class ConfigError(ValueError):
    """Invalid run configuration (bad value, unknown key, missing file)."""


@dataclass
class NetworkSection:
    preset: str = "multilevel"  # multilevel | reference
    input_shape: tuple[int, int, int, int] = (32, 32, 16, 3)
    depth: int = 12
    coarsenings: int = 2
    block_rank: int | None = 8  # None means full (square stacks)
    h: float = 0.1

    def build(self, input_shape: tuple[int, int, int, int] | Shape | None = None) -> NetworkSpec:
        """Network for this section; train/infer pass the data volume's shape
        so the spec always matches the actual input."""
        shape = Shape(*(input_shape if input_shape is not None else self.input_shape))
        if self.preset == "reference":
            return reference_network(self.block_rank, shape, self.h)
        return build_multilevel_spec(shape, self.depth, self.coarsenings,
                                     self.block_rank, self.h)


@dataclass
class DataSection:
    kind: str = "synthetic"  # synthetic | tensor | frames
    dims: tuple[int, int, int] = (32, 32, 16)
    seed: int = 1234
    noise: float = 0.1
    path: str | None = None  # tensor file / frames manifest
    labels: str | None = None  # label volume tensor file (rank 3, class ids)
    labeled_slices: tuple[int, ...] | None = None


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "rblr-out"
    network: NetworkSection = field(default_factory=NetworkSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataSection = field(default_factory=DataSection)
    sweep: bool = False  # plan: also emit the sweep CSV
    checkpoint: str | None = None  # infer: model to load
    corrupt_adjoint: bool = False  # verify: negative-control fault injection


def _expect_mapping(value: Any, where: str) -> dict:
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise ConfigError(f"{where} must be a mapping, got {type(value).__name__}")
    return value


def _check_keys(mapping: dict, allowed: set[str], where: str) -> None:
    unknown = sorted(set(mapping) - allowed)
    if unknown:
        keys = ", ".join(f"'{where}{k}'" for k in unknown)
        raise ConfigError(f"unknown configuration key(s): {keys}")


def _get_int(mapping: dict, key: str, default: int, where: str, minimum: int | None = None) -> int:
    v = mapping.get(key, default)
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{where}{key} must be an integer, got {v!r}")
    if minimum is not None and v < minimum:
        raise ConfigError(f"{where}{key} must be >= {minimum}, got {v}")
    return v


def _get_number(mapping: dict, key: str, default: float, where: str) -> float:
    v = mapping.get(key, default)
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{where}{key} must be a number, got {v!r}")
    return float(v)


def _get_bool(mapping: dict, key: str, default: bool, where: str) -> bool:
    v = mapping.get(key, default)
    if not isinstance(v, bool):
        raise ConfigError(f"{where}{key} must be true/false, got {v!r}")
    return v


def _get_str(mapping: dict, key: str, default: str | None, where: str,
             choices: tuple[str, ...] | None = None) -> str | None:
    v = mapping.get(key, default)
    if v is None:
        return None
    if not isinstance(v, str):
        raise ConfigError(f"{where}{key} must be a string, got {v!r}")
    if choices and v not in choices:
        raise ConfigError(f"{where}{key} must be one of {choices}, got {v!r}")
    return v


def _get_int_tuple(mapping: dict, key: str, default, where: str, length: int | None = None):
    v = mapping.get(key, default)
    if v is None:
        return None
    if not isinstance(v, (list, tuple)) or any(isinstance(x, bool) or not isinstance(x, int) for x in v):
        raise ConfigError(f"{where}{key} must be a list of integers, got {v!r}")
    if length is not None and len(v) != length:
        raise ConfigError(f"{where}{key} must have {length} entries, got {len(v)}")
    return tuple(v)


def _parse_network(raw: dict) -> NetworkSection:
    where = "network."
    _check_keys(raw, {"preset", "input_shape", "depth", "coarsenings", "block_rank", "h"}, where)
    preset = _get_str(raw, "preset", "multilevel", where, ("multilevel", "reference"))
    rank = raw.get("block_rank", 8)
    if rank in (None, "full"):
        rank = None
    elif isinstance(rank, bool) or not isinstance(rank, int) or rank < 1:
        raise ConfigError(f"network.block_rank must be a positive integer, 'full', or null, got {rank!r}")
    default_shape = tuple(REFERENCE_INPUT_SHAPE) if preset == "reference" else (32, 32, 16, 3)
    return NetworkSection(
        preset=preset,
        input_shape=_get_int_tuple(raw, "input_shape", default_shape, where, 4),
        depth=_get_int(raw, "depth", 12, where, minimum=0),
        coarsenings=_get_int(raw, "coarsenings", 2, where, minimum=0),
        block_rank=rank,
        h=_get_number(raw, "h", 0.1, where),
    )


def _parse_rank_schedule(raw: Any) -> tuple[RankEvent, ...]:
    if raw is None:
        return ()
    if not isinstance(raw, list):
        raise ConfigError(f"train.rank_schedule must be a list, got {type(raw).__name__}")
    events = []
    for i, entry in enumerate(raw):
        where = f"train.rank_schedule[{i}]."
        entry = _expect_mapping(entry, where[:-1])
        _check_keys(entry, {"new_m", "at_iteration", "on_plateau"}, where)
        new_m = _get_int(entry, "new_m", 0, where, minimum=1)
        at_it = entry.get("at_iteration")
        if at_it is not None and (isinstance(at_it, bool) or not isinstance(at_it, int) or at_it < 0):
            raise ConfigError(f"{where}at_iteration must be a non-negative integer, got {at_it!r}")
        on_plateau = _get_bool(entry, "on_plateau", False, where)
        try:
            events.append(RankEvent(new_m, at_iteration=at_it, on_plateau=on_plateau))
        except ValueError as e:
            raise ConfigError(f"{where[:-1]}: {e}") from e
    return tuple(events)


def _parse_train(raw: dict, seed: int) -> TrainConfig:
    where = "train."
    _check_keys(raw, {"lr", "iterations", "optimizer", "momentum", "adam_beta1", "adam_beta2",
                      "adam_eps", "rank_schedule", "plateau_window", "plateau_tol",
                      "init_scale", "initial_rank", "record_timing"}, where)
    init_scale = raw.get("init_scale")
    if init_scale is not None and (isinstance(init_scale, bool)
                                   or not isinstance(init_scale, (int, float)) or init_scale < 0):
        raise ConfigError(f"train.init_scale must be a non-negative number or null, got {init_scale!r}")
    initial_rank = raw.get("initial_rank")
    if initial_rank is not None and (isinstance(initial_rank, bool)
                                     or not isinstance(initial_rank, int) or initial_rank < 1):
        raise ConfigError(f"train.initial_rank must be a positive integer or null, got {initial_rank!r}")
    try:
        return TrainConfig(
            lr=_get_number(raw, "lr", 0.05, where),
            iterations=_get_int(raw, "iterations", 200, where, minimum=0),
            optimizer=_get_str(raw, "optimizer", "sgd", where, ("sgd", "momentum", "adam")),
            momentum=_get_number(raw, "momentum", 0.9, where),
            adam_beta1=_get_number(raw, "adam_beta1", 0.9, where),
            adam_beta2=_get_number(raw, "adam_beta2", 0.999, where),
            adam_eps=_get_number(raw, "adam_eps", 1e-8, where),
            rank_schedule=_parse_rank_schedule(raw.get("rank_schedule")),
            plateau_window=_get_int(raw, "plateau_window", 20, where, minimum=2),
            plateau_tol=_get_number(raw, "plateau_tol", 0.01, where),
            init_scale=None if init_scale is None else float(init_scale),
            initial_rank=initial_rank,
            seed=seed,
            record_timing=_get_bool(raw, "record_timing", False, where),
        )
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e)) from e


def _parse_data(raw: dict) -> DataSection:
    where = "data."
    _check_keys(raw, {"kind", "dims", "seed", "noise", "path", "labels", "labeled_slices"}, where)
    return DataSection(
        kind=_get_str(raw, "kind", "synthetic", where, ("synthetic", "tensor", "frames")),
        dims=_get_int_tuple(raw, "dims", (32, 32, 16), where, 3),
        seed=_get_int(raw, "seed", 1234, where),
        noise=_get_number(raw, "noise", 0.1, where),
        path=_get_str(raw, "path", None, where),
        labels=_get_str(raw, "labels", None, where),
        labeled_slices=_get_int_tuple(raw, "labeled_slices", None, where),
    )


def parse_config(doc: Any, source: str = "<config>") -> RunConfig:
    root = _expect_mapping(doc, source)
    _check_keys(root, {"seed", "out", "network", "train", "data", "plan", "infer", "verify"}, "")
    seed = _get_int(root, "seed", 0, "")
    out = _get_str(root, "out", "rblr-out", "")

    network = _parse_network(_expect_mapping(root.get("network"), "network"))
    train = _parse_train(_expect_mapping(root.get("train"), "train"), seed)
    data = _parse_data(_expect_mapping(root.get("data"), "data"))

    plan_raw = _expect_mapping(root.get("plan"), "plan")
    _check_keys(plan_raw, {"sweep"}, "plan.")
    infer_raw = _expect_mapping(root.get("infer"), "infer")
    _check_keys(infer_raw, {"checkpoint"}, "infer.")
    verify_raw = _expect_mapping(root.get("verify"), "verify")
    _check_keys(verify_raw, {"corrupt_adjoint"}, "verify.")

    return RunConfig(
        seed=seed,
        out=out,
        network=network,
        train=train,
        data=data,
        sweep=_get_bool(plan_raw, "sweep", False, "plan."),
        checkpoint=_get_str(infer_raw, "checkpoint", None, "infer."),
        corrupt_adjoint=_get_bool(verify_raw, "corrupt_adjoint", False, "verify."),
    )


def load_config(path: str | Path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {p}: {e}") from e
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"{p}: invalid YAML: {e}") from e
    return parse_config(doc, source=str(p))


def apply_overrides(cfg: RunConfig, seed: int | None = None, out: str | None = None) -> RunConfig:
    """CLI --seed/--out overrides; --seed also reseeds the training config."""
    if seed is not None:
        cfg.seed = seed
        cfg.train = replace(cfg.train, seed=seed)
    if out is not None:
        cfg.out = out
    return cfg
