"""Closed-form memory model for kernels and states, and the sweep tables
behind the ``plan`` command.

Assumptions (they are what make the built-in reference figures exact):
float32 storage (4 bytes per scalar), decimal megabytes (1 MB = 10^6 bytes),
and three live state copies for the leapfrog levels. Kernel memory per layer
is m*n stencils of 27 scalars; reversible state memory is independent of
depth because states are reconstructed, not stored.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Sequence

from .haar import ResolutionChange, channels_after_coarsening
from .network import LayerSpec, NetworkSpec
from .tensor import Shape

BYTES_PER_SCALAR = 4  # float32 storage
TAPS = 27  # 3x3x3 stencil
STATE_COPIES = 3  # live leapfrog levels
MB = 1_000_000  # decimal megabyte


@dataclass
class MemoryReport:
    """Per-layer and total storage for one network configuration."""

    kernel_bytes_per_layer: list[int]
    state_bytes: int

    @property
    def kernel_bytes_total(self) -> int:
        return sum(self.kernel_bytes_per_layer)

    @property
    def total_bytes(self) -> int:
        return self.kernel_bytes_total + self.state_bytes

    @property
    def kernel_mb(self) -> float:
        return self.kernel_bytes_total / MB

    @property
    def state_mb(self) -> float:
        return self.state_bytes / MB

    @property
    def total_mb(self) -> float:
        return self.total_bytes / MB

    def rounded(self) -> tuple[int, int, int]:
        """(kernel, state, total) in whole MB, as reported tables print them."""
        return round(self.kernel_mb), round(self.state_mb), round(self.total_mb)


def kernel_memory_layer(m: int, n: int) -> int:
    return m * n * TAPS * BYTES_PER_SCALAR


def kernel_memory(spec: NetworkSpec | Sequence[LayerSpec]) -> int:
    """Total kernel storage in bytes: sum over layers of m*n*27 scalars."""
    layers = spec.layers if isinstance(spec, NetworkSpec) else spec
    return sum(kernel_memory_layer(l.m, l.n) for l in layers)


def state_memory(input_shape: Shape) -> int:
    """Storage for the live leapfrog levels, in bytes.

    Resolution changes preserve the element count, so the state footprint is
    three copies of the input regardless of where in the network they live.
    """
    s = Shape(*input_shape).validate()
    return STATE_COPIES * s.size * BYTES_PER_SCALAR


def report(spec: NetworkSpec) -> MemoryReport:
    per_layer = [kernel_memory_layer(l.m, l.n) for l in spec.layers]
    return MemoryReport(per_layer, state_memory(spec.input_shape))


# ---------------------------------------------------------------------------
# Reference architecture

#: Layer groups of the built-in 27-layer video segmentation network: three
#: coarsening stages down to 8x fewer voxels per axis and the mirrored
#: refinements back up. (layer count, channels at that level).
REFERENCE_GROUPS: tuple[tuple[int, int], ...] = (
    (3, 6),
    (4, 48),
    (4, 384),
    (4, 3072),
    (4, 384),
    (4, 48),
    (4, 6),
)

REFERENCE_INPUT_SHAPE = Shape(240, 424, 72, 6)


def reference_layers(block_rank: int | None) -> list[LayerSpec]:
    """The 27-layer reference schedule.

    ``block_rank`` caps the number of block rows at the coarsened levels;
    the full-resolution groups keep square 6x6 stacks. ``None`` means full
    (square stacks everywhere).
    """
    layers: list[LayerSpec] = []
    n_groups = len(REFERENCE_GROUPS)
    for g, (count, n) in enumerate(REFERENCE_GROUPS):
        if g == 0:
            res = ResolutionChange.IDENTITY
        elif g <= n_groups // 2:
            res = ResolutionChange.HAAR_FORWARD
        else:
            res = ResolutionChange.HAAR_INVERSE
        m = n if (block_rank is None or n <= 6) else min(block_rank, n)
        for k in range(count):
            layers.append(LayerSpec(m, n, res if k == 0 else ResolutionChange.IDENTITY))
    return layers


def reference_network(block_rank: int | None, input_shape: Shape = REFERENCE_INPUT_SHAPE,
                      h: float = 0.1) -> NetworkSpec:
    return NetworkSpec(tuple(reference_layers(block_rank)), h, Shape(*input_shape))


# ---------------------------------------------------------------------------
# Generic multilevel builder (toy networks, estimator, sweeps)


def build_multilevel_layers(
    base_channels: int,
    depth: int,
    coarsenings: int,
    block_rank: int | None,
) -> list[LayerSpec]:
    """Symmetric U-shaped schedule: ``coarsenings`` Haar steps spread over
    the first half, mirrored refinements over the second, layers split as
    evenly as possible over the 2*coarsenings + 1 levels. Block rows are
    min(block_rank, n) per layer (or square when block_rank is None)."""
    segments = 2 * coarsenings + 1
    if coarsenings > 0 and depth < segments:
        raise ValueError(f"need at least {segments} layers for {coarsenings} coarsenings, got {depth}")
    if depth < 0:
        raise ValueError(f"depth must be non-negative, got {depth}")
    bounds = [round(k * depth / segments) for k in range(segments + 1)]
    layers: list[LayerSpec] = []
    level = 0
    for seg in range(segments):
        if seg == 0:
            res = ResolutionChange.IDENTITY
        elif seg <= coarsenings:
            res = ResolutionChange.HAAR_FORWARD
            level += 1
        else:
            res = ResolutionChange.HAAR_INVERSE
            level -= 1
        n = channels_after_coarsening(base_channels, level)
        m = n if block_rank is None else min(block_rank, n)
        for k in range(bounds[seg], bounds[seg + 1]):
            layers.append(LayerSpec(m, n, res if k == bounds[seg] else ResolutionChange.IDENTITY))
    return layers


def build_multilevel_spec(
    input_shape: Shape,
    depth: int,
    coarsenings: int,
    block_rank: int | None,
    h: float = 0.1,
) -> NetworkSpec:
    s = Shape(*input_shape).validate()
    layers = build_multilevel_layers(s.nchan, depth, coarsenings, block_rank)
    return NetworkSpec(tuple(layers), h, s)


# ---------------------------------------------------------------------------
# Sweep tables (the three classic comparisons)


def _abstract_kernel_bytes(base_channels: int, depth: int, coarsenings: int,
                           block_rank: int | None) -> int:
    """Kernel bytes for the canonical schedule without shape validation, so
    sweeps can cover inputs whose dims are not divisible by 2^coarsenings
    (the byte count only depends on the channel schedule)."""
    return kernel_memory(build_multilevel_layers(base_channels, depth, coarsenings, block_rank))


@dataclass(frozen=True)
class SweepRow:
    config: str
    layers: int
    coarsenings: int
    kernel_mb: float
    state_mb: float
    total_mb: float


def memory_curves(
    base_shape: Shape = Shape(300, 300, 300, 3),
    depth_range: Iterable[int] = range(10, 101, 10),
    coarsening_range: Iterable[int] = range(0, 6),
    input_sizes: Iterable[int] = (50, 100, 150, 200, 250, 300),
    block_rank: int = 8,
    fixed_depth: int = 50,
    fixed_coarsenings: int = 2,
) -> list[SweepRow]:
    """Rows for the three sweeps: memory vs input size, vs depth, and vs
    coarsening count, for the full network, the block-low-rank network, and
    a non-reversible baseline whose state memory grows with depth."""
    base = Shape(*base_shape).validate()
    rows: list[SweepRow] = []

    def add(config: str, depth: int, s: int, shape: Shape, rank: int | None,
            reversible: bool = True) -> None:
        kb = _abstract_kernel_bytes(shape.nchan, depth, s, rank)
        if reversible:
            sb = state_memory(shape)
        else:
            sb = depth * shape.size * BYTES_PER_SCALAR
        rows.append(SweepRow(config, depth, s, kb / MB, sb / MB, (kb + sb) / MB))

    for n in input_sizes:
        shape = Shape(n, n, n, base.nchan)
        add("full/input_size", fixed_depth, fixed_coarsenings, shape, None)
        add("blr/input_size", fixed_depth, fixed_coarsenings, shape, block_rank)
        add("nonreversible/input_size", fixed_depth, fixed_coarsenings, shape, None, reversible=False)
    for depth in depth_range:
        add("full/depth", depth, fixed_coarsenings, base, None)
        add("blr/depth", depth, fixed_coarsenings, base, block_rank)
        add("nonreversible/depth", depth, fixed_coarsenings, base, None, reversible=False)
    for s in coarsening_range:
        add("full/coarsenings", fixed_depth, s, base, None)
        add("blr/coarsenings", fixed_depth, s, base, block_rank)
    return rows


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["config", "layers", "coarsenings", "kernel_MB", "state_MB", "total_MB"])
    for r in rows:
        w.writerow([r.config, r.layers, r.coarsenings,
                    repr(r.kernel_mb), repr(r.state_mb), repr(r.total_mb)])
    return buf.getvalue()


def format_report(rep: MemoryReport, label: str = "") -> str:
    """Human-readable table for stdout; one line per distinct layer shape
    run, then totals, with the accounting assumptions stated."""
    lines = []
    if label:
        lines.append(f"Memory report: {label}")
    lines.append(f"Assumptions: float32 scalars, 1 MB = 10^6 bytes, {STATE_COPIES} live state copies")
    lines.append(f"{'layer':>8}  {'kernel bytes':>14}")
    for i, b in enumerate(rep.kernel_bytes_per_layer):
        lines.append(f"{i:>8}  {b:>14,}")
    k, s, t = rep.rounded()
    lines.append(f"kernels: {rep.kernel_mb:.2f} MB (~{k} MB)")
    lines.append(f"states:  {rep.state_mb:.2f} MB (~{s} MB)")
    lines.append(f"total:   {rep.total_mb:.2f} MB (~{t} MB)")
    return "\n".join(lines)
