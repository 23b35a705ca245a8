"""Bit-exact file formats and data generation.

Tensor file format (little-endian throughout, platform independent):

    magic   4 bytes  b"RBLR"
    version u16      currently 1
    dtype   u8       1 = float32, 2 = float64
    rank    u8       number of dimensions
    dims    rank*u64
    payload raw scalars

For generic arrays (kernel stacks, label volumes) the payload is the C-order
flattening of ``dims``. For :class:`~rblr.tensor.Tensor5D` records the dims
are the logical (nx, ny, nz, nchan) and the payload is channel-major — i.e.
the (nchan, nx, ny, nz) C-order bytes — matching the in-memory block-vector
layout. Use the matching reader for each writer.

Checkpoints are zip containers of tensor records plus a JSON manifest
describing the network, so they round-trip the model bit-exactly.
"""

from __future__ import annotations

import json
import struct
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .convops import KernelStack
from .haar import ResolutionChange
from .network import LayerSpec, LinearHead, NetworkSpec
from .tensor import Shape, Tensor5D
from .training import SegmentationTask

MAGIC = b"RBLR"
FORMAT_VERSION = 1
_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}

CHECKPOINT_FORMAT = "rblr-checkpoint"
CHECKPOINT_VERSION = 1


class TensorFileError(ValueError):
    """Malformed tensor file."""


class BadMagicError(TensorFileError):
    """File does not start with the RBLR magic."""


class TruncatedPayloadError(TensorFileError):
    """Payload shorter (or longer) than the header's dims promise."""


class UnknownDtypeError(TensorFileError):
    """Dtype code not recognised."""


# ---------------------------------------------------------------------------
# Array / tensor records


def array_to_bytes(arr: np.ndarray) -> bytes:
    a = np.asarray(arr)
    if a.dtype.kind != "f" or a.dtype.itemsize not in (4, 8):
        raise UnknownDtypeError(f"only float32/float64 arrays are stored, got {a.dtype}")
    code = 1 if a.dtype.itemsize == 4 else 2
    header = MAGIC + struct.pack("<HBB", FORMAT_VERSION, code, a.ndim)
    dims = struct.pack(f"<{a.ndim}Q", *a.shape)
    payload = np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<")).tobytes()
    return header + dims + payload


def array_from_bytes(raw: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(raw) < 8:
        raise TruncatedPayloadError(f"{source}: truncated header ({len(raw)} bytes)")
    if raw[:4] != MAGIC:
        raise BadMagicError(f"{source}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    version, code, rank = struct.unpack("<HBB", raw[4:8])
    if version != FORMAT_VERSION:
        raise TensorFileError(f"{source}: unsupported format version {version}")
    dtype = _DTYPE_CODES.get(code)
    if dtype is None:
        raise UnknownDtypeError(f"{source}: unknown dtype code {code}")
    dims_end = 8 + 8 * rank
    if len(raw) < dims_end:
        raise TruncatedPayloadError(f"{source}: truncated dims (rank {rank})")
    shape = struct.unpack(f"<{rank}Q", raw[8:dims_end])
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
    payload = raw[dims_end:]
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"{source}: truncated payload, expected {expected} bytes for dims "
            f"{tuple(shape)}, found {len(payload)}"
        )
    if len(payload) > expected:
        raise TruncatedPayloadError(
            f"{source}: {len(payload) - expected} trailing bytes after payload"
        )
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    return arr.astype(arr.dtype.newbyteorder("="))


def write_array(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(array_to_bytes(arr))


def read_array(path: str | Path) -> np.ndarray:
    p = Path(path)
    return array_from_bytes(p.read_bytes(), source=str(p))


def tensor_to_bytes(t: Tensor5D) -> bytes:
    """Tensor record: dims stored logically, payload channel-major."""
    raw = array_to_bytes(t.data)
    d = t.dims
    dims = struct.pack("<4Q", d.nx, d.ny, d.nz, d.nchan)
    return raw[:8] + dims + raw[8 + 8 * 4:]


def tensor_from_bytes(raw: bytes, source: str = "<bytes>") -> Tensor5D:
    arr = array_from_bytes(raw, source)
    if arr.ndim != 4:
        raise TensorFileError(f"{source}: tensor record must have rank 4, got {arr.ndim}")
    nx, ny, nz, nchan = arr.shape
    return Tensor5D(arr.reshape(nchan, nx, ny, nz))


def write_tensor(path: str | Path, t: Tensor5D) -> None:
    Path(path).write_bytes(tensor_to_bytes(t))


def read_tensor(path: str | Path) -> Tensor5D:
    p = Path(path)
    return tensor_from_bytes(p.read_bytes(), source=str(p))


# ---------------------------------------------------------------------------
# Checkpoints


@dataclass
class Checkpoint:
    spec: NetworkSpec
    stacks: list[KernelStack]
    head: LinearHead | None
    extra: dict


def save_checkpoint(
    path: str | Path,
    spec: NetworkSpec,
    stacks: Sequence[KernelStack],
    head: LinearHead | None = None,
    extra: dict | None = None,
) -> None:
    if len(stacks) != spec.depth:
        raise ValueError(f"{spec.depth} layers but {len(stacks)} kernel stacks")
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "h": spec.h,
        "input_shape": list(spec.input_shape),
        "layers": [
            {"m": l.m, "n": l.n, "resolution": l.resolution.value} for l in spec.layers
        ],
        "head": None if head is None else {"n_classes": head.n_classes,
                                           "n_channels": head.n_channels},
        "extra": extra or {},
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as z:
        z.writestr("manifest.json", json.dumps(manifest, indent=1, sort_keys=True))
        for i, ks in enumerate(stacks):
            z.writestr(f"layer_{i:04d}.weights", array_to_bytes(ks.weights))
            z.writestr(f"layer_{i:04d}.bias", array_to_bytes(ks.bias))
        if head is not None:
            z.writestr("head.weights", array_to_bytes(head.weights))
            z.writestr("head.bias", array_to_bytes(head.bias))


def load_checkpoint(path: str | Path) -> Checkpoint:
    with zipfile.ZipFile(path, "r") as z:
        try:
            manifest = json.loads(z.read("manifest.json"))
        except KeyError:
            raise TensorFileError(f"{path}: not a checkpoint (no manifest.json)") from None
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise TensorFileError(f"{path}: unknown checkpoint format {manifest.get('format')!r}")
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise TensorFileError(f"{path}: unsupported checkpoint version {manifest.get('version')!r}")
        layers = tuple(
            LayerSpec(d["m"], d["n"], ResolutionChange(d["resolution"]))
            for d in manifest["layers"]
        )
        spec = NetworkSpec(layers, manifest["h"], Shape(*manifest["input_shape"]))
        stacks = []
        for i, layer in enumerate(layers):
            w = array_from_bytes(z.read(f"layer_{i:04d}.weights"), f"{path}:layer_{i:04d}.weights")
            b = array_from_bytes(z.read(f"layer_{i:04d}.bias"), f"{path}:layer_{i:04d}.bias")
            ks = KernelStack(w, b)
            if (ks.m, ks.n) != (layer.m, layer.n):
                raise TensorFileError(
                    f"{path}: layer {i} stack is {ks.m}x{ks.n}, manifest says {layer.m}x{layer.n}"
                )
            stacks.append(ks)
        head = None
        if manifest.get("head") is not None:
            head = LinearHead(
                array_from_bytes(z.read("head.weights"), f"{path}:head.weights"),
                array_from_bytes(z.read("head.bias"), f"{path}:head.bias"),
            )
        return Checkpoint(spec, stacks, head, manifest.get("extra", {}))


# ---------------------------------------------------------------------------
# Synthetic segmentation task


def make_synthetic_video(
    dims: tuple[int, int, int],
    seed: int,
    coarsenings: int = 2,
    noise: float = 0.1,
    n_channels: int = 3,
) -> tuple[Tensor5D, np.ndarray, tuple[int, ...]]:
    """A bright square moving across a noisy video, with sparse labels.

    The volume is (nx, ny, nt): frames of nx*ny pixels stacked along the
    third axis. A square object of roughly a third of the frame width drifts
    corner to corner; ``labels`` marks it as class 1 against background 0 on
    every slice, and ``labeled_slices`` names the exactly three time slices
    treated as supervised. Deterministic given the seed. Spatial/temporal
    dims must be divisible by 2**coarsenings so the multilevel network can
    coarsen the volume.

    Returns ``(video, labels, labeled_slices)``.
    """
    nx, ny, nt = (int(d) for d in dims)
    div = 2**coarsenings
    for name, d in zip("nx ny nt".split(), (nx, ny, nt)):
        if d < div or d % div != 0:
            raise ValueError(
                f"{name}={d} not divisible by 2^{coarsenings}={div}; "
                f"coarsening needs even splits at every level"
            )
    if nt < 3:
        raise ValueError(f"need at least 3 time slices to label, got {nt}")
    rng = np.random.default_rng(seed)

    side = max(2, round(min(nx, ny) / 3))
    video = rng.normal(0.0, noise, size=(n_channels, nx, ny, nt))
    labels = np.zeros((nx, ny, nt), dtype=np.int64)
    # Distinct mean intensity per channel on the object, so segmentation is
    # learnable from local evidence but not a fixed threshold on one channel.
    object_levels = 0.6 + 0.4 * rng.random(n_channels)
    for t in range(nt):
        frac = t / max(nt - 1, 1)
        x0 = round(frac * (nx - side))
        y0 = round(frac * (ny - side))
        labels[x0:x0 + side, y0:y0 + side, t] = 1
        video[:, x0:x0 + side, y0:y0 + side, t] += object_levels[:, None, None]

    labeled = (0, nt // 2, nt - 1)
    frac_fg = labels.mean()
    if not 0.01 < frac_fg < 0.50:
        raise AssertionError(f"object fraction {frac_fg:.3f} outside (1%, 50%)")
    return Tensor5D(video), labels, labeled


def make_synthetic_task(
    dims: tuple[int, int, int],
    seed: int,
    coarsenings: int = 2,
    noise: float = 0.1,
    n_channels: int = 3,
) -> SegmentationTask:
    """Wrap :func:`make_synthetic_video` as a ready-to-train task.

    The supervision mask covers exactly the labeled slices; ``labels`` still
    holds the full ground truth on every slice, so held-out slices can be
    scored after training.
    """
    video, labels, labeled = make_synthetic_video(
        dims, seed, coarsenings=coarsenings, noise=noise, n_channels=n_channels
    )
    mask = np.zeros(labels.shape, dtype=bool)
    for t in labeled:
        mask[:, :, t] = True
    return SegmentationTask(
        video=video,
        labels=labels,
        mask=mask,
        n_classes=2,
        labeled_slices=labeled,
    )


# ---------------------------------------------------------------------------
# Raw frame ingestion


def import_frames(manifest_path: str | Path) -> Tensor5D:
    """Stack raw planar frames into a volume.

    The manifest's first line is ``width height channels``; each following
    non-empty line is a path (relative to the manifest) to one frame stored
    as raw little-endian float32, channel plane after channel plane, each
    plane row-major (height rows of width scalars). Frames stack along the
    third axis, giving a (width, height, n_frames, channels) tensor.
    """
    mpath = Path(manifest_path)
    try:
        lines = [ln.strip() for ln in mpath.read_text().splitlines()]
    except OSError as e:
        raise ValueError(f"cannot read manifest {mpath}: {e}") from e
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if not lines:
        raise ValueError(f"{mpath}: empty manifest")
    header = lines[0].split()
    if len(header) != 3:
        raise ValueError(f"{mpath}: header must be 'width height channels', got {lines[0]!r}")
    try:
        width, height, channels = (int(v) for v in header)
    except ValueError:
        raise ValueError(f"{mpath}: non-integer header fields in {lines[0]!r}") from None
    if min(width, height, channels) < 1:
        raise ValueError(f"{mpath}: header values must be positive, got {lines[0]!r}")
    frame_files = lines[1:]
    if not frame_files:
        raise ValueError(f"{mpath}: manifest lists no frames")

    expected = width * height * channels * 4
    frames = []
    for rel in frame_files:
        fpath = mpath.parent / rel
        if not fpath.is_file():
            raise ValueError(f"missing frame file {fpath}")
        raw = fpath.read_bytes()
        if len(raw) != expected:
            raise ValueError(
                f"frame {fpath} has {len(raw)} bytes, expected {expected} "
                f"({width}x{height}x{channels} float32)"
            )
        plane = np.frombuffer(raw, dtype="<f4").reshape(channels, height, width)
        frames.append(plane)

    # (frame, channel, row=y, col=x) -> (channel, x, y, frame)
    stack = np.stack(frames).transpose(1, 3, 2, 0)
    return Tensor5D(np.ascontiguousarray(stack, dtype=np.float32))
