"""Volumes on disk and in memory.

A volume is stored as a JSON sidecar ``<name>.json``::

    {"width": W, "height": H, "depth": D, "spacing": [sx, sy, sz], "dtype": "f32"}

next to ``<name>.raw`` holding ``W*H*D`` little-endian values in (z, y, x)
row-major order. Intensity volumes use ``f32``; label volumes use ``u8``.

In memory the voxel grid is a NumPy array of shape ``(depth, height, width)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidVolumeError, VolumeFormatError

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


def _check_spacing(spacing) -> tuple[float, float, float]:
    sp = tuple(float(s) for s in spacing)
    if len(sp) != 3:
        raise InvalidVolumeError(f"spacing must have 3 components, got {len(sp)}")
    if not all(math.isfinite(s) and s > 0 for s in sp):
        raise InvalidVolumeError(f"spacing components must be positive and finite: {sp}")
    return sp


@dataclass(frozen=True, eq=False)
class Volume:
    """Scalar intensity grid with per-axis spacing (sx, sy, sz) in mm.

    Voxels are held as float32, matching the on-disk payload.
    """

    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        v = np.asarray(self.voxels)
        if v.ndim != 3:
            raise InvalidVolumeError(f"voxels must be 3D (z, y, x), got shape {v.shape}")
        if 0 in v.shape:
            raise InvalidVolumeError(f"volume dimensions must be nonzero, got {v.shape}")
        v = v.astype(np.float32)
        if not np.all(np.isfinite(v)):
            raise InvalidVolumeError("volume contains non-finite intensities")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "voxels", v)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def depth(self) -> int:
        return self.voxels.shape[0]

    @property
    def height(self) -> int:
        return self.voxels.shape[1]

    @property
    def width(self) -> int:
        return self.voxels.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.voxels.shape == other.voxels.shape
            and bool(np.array_equal(self.voxels, other.voxels))
        )


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """Binary mask (0 background, 1 foreground) aligned with a :class:`Volume`."""

    labels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 3:
            raise InvalidVolumeError(f"labels must be 3D (z, y, x), got shape {lab.shape}")
        if 0 in lab.shape:
            raise InvalidVolumeError(f"label dimensions must be nonzero, got {lab.shape}")
        if lab.dtype == bool:
            lab = lab.astype(np.uint8)
        elif not np.all((lab == 0) | (lab == 1)):
            raise InvalidVolumeError("labels must take only the values 0 and 1")
        lab = lab.astype(np.uint8)
        lab.setflags(write=False)
        object.__setattr__(self, "labels", lab)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def depth(self) -> int:
        return self.labels.shape[0]

    @property
    def height(self) -> int:
        return self.labels.shape[1]

    @property
    def width(self) -> int:
        return self.labels.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.labels.shape

    @property
    def mask(self) -> np.ndarray:
        return self.labels.astype(bool)

    def count(self) -> int:
        return int(self.labels.sum(dtype=np.int64))

    def with_labels(self, labels: np.ndarray) -> "LabelVolume":
        return LabelVolume(labels, self.spacing)

    def __eq__(self, other):
        if not isinstance(other, LabelVolume):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.labels.shape == other.labels.shape
            and bool(np.array_equal(self.labels, other.labels))
        )


@dataclass(frozen=True)
class NormalizationRecord:
    min_value: float
    max_value: float


@dataclass(frozen=True, eq=False)
class SliceGroup:
    """``2k+1`` normalized neighbor slices centered on ``center_index``."""

    center_index: int
    k: int
    channels: np.ndarray  # (2k+1, H, W)


def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".raw"):
        p = p.with_suffix("")
    return p.with_suffix(".json"), p.with_suffix(".raw")


def _read(path, expected_dtype: str):
    sidecar, raw = _paths(path)
    if not sidecar.is_file():
        raise VolumeFormatError(f"missing sidecar {sidecar}")
    if not raw.is_file():
        raise VolumeFormatError(f"missing payload {raw}")
    try:
        meta = json.loads(sidecar.read_text())
        w, h, d = int(meta["width"]), int(meta["height"]), int(meta["depth"])
        spacing = meta["spacing"]
        dtype = meta["dtype"]
    except (KeyError, TypeError, ValueError) as exc:
        raise VolumeFormatError(f"malformed sidecar {sidecar}: {exc}") from exc
    if dtype != expected_dtype:
        raise VolumeFormatError(f"{sidecar}: expected dtype {expected_dtype!r}, got {dtype!r}")
    if min(w, h, d) <= 0:
        raise VolumeFormatError(f"{sidecar}: dimensions must be positive, got {w}x{h}x{d}")
    np_dtype = _DTYPES[dtype]
    payload = raw.read_bytes()
    expected = w * h * d * np_dtype.itemsize
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{raw}: sidecar declares {w}x{h}x{d} ({expected} bytes) but payload has {len(payload)} bytes"
        )
    data = np.frombuffer(payload, dtype=np_dtype).reshape(d, h, w)
    return data, spacing


def _write(path, data: np.ndarray, spacing, dtype: str) -> None:
    sidecar, raw = _paths(path)
    d, h, w = data.shape
    meta = {"width": w, "height": h, "depth": d, "spacing": list(spacing), "dtype": dtype}
    raw.parent.mkdir(parents=True, exist_ok=True)
    raw.write_bytes(np.ascontiguousarray(data, dtype=_DTYPES[dtype]).tobytes())
    sidecar.write_text(json.dumps(meta, indent=2) + "\n")


def load_volume(path) -> Volume:
    data, spacing = _read(path, "f32")
    if not np.all(np.isfinite(data)):
        raise InvalidVolumeError(f"{path}: payload contains non-finite values")
    return Volume(data.astype(np.float32), tuple(spacing))


def save_volume(v: Volume, path) -> None:
    if not isinstance(v, Volume):
        raise InvalidVolumeError("save_volume expects a Volume")
    _write(path, v.voxels, v.spacing, "f32")


def load_labels(path) -> LabelVolume:
    data, spacing = _read(path, "u8")
    return LabelVolume(data, tuple(spacing))


def save_labels(lv: LabelVolume, path) -> None:
    if not isinstance(lv, LabelVolume):
        raise InvalidVolumeError("save_labels expects a LabelVolume")
    _write(path, lv.labels, lv.spacing, "u8")


def normalize(v: Volume) -> tuple[Volume, NormalizationRecord]:
    """Min-max rescale over the whole volume to [0, 1].

    A constant volume maps to all zeros.
    """
    x = v.voxels.astype(np.float64)
    lo, hi = float(x.min()), float(x.max())
    if hi > lo:
        out = (x - lo) / (hi - lo)
    else:
        out = np.zeros_like(x)
    return Volume(out.astype(np.float32), v.spacing), NormalizationRecord(lo, hi)


def slice_group(v_normalized: Volume, i: int, k: int) -> SliceGroup:
    """Slices ``i-k .. i+k``, replicating edge slices beyond the volume."""
    depth = v_normalized.depth
    if not 0 <= i < depth:
        raise IndexError(f"slice index {i} out of range [0, {depth})")
    if k < 0:
        raise ValueError(f"neighborhood radius must be >= 0, got {k}")
    idx = np.clip(np.arange(i - k, i + k + 1), 0, depth - 1)
    return SliceGroup(center_index=i, k=k, channels=v_normalized.voxels[idx].copy())


def slice_groups(v_normalized: Volume, k: int) -> np.ndarray:
    """All slice groups of a volume stacked as a (depth, 2k+1, H, W) batch."""
    depth = v_normalized.depth
    centers = np.arange(depth)[:, None] + np.arange(-k, k + 1)[None, :]
    return v_normalized.voxels[np.clip(centers, 0, depth - 1)]
