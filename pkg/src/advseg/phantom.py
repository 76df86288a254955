"""Synthetic organ phantoms: an intensity volume plus its ground-truth mask.

The organ is an ellipsoid whose radius is modulated by low-order angular
terms. In scaled coordinates ``q = ((x-cx)/a, (y-cy)/b, (z-cz)/c)`` a voxel
is foreground when ``|q| <= 1 + delta(q/|q|)``, with

    delta(u) = sum_j coef_j * Y_j(u),   |delta| <= perturbation

over the eight terms ``ux, uy, uz, ux*uy, uy*uz, ux*uz, (ux^2-uy^2),
(3uz^2-1)/2``. The shape is star-shaped around the center, so the mask is
a single blob.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, PlacementError
from .rng import STREAM_DATASET, STREAM_PHANTOM, STREAM_SPECKLE, make_rng
from .volume_store import LabelVolume, Volume, save_labels, save_volume

_N_TERMS = 8


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (64, 64, 24)  # (W, H, D)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    organ_axes: tuple[float, float, float] = (20.0, 16.0, 8.0)  # semi-axes in voxels (x, y, z)
    intensity_fg: float = 600.0
    intensity_bg: float = 200.0
    noise_sigma: float = 40.0
    bias_amplitude: float = 0.2
    seed: int = 0
    perturbation: float = 0.1

    def validate(self) -> None:
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ConfigError(f"dims must be three positive ints, got {self.dims}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if not 0 <= self.bias_amplitude < 1:
            raise ConfigError("bias_amplitude must lie in [0, 1)")
        if not 0 <= self.perturbation < 1:
            raise ConfigError("perturbation must lie in [0, 1)")
        if min(self.organ_axes) <= 0:
            raise ConfigError("organ semi-axes must be positive")
        for n, r in zip(self.dims, self.organ_axes):
            if r * (1 + self.perturbation) > (n - 1) / 2:
                raise ConfigError(
                    f"organ ellipsoid (semi-axes {self.organ_axes}, perturbation {self.perturbation}) "
                    f"does not fit inside dims {self.dims}"
                )


def _angular_terms(ux, uy, uz):
    return [ux, uy, uz, ux * uy, uy * uz, ux * uz, ux * ux - uy * uy, 0.5 * (3 * uz * uz - 1)]


def _grid(dims):
    W, H, D = dims
    z, y, x = np.meshgrid(np.arange(D), np.arange(H), np.arange(W), indexing="ij")
    return x.astype(np.float64), y.astype(np.float64), z.astype(np.float64)


def organ_mask(spec: PhantomSpec, rng) -> np.ndarray:
    W, H, D = spec.dims
    a, b, c = spec.organ_axes
    x, y, z = _grid(spec.dims)
    qx, qy, qz = (x - (W - 1) / 2) / a, (y - (H - 1) / 2) / b, (z - (D - 1) / 2) / c
    rho = np.sqrt(qx * qx + qy * qy + qz * qz)
    coef = rng.uniform(_N_TERMS, -1.0, 1.0) * (spec.perturbation / _N_TERMS)
    safe = np.where(rho > 0, rho, 1.0)
    terms = _angular_terms(qx / safe, qy / safe, qz / safe)
    delta = sum(cj * t for cj, t in zip(coef, terms))
    return (rho <= 1.0 + delta).astype(np.uint8)


def bias_field(spec: PhantomSpec, rng) -> np.ndarray:
    """Smooth field in [-1, 1]: mean of three low-frequency plane waves."""
    W, H, D = spec.dims
    x, y, z = _grid(spec.dims)
    field = np.zeros(x.shape)
    for _ in range(3):
        direction = rng.normal(3)
        direction /= np.linalg.norm(direction)
        freq = rng.uniform(None, 0.5, 1.5)
        phase = rng.uniform(None, 0.0, 2 * np.pi)
        s = direction[0] * x / W + direction[1] * y / H + direction[2] * z / D
        field += np.cos(2 * np.pi * freq * s + phase)
    return field / 3.0


def make_phantom(spec: PhantomSpec) -> tuple[Volume, LabelVolume]:
    spec.validate()
    rng = make_rng(spec.seed, STREAM_PHANTOM)
    mask = organ_mask(spec, rng)
    intensity = spec.intensity_bg + (spec.intensity_fg - spec.intensity_bg) * mask.astype(np.float64)
    bias = bias_field(spec, rng)
    if spec.bias_amplitude > 0:
        intensity = intensity * (1.0 + spec.bias_amplitude * bias)
    if spec.noise_sigma > 0:
        intensity = intensity + rng.normal(intensity.shape, scale=spec.noise_sigma)
    return Volume(intensity, spec.spacing), LabelVolume(mask, spec.spacing)


def _ball(radius: int) -> np.ndarray:
    r = int(radius)
    z, y, x = np.mgrid[-r:r + 1, -r:r + 1, -r:r + 1]
    return x * x + y * y + z * z <= r * r


def corrupt_prediction(lv: LabelVolume, n_speckles: int, speckle_radius: int, seed: int,
                       max_tries: int = 1000) -> LabelVolume:
    """Add ``n_speckles`` isolated spherical false positives.

    Each blob lies fully inside the grid and shares no 26-neighbor with the
    mask or with earlier blobs, so every blob is its own component.
    """
    if n_speckles == 0:
        return lv
    out = lv.labels.copy()
    ball = _ball(speckle_radius)
    r = int(speckle_radius)
    D, H, W = out.shape
    if min(D, H, W) < 2 * r + 1:
        raise PlacementError(f"speckle radius {r} does not fit in a {W}x{H}x{D} grid")
    cube = np.ones((3, 3, 3), dtype=bool)
    blocked = ndimage.binary_dilation(out.astype(bool), structure=cube)
    rng = make_rng(seed, STREAM_SPECKLE)
    for s in range(n_speckles):
        for _ in range(max_tries):
            cz = r + int(rng.integers(D - 2 * r))
            cy = r + int(rng.integers(H - 2 * r))
            cx = r + int(rng.integers(W - 2 * r))
            window = (slice(cz - r, cz + r + 1), slice(cy - r, cy + r + 1), slice(cx - r, cx + r + 1))
            if not (blocked[window] & ball).any():
                out[window] |= ball.astype(np.uint8)
                grown = np.zeros_like(blocked)
                grown[window] = ball
                blocked |= ndimage.binary_dilation(grown, structure=cube)
                break
        else:
            raise PlacementError(f"could not place speckle {s + 1} of {n_speckles} after {max_tries} tries")
    return lv.with_labels(out)


def make_dataset(out_dir, count: int, seed: int, dims=(64, 64, 24), spacing=(1.5, 1.5, 3.0),
                 validation_fraction: float = 0.2) -> dict:
    """Write ``count`` phantom cases plus ``manifest.json`` with a train/validation split.

    Per-case organ size, intensities, and seeds are drawn from ``seed``.
    """
    if count < 1:
        raise ConfigError("count must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = make_rng(seed, STREAM_DATASET)
    W, H, D = dims
    entries = []
    for i in range(count):
        pert = 0.15
        axes = tuple(
            float(min(rng.uniform(None, 0.22, 0.34) * n, (n - 1) / 2 / (1 + pert) - 0.5)) for n in (W, H, D)
        )
        bg = float(rng.uniform(None, 150.0, 250.0))
        spec = PhantomSpec(
            dims=tuple(dims),
            spacing=tuple(spacing),
            organ_axes=axes,
            intensity_fg=bg + float(rng.uniform(None, 250.0, 450.0)),
            intensity_bg=bg,
            noise_sigma=float(rng.uniform(None, 20.0, 50.0)),
            bias_amplitude=float(rng.uniform(None, 0.05, 0.25)),
            seed=int(rng.integers(2 ** 62)),
            perturbation=pert,
        )
        vol, lab = make_phantom(spec)
        name = f"case_{i:03d}"
        save_volume(vol, out / f"{name}.json")
        save_labels(lab, out / f"{name}_labels.json")
        entries.append({"case": name, "volume": f"{name}.json", "labels": f"{name}_labels.json"})
    n_val = 0 if count < 2 else max(1, int(round(validation_fraction * count)))
    manifest = {
        "seed": seed,
        "dims": list(dims),
        "train": entries[: count - n_val],
        "validation": entries[count - n_val:],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest
