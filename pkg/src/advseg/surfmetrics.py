"""Volume-overlap and surface-distance metrics with challenge-style scoring.

Boundary voxels are foreground voxels with at least one 6-neighbor that is
background or outside the grid; distances are Euclidean between boundary
voxel centers in millimeters, with voxel ``(z, y, x)`` at
``(x*sx, y*sy, z*sz)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import EmptyMaskError, ShapeMismatchError
from .volume_store import LabelVolume

METRICS = ("voe", "ravd", "assd", "rmssd", "mssd")

DEFAULT_REFERENCES = {"voe": 6.4, "ravd": 4.7, "assd": 1.0, "rmssd": 1.8, "mssd": 19.0}


def _mask(m) -> np.ndarray:
    if isinstance(m, LabelVolume):
        return m.mask
    return np.asarray(m).astype(bool)


def _pair(a, b):
    a, b = _mask(a), _mask(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def volumetric_overlap_error(a, b) -> float:
    """``100 * (1 - |A & B| / |A | B|)`` in percent."""
    a, b = _pair(a, b)
    union = int(np.count_nonzero(a | b))
    if union == 0:
        raise EmptyMaskError("volumetric overlap error is undefined for two empty masks")
    inter = int(np.count_nonzero(a & b))
    return 100.0 * (1.0 - inter / union)


def relative_absolute_volume_difference(a, b) -> float:
    """``100 * | |A| - |B| | / |B|`` with ``b`` the reference."""
    a, b = _pair(a, b)
    nb = int(np.count_nonzero(b))
    if nb == 0:
        raise EmptyMaskError("reference mask is empty")
    return 100.0 * abs(int(np.count_nonzero(a)) - nb) / nb


def dice(a, b) -> float:
    """Debug extra; not one of the five scored metrics."""
    a, b = _pair(a, b)
    total = int(np.count_nonzero(a)) + int(np.count_nonzero(b))
    if total == 0:
        raise EmptyMaskError("dice is undefined for two empty masks")
    return 2.0 * int(np.count_nonzero(a & b)) / total


def boundary_points(mask, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """(n, 3) array of boundary voxel centers as (x, y, z) in mm."""
    m = _mask(mask)
    if not m.any():
        return np.zeros((0, 3))
    interior = ndimage.binary_erosion(m, structure=ndimage.generate_binary_structure(3, 1), border_value=0)
    zyx = np.argwhere(m & ~interior)
    sx, sy, sz = spacing
    return np.column_stack([zyx[:, 2] * sx, zyx[:, 1] * sy, zyx[:, 0] * sz]).astype(np.float64)


def symmetric_surface_distances(a, b, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Nearest-boundary distances from A's boundary to B's, followed by B's to A's."""
    a, b = _pair(a, b)
    pa, pb = boundary_points(a, spacing), boundary_points(b, spacing)
    if len(pa) == 0 or len(pb) == 0:
        raise EmptyMaskError("surface distances need two nonempty masks")
    d_ab, _ = cKDTree(pb).query(pa, k=1)
    d_ba, _ = cKDTree(pa).query(pb, k=1)
    return np.concatenate([d_ab, d_ba])


def _check(distances):
    d = np.asarray(distances, dtype=np.float64)
    if d.size == 0:
        raise EmptyMaskError("empty distance set")
    return d


def assd(distances) -> float:
    d = _check(distances)
    return math.fsum(d) / d.size


def rmssd(distances) -> float:
    d = _check(distances)
    return math.sqrt(math.fsum(d * d) / d.size)


def mssd(distances) -> float:
    return float(_check(distances).max())


@dataclass
class ScoreMapping:
    """Metric magnitude that maps to a score of 75, per metric."""

    references: dict = field(default_factory=lambda: dict(DEFAULT_REFERENCES))

    def __post_init__(self):
        refs = {**DEFAULT_REFERENCES, **self.references}
        for name, v in refs.items():
            if name not in METRICS:
                raise ValueError(f"unknown metric {name!r} in score mapping")
            if not v > 0:
                raise ValueError(f"reference for {name} must be > 0, got {v}")
        self.references = refs


@dataclass
class MetricReport:
    voe: float
    ravd: float
    assd: float
    rmssd: float
    mssd: float
    scores: dict
    mean_score: float

    def metrics(self) -> dict:
        return {m: getattr(self, m) for m in METRICS}


def challenge_score(metrics: dict, mapping: ScoreMapping | None = None) -> tuple[dict, float]:
    """``max(0, 100 - 25 * metric / reference)`` per metric, and their mean."""
    mapping = mapping or ScoreMapping()
    scores = {}
    for name in METRICS:
        value = metrics[name]
        s = 100.0 - 25.0 * value / mapping.references[name]
        scores[name] = max(0.0, s) if not math.isnan(s) else 0.0
    return scores, math.fsum(scores.values()) / len(METRICS)


def evaluate(pred, ref, spacing=None, mapping: ScoreMapping | None = None) -> MetricReport:
    """All five metrics for one (prediction, reference) pair.

    An empty prediction against a nonempty reference reports infinite
    surface distances (score 0) so the report is always complete.
    """
    if spacing is None:
        spacing = ref.spacing if isinstance(ref, LabelVolume) else (1.0, 1.0, 1.0)
    a, b = _pair(pred, ref)
    if not b.any():
        raise EmptyMaskError("reference mask is empty")
    voe = volumetric_overlap_error(a, b)
    ravd = relative_absolute_volume_difference(a, b)
    if a.any():
        d = symmetric_surface_distances(a, b, spacing)
        values = {"assd": assd(d), "rmssd": rmssd(d), "mssd": mssd(d)}
    else:
        values = {"assd": math.inf, "rmssd": math.inf, "mssd": math.inf}
    metrics = {"voe": voe, "ravd": ravd, **values}
    scores, mean = challenge_score(metrics, mapping)
    return MetricReport(scores=scores, mean_score=mean, **metrics)
