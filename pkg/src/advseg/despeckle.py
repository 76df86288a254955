"""Connected components and largest-component filtering in 2D and 3D."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume_store import LabelVolume

CONNECTIVITIES = {
    "2d-4": (2, 1),
    "2d-8": (2, 2),
    "3d-6": (3, 1),
    "3d-26": (3, 3),
}


def _connectivity_key(connectivity) -> str:
    if isinstance(connectivity, int):
        connectivity = {4: "2d-4", 8: "2d-8", 6: "3d-6", 26: "3d-26"}.get(connectivity, str(connectivity))
    key = str(connectivity).lower()
    if key not in CONNECTIVITIES:
        raise ValueError(f"unknown connectivity {connectivity!r}; expected one of {sorted(CONNECTIVITIES)}")
    return key


@dataclass(frozen=True, eq=False)
class ComponentLabeling:
    """Component ids per voxel (0 = background) and voxel count per id.

    ``component_sizes[i]`` is the size of component ``i + 1``. Ids follow
    first-encounter order in a C-order (row-major) scan.
    """

    labels: np.ndarray
    component_sizes: np.ndarray
    connectivity: str

    @property
    def count(self) -> int:
        return int(self.component_sizes.size)


def _as_array(mask) -> np.ndarray:
    if isinstance(mask, LabelVolume):
        return mask.labels
    return np.asarray(mask)


def connected_components(mask, connectivity="3d-26") -> ComponentLabeling:
    arr = _as_array(mask).astype(bool)
    key = _connectivity_key(connectivity)
    rank, conn = CONNECTIVITIES[key]
    if arr.ndim != rank:
        raise ValueError(f"connectivity {key} needs a {rank}D mask, got {arr.ndim}D")
    raw, n = ndimage.label(arr, structure=ndimage.generate_binary_structure(rank, conn))
    if n == 0:
        return ComponentLabeling(raw.astype(np.int32), np.zeros(0, dtype=np.int64), key)
    # renumber by first occurrence in scan order
    flat = raw.ravel()
    ids, first = np.unique(flat, return_index=True)
    keep = ids > 0
    ids, first = ids[keep], first[keep]
    order = ids[np.argsort(first, kind="stable")]
    remap = np.zeros(n + 1, dtype=np.int32)
    remap[order] = np.arange(1, n + 1, dtype=np.int32)
    labels = remap[raw]
    sizes = np.bincount(labels.ravel(), minlength=n + 1)[1:].astype(np.int64)
    return ComponentLabeling(labels, sizes, key)


def _keep_largest(arr: np.ndarray, connectivity: str) -> np.ndarray:
    cc = connected_components(arr, connectivity)
    if cc.count == 0:
        return np.zeros_like(arr, dtype=np.uint8)
    # argmax returns the first (lowest id = earliest scan position) of tied sizes
    keep = int(np.argmax(cc.component_sizes)) + 1
    return (cc.labels == keep).astype(np.uint8)


def largest_component_filter_3d(mask: LabelVolume, connectivity="3d-26") -> LabelVolume:
    """Keep only the largest 3D connected component."""
    return mask.with_labels(_keep_largest(mask.labels, connectivity))


def largest_component_filter_2d(mask: LabelVolume, connectivity="2d-8") -> LabelVolume:
    """Keep only the largest 2D component independently in every z-slice."""
    out = np.zeros_like(mask.labels)
    for z in range(mask.depth):
        if mask.labels[z].any():
            out[z] = _keep_largest(mask.labels[z], connectivity)
    return mask.with_labels(out)


def despeckle(mask: LabelVolume, mode: str, connectivity=None) -> LabelVolume:
    """Dispatch on ``mode`` in {"none", "2d", "3d"}."""
    if mode == "none":
        return mask
    if mode == "2d":
        return largest_component_filter_2d(mask, connectivity or "2d-8")
    if mode == "3d":
        return largest_component_filter_3d(mask, connectivity or "3d-26")
    raise ValueError(f"unknown despeckle mode {mode!r}")
