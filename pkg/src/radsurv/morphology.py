"""3D binary morphology with spherical structuring elements.

Erosion synthesizes under-segmentation, dilation over-segmentation of tumour
masks.  The structuring element is a digitized ball of radius ``r`` in voxel
index units.  Out-of-bounds voxels count as background for both operations, so
erosion also shrinks masks touching the grid border.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError
from .volume import Mask

__all__ = ["StructuringElement", "ball_element", "dilate", "erode"]


@dataclass(frozen=True, eq=False)
class StructuringElement:
    """Set of integer voxel offsets ``(dx, dy, dz)`` with ``|offset|^2 <= r^2``."""

    radius_voxels: int
    offsets: np.ndarray  # (k, 3) int array

    def __len__(self) -> int:
        return len(self.offsets)


def ball_element(r: int) -> StructuringElement:
    """Digitized ball of radius ``r`` voxels (Euclidean norm in index units)."""
    if int(r) != r or r < 1:
        raise ArgumentError(f"structuring element radius must be an integer >= 1, got {r!r}")
    r = int(r)
    rng = np.arange(-r, r + 1)
    dx, dy, dz = np.meshgrid(rng, rng, rng, indexing="ij")
    keep = dx * dx + dy * dy + dz * dz <= r * r
    offsets = np.stack([dx[keep], dy[keep], dz[keep]], axis=1)
    return StructuringElement(radius_voxels=r, offsets=offsets)


def _shift(values: np.ndarray, offset: np.ndarray) -> np.ndarray:
    """values translated by +offset, vacated cells filled with background."""
    out = np.zeros_like(values)
    src = [slice(None)] * 3
    dst = [slice(None)] * 3
    for axis, d in enumerate(offset):
        n = values.shape[axis]
        if abs(d) >= n:
            return out
        if d >= 0:
            dst[axis] = slice(d, n)
            src[axis] = slice(0, n - d)
        else:
            dst[axis] = slice(0, n + d)
            src[axis] = slice(-d, n)
    out[tuple(dst)] = values[tuple(src)]
    return out


def dilate(m: Mask, e: StructuringElement) -> Mask:
    """Voxel is foreground iff any element offset reaches back into the mask."""
    acc = np.zeros(m.dims, dtype=bool)
    values = np.asarray(m.values)
    for offset in e.offsets:
        acc |= _shift(values, offset)
    return Mask(values=acc, spacing=m.spacing, origin=m.origin)


def erode(m: Mask, e: StructuringElement) -> Mask:
    """Voxel is foreground iff every element offset lands on in-bounds foreground."""
    acc = np.ones(m.dims, dtype=bool)
    values = np.asarray(m.values)
    for offset in e.offsets:
        acc &= _shift(values, -offset)
    return Mask(values=acc, spacing=m.spacing, origin=m.origin)
