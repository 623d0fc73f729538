"""Iterative non-maximum suppression on density maps.

Candidates are voxels that are >= all of their 26 neighbors and strictly
above both the threshold and zero (zero plateaus are never peaks, which
keeps threshold-0 proposal mode finite). Candidates are processed in
descending value order (ties broken lexicographically by voxel index) and
accepted unless a previously accepted peak lies closer than the minimum
distance. This is equivalent to classic iterative NMS but runs in
O(V + C log C) via a spatial hash with bucket size equal to the radius.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .coords import CoordSet
from .volume import Volume3D


@dataclass(frozen=True)
class NmsConfig:
    min_distance_um: float = 4.0
    threshold: float = 0.0

    def __post_init__(self):
        if self.min_distance_um <= 0:
            raise ValueError("min_distance must be positive")
        if self.threshold < 0:
            raise ValueError("threshold must be >= 0 (0 selects proposal mode)")


def local_maxima(dm: Volume3D, threshold: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """(N, 3) voxel indices and values of 26-neighborhood maxima above threshold."""
    data = dm.data
    if not np.all(np.isfinite(data)):
        raise ValueError("density map must be finite-valued")
    footprint_max = ndimage.maximum_filter(data, size=3, mode="constant", cval=-np.inf)
    mask = (data >= footprint_max) & (data > threshold) & (data > 0)
    idx = np.argwhere(mask)
    return idx, data[mask]


def detect_peaks(dm: Volume3D, cfg: NmsConfig = NmsConfig()) -> CoordSet:
    """NMS peak coordinates (voxel centers, micrometers) with their DM values.

    Output is sorted by descending value, ties lexicographic by (z, y, x);
    every returned pair of peaks is at least ``min_distance_um`` apart.
    """
    idx, values = local_maxima(dm, cfg.threshold)
    if idx.shape[0] == 0:
        return CoordSet.empty()
    order = np.lexsort((idx[:, 2], idx[:, 1], idx[:, 0], -values))
    idx = idx[order]
    values = values[order]
    vs = np.asarray(dm.voxel_size, dtype=np.float64)
    coords = (idx.astype(np.float64) + 0.5) * vs
    radius = cfg.min_distance_um
    r2 = radius * radius
    buckets: dict[tuple[int, int, int], list[int]] = {}
    accepted: list[int] = []
    keys = np.floor(coords / radius).astype(np.int64)
    for i in range(coords.shape[0]):
        kz, ky, kx = keys[i]
        ok = True
        c = coords[i]
        for bz in (kz - 1, kz, kz + 1):
            for by in (ky - 1, ky, ky + 1):
                for bx in (kx - 1, kx, kx + 1):
                    for j in buckets.get((bz, by, bx), ()):
                        d = coords[j] - c
                        if d[0] * d[0] + d[1] * d[1] + d[2] * d[2] < r2:
                            ok = False
                            break
                    if not ok:
                        break
                if not ok:
                    break
            if not ok:
                break
        if ok:
            buckets.setdefault((kz, ky, kx), []).append(i)
            accepted.append(i)
    sel = np.asarray(accepted, dtype=int)
    return CoordSet(coords[sel], dm_value=values[sel].astype(np.float64))
