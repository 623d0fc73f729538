"""Summary-statistics feature vectors around cell proposals.

For each proposal, cubes of several physical side lengths are clipped out
of every available map (density map and, when present, the two uncertainty
maps) and summarized by 5 percentiles (uniform between the 1st and 99th,
linear interpolation), the fraction of voxels above 5 per-map thresholds,
and the first 4 moments (mean, SD, skewness, kurtosis; the last two are the
standardized central moments and defined as 0 for constant windows).

Feature order is map-major, window-minor, statistic-innermost; window boxes
are voxel-aligned with side round(side / voxel_size) per axis and clipped at
volume borders.

The per-map threshold ranges default to the reference values: dm in
[1, 1.5], u_a in [1, 10], u_e from 1 down to 0.2 (the descending direction
is kept as given; it spans the same value set as the ascending range).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .coords import CoordSet
from .errors import EmptyWindow
from .volume import Volume3D

DEFAULT_THRESHOLD_RANGES = {
    "dm": (1.0, 1.5),
    "u_a": (1.0, 10.0),
    "u_e": (1.0, 0.2),
}


@dataclass(frozen=True)
class FeatureSpec:
    window_sides_um: tuple[float, ...] = (4.0, 8.0, 16.0, 32.0)
    n_percentiles: int = 5
    percentile_range: tuple[float, float] = (1.0, 99.0)
    n_thresholds: int = 5
    threshold_ranges: dict = field(default_factory=lambda: dict(DEFAULT_THRESHOLD_RANGES))

    def __post_init__(self):
        sides = tuple(float(s) for s in self.window_sides_um)
        if any(s <= 0 for s in sides) or list(sides) != sorted(sides):
            raise ValueError("window sides must be positive and ascending")
        object.__setattr__(self, "window_sides_um", sides)

    @property
    def stats_per_block(self) -> int:
        return self.n_percentiles + self.n_thresholds + 4

    def dimension(self, n_maps: int) -> int:
        return len(self.window_sides_um) * n_maps * self.stats_per_block

    def percentiles(self) -> np.ndarray:
        lo, hi = self.percentile_range
        return np.linspace(lo, hi, self.n_percentiles)

    def thresholds_for(self, map_name: str) -> np.ndarray:
        if map_name not in self.threshold_ranges:
            raise KeyError(f"no threshold range configured for map {map_name!r}")
        lo, hi = self.threshold_ranges[map_name]
        return np.linspace(lo, hi, self.n_thresholds)


def feature_names(map_names, spec: FeatureSpec) -> list[str]:
    """Column names in extraction order."""
    names = []
    pcts = spec.percentiles()
    for map_name in map_names:
        thresholds = spec.thresholds_for(map_name)
        for side in spec.window_sides_um:
            w = f"{map_name}_w{side:g}um"
            names.extend(f"{w}_p{q:g}" for q in pcts)
            names.extend(f"{w}_above{t:g}" for t in thresholds)
            names.extend(f"{w}_{m}" for m in ("mean", "sd", "skew", "kurt"))
    return names


def _window_stats(values: np.ndarray, pcts: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    out = np.empty(pcts.size + thresholds.size + 4, dtype=np.float64)
    out[: pcts.size] = np.percentile(values, pcts, method="linear")
    base = pcts.size
    for k, t in enumerate(thresholds):
        out[base + k] = np.mean(values > t)
    base += thresholds.size
    mean = values.mean()
    sd = values.std()
    out[base] = mean
    out[base + 1] = sd
    if sd == 0.0:
        out[base + 2] = 0.0
        out[base + 3] = 0.0
    else:
        z = (values - mean) / sd
        out[base + 2] = np.mean(z**3)
        out[base + 3] = np.mean(z**4)
    return out


def extract_features(
    maps: list[tuple[str, Volume3D]],
    proposals: CoordSet,
    spec: FeatureSpec = FeatureSpec(),
) -> np.ndarray:
    """Feature matrix [n_proposals x d] over the given (name, volume) maps.

    All maps must share shape and voxel size; proposals must lie inside the
    volume. d = n_windows * n_maps * (percentiles + thresholds + 4).
    """
    if not maps:
        raise ValueError("need at least one map")
    shape = maps[0][1].shape
    vs = np.asarray(maps[0][1].voxel_size, dtype=np.float64)
    for name, vol in maps:
        if vol.shape != shape or tuple(vol.voxel_size) != tuple(maps[0][1].voxel_size):
            raise ValueError(f"map {name!r} does not share the common grid")
    n = len(proposals)
    d = spec.dimension(len(maps))
    out = np.empty((n, d), dtype=np.float64)
    if n == 0:
        return out
    centers = np.floor(proposals.coords / vs).astype(int)
    if np.any(centers < 0) or np.any(centers >= np.asarray(shape)):
        raise ValueError("proposals must lie inside the volume")
    widths = [
        np.maximum(np.round(side / vs).astype(int), 1) for side in spec.window_sides_um
    ]
    pcts = spec.percentiles()
    col = 0
    for name, vol in maps:
        thresholds = spec.thresholds_for(name)
        data = vol.data
        for w in widths:
            raw_lo = centers - w // 2
            lo = np.clip(raw_lo, 0, None)
            hi = np.minimum(raw_lo + w, shape)
            for i in range(n):
                block = data[lo[i, 0] : hi[i, 0], lo[i, 1] : hi[i, 1], lo[i, 2] : hi[i, 2]]
                if block.size == 0:
                    raise EmptyWindow(f"window around proposal {i} is empty")
                out[i, col : col + spec.stats_per_block] = _window_stats(
                    np.asarray(block, dtype=np.float64).ravel(), pcts, thresholds
                )
            col += spec.stats_per_block
    return out
