"""Per-cell LiDAR and painted-semantic feature grids, stacked over a resolution pyramid."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import PointCloud
from .grid import DEFAULT_LEVELS, BevGrid, GridSpec, avg_pool, nearest_upsample, world_to_cells
from .pseudo_label import PaintedCloud

LIDAR_CHANNELS = ("log_count", "z_min", "z_max", "z_mean", "z_var", "intensity_mean")


@dataclass(frozen=True, eq=False)
class FeatureGrid:
    grid: BevGrid
    names: tuple[str, ...]

    def __post_init__(self):
        names = tuple(self.names)
        if len(names) != self.grid.channels:
            raise ValueError(f"{len(names)} channel names for {self.grid.channels} channels")
        if len(set(names)) != len(names):
            raise ValueError("channel names must be unique")
        object.__setattr__(self, "names", names)

    @property
    def spec(self) -> GridSpec:
        return self.grid.spec

    @property
    def values(self) -> np.ndarray:
        return self.grid.values

    @property
    def channels(self) -> int:
        return self.grid.channels

    def manifest(self) -> list[tuple[str, int]]:
        return [(name, i) for i, name in enumerate(self.names)]

    def index(self, name: str) -> int:
        return self.names.index(name)

    def select(self, keep) -> "FeatureGrid":
        """Sub-grid of the channels whose name satisfies ``keep(name)``."""
        idx = [i for i, n in enumerate(self.names) if keep(n)]
        return FeatureGrid(BevGrid(self.spec, self.values[idx]), tuple(self.names[i] for i in idx))


def _cell_index(spec: GridSpec, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    row, col, inside = world_to_cells(spec, points[:, :2])
    return row * spec.width + col, inside


def lidar_features(pc: PointCloud, spec: GridSpec) -> FeatureGrid:
    """Six geometry channels per cell; empty cells are all zero.

    Heights are taken relative to the ego origin and the variance uses the
    population formula.
    """
    ncell = spec.height * spec.width
    cell, inside = _cell_index(spec, pc.points)
    cell = cell[inside]
    z = pc.points[inside, 2]
    inten = pc.intensity[inside]

    count = np.bincount(cell, minlength=ncell).astype(np.float64)
    has = count > 0
    n = np.where(has, count, 1.0)
    z_mean = np.bincount(cell, weights=z, minlength=ncell) / n
    # second pass around the mean avoids cancellation in E[z^2] - E[z]^2
    dev = z - z_mean[cell]
    z_var = np.bincount(cell, weights=dev * dev, minlength=ncell) / n
    z_min = np.full(ncell, np.inf)
    z_max = np.full(ncell, -np.inf)
    np.minimum.at(z_min, cell, z)
    np.maximum.at(z_max, cell, z)
    inten_mean = np.bincount(cell, weights=inten, minlength=ncell) / n

    chans = np.stack([
        np.log1p(count),
        np.where(has, z_min, 0.0),
        np.where(has, z_max, 0.0),
        np.where(has, z_mean, 0.0),
        np.where(has, z_var, 0.0),
        np.where(has, inten_mean, 0.0),
    ])
    return FeatureGrid(BevGrid(spec, chans.reshape(6, spec.height, spec.width)), LIDAR_CHANNELS)


def semantic_channel_names(num_classes: int) -> tuple[str, ...]:
    return tuple(f"class_{k}" for k in range(num_classes)) + ("observed",)


def semantic_features(painted: PaintedCloud, spec: GridSpec, num_classes: int) -> FeatureGrid:
    """Mean painted distribution of the valid points in each cell, plus an observed flag."""
    K = num_classes
    ncell = spec.height * spec.width
    cell, inside = _cell_index(spec, painted.cloud.points)
    keep = inside & painted.valid
    cell = cell[keep]
    probs = painted.probs[keep]
    count = np.bincount(cell, minlength=ncell).astype(np.float64)
    has = count > 0
    n = np.where(has, count, 1.0)
    chans = np.zeros((K + 1, ncell))
    for k in range(K):
        chans[k] = np.bincount(cell, weights=probs[:, k], minlength=ncell) / n
    chans[K] = has
    return FeatureGrid(
        BevGrid(spec, chans.reshape(K + 1, spec.height, spec.width)), semantic_channel_names(K)
    )


def multiscale_stack(
    lidar: FeatureGrid, semantic: FeatureGrid, levels: Sequence[int] = DEFAULT_LEVELS
) -> FeatureGrid:
    """Pool both branches at every pyramid factor, upsample back, and concatenate.

    Channel order is level-major, LiDAR before semantic; names read
    ``"s{factor}/lidar/{channel}"`` and ``"s{factor}/sem/{channel}"``.
    """
    levels = list(levels)
    if not levels or levels[0] != 1:
        raise ValueError(f"first pyramid level must be factor 1, got {levels}")
    if lidar.spec != semantic.spec:
        raise ValueError("LiDAR and semantic grids use different specs")
    base = lidar.spec
    parts, names = [], []
    for f in levels:
        for branch, fg in (("lidar", lidar), ("sem", semantic)):
            coarse = avg_pool(fg.grid, f)
            parts.append(nearest_upsample(coarse, f, base).values)
            names.extend(f"s{f}/{branch}/{n}" for n in fg.names)
    return FeatureGrid(BevGrid(base, np.concatenate(parts, axis=0)), tuple(names))


def branch_of(name: str) -> str:
    """'lidar' or 'sem' for a stacked channel name."""
    return name.split("/")[1]
