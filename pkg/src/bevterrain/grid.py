"""Metric bird's-eye-view grids.

Row index runs along y, column index along x.  ``origin_x, origin_y`` are the
world coordinates of the outer corner of cell (0, 0).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Pyramid factors used for multi-scale fusion.
DEFAULT_LEVELS = (1, 2, 4)


@dataclass(frozen=True)
class GridSpec:
    resolution: float = 0.2
    origin_x: float = 0.0
    origin_y: float = -25.6
    width: int = 256
    height: int = 256

    def __post_init__(self):
        if not self.resolution > 0:
            raise ValueError(f"resolution must be positive, got {self.resolution}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"grid must be at least 1x1, got {self.width}x{self.height}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def scaled(self, factor: int) -> "GridSpec":
        """Spec of the grid coarsened by ``factor``."""
        if factor < 1 or self.width % factor or self.height % factor:
            raise ValueError(f"factor {factor} does not divide grid {self.width}x{self.height}")
        return GridSpec(
            self.resolution * factor,
            self.origin_x,
            self.origin_y,
            self.width // factor,
            self.height // factor,
        )


def world_to_cell(spec: GridSpec, x: float, y: float) -> tuple[int, int] | None:
    col = int(np.floor((x - spec.origin_x) / spec.resolution))
    row = int(np.floor((y - spec.origin_y) / spec.resolution))
    if 0 <= row < spec.height and 0 <= col < spec.width:
        return row, col
    return None


def world_to_cells(spec: GridSpec, xy: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized ``world_to_cell``: returns (row, col, inside) arrays for (N, 2) points."""
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    col = np.floor((xy[:, 0] - spec.origin_x) / spec.resolution)
    row = np.floor((xy[:, 1] - spec.origin_y) / spec.resolution)
    inside = (row >= 0) & (row < spec.height) & (col >= 0) & (col < spec.width)
    return row.astype(np.int64), col.astype(np.int64), inside


def cell_center(spec: GridSpec, row: int, col: int) -> tuple[float, float]:
    if not (0 <= row < spec.height and 0 <= col < spec.width):
        raise IndexError(f"cell ({row}, {col}) outside {spec.height}x{spec.width} grid")
    return (
        spec.origin_x + (col + 0.5) * spec.resolution,
        spec.origin_y + (row + 0.5) * spec.resolution,
    )


def cell_centers(spec: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """(x, y) world coordinates of every cell center, each shaped (H, W)."""
    xs = spec.origin_x + (np.arange(spec.width) + 0.5) * spec.resolution
    ys = spec.origin_y + (np.arange(spec.height) + 0.5) * spec.resolution
    return np.meshgrid(xs, ys)


@dataclass(frozen=True, eq=False)
class BevGrid:
    spec: GridSpec
    values: np.ndarray  # (C, H, W)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 2:
            v = v[None]
        if v.ndim != 3 or v.shape[1:] != self.spec.shape:
            raise ValueError(f"values shape {v.shape} does not match grid {self.spec.shape}")
        object.__setattr__(self, "values", v)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @classmethod
    def zeros(cls, spec: GridSpec, channels: int) -> "BevGrid":
        return cls(spec, np.zeros((channels, spec.height, spec.width)))


def avg_pool(grid: BevGrid, factor: int) -> BevGrid:
    """Mean over non-overlapping factor x factor blocks, per channel."""
    coarse = grid.spec.scaled(factor)
    if factor == 1:
        return BevGrid(coarse, grid.values.copy())
    C = grid.channels
    blocks = grid.values.reshape(C, coarse.height, factor, coarse.width, factor)
    return BevGrid(coarse, blocks.mean(axis=(2, 4)))


def nearest_upsample(grid: BevGrid, factor: int, target: GridSpec) -> BevGrid:
    """Copy each coarse cell into its factor x factor block of ``target``."""
    if factor < 1 or (target.height, target.width) != (grid.spec.height * factor, grid.spec.width * factor):
        raise ValueError(
            f"target {target.height}x{target.width} is not {factor}x the "
            f"{grid.spec.height}x{grid.spec.width} source grid"
        )
    values = np.repeat(np.repeat(grid.values, factor, axis=1), factor, axis=2)
    return BevGrid(target, values)
