"""Conversion of polar range scans into occupancy and visibility grids.

Grid convention: the sensor sits at the middle of the bottom row, looking
"up" the grid. In ego coordinates x points right (increasing column) and
y points forward (decreasing row); beam angles are measured from +x, so
pi/2 is straight ahead. Index coordinates put integer values at cell
centers; the cell containing a continuous point (r, c) is
(floor(r + 0.5), floor(c + 0.5)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import ParameterError

NO_RETURN = math.inf


@dataclass(frozen=True)
class GridSpec:
    rows: int = 100
    cols: int = 100
    cell_size: float = 0.1

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ParameterError("grid must have positive dimensions")
        if self.cell_size <= 0:
            raise ParameterError("cell_size must be positive")

    @property
    def sensor_cell(self) -> tuple[int, int]:
        return (self.rows - 1, self.cols // 2)

    def point_to_index(self, x: float, y: float) -> tuple[float, float]:
        """Ego-frame meters -> fractional (row, col) index coordinates."""
        return (self.rows - 1) - y / self.cell_size, self.cols // 2 + x / self.cell_size

    def index_to_point(self, r: float, c: float) -> tuple[float, float]:
        return (c - self.cols // 2) * self.cell_size, ((self.rows - 1) - r) * self.cell_size

    def contains(self, row: int, col: int) -> bool:
        return 0 <= row < self.rows and 0 <= col < self.cols


def cell_of_index(r: float, c: float) -> tuple[int, int]:
    return int(math.floor(r + 0.5)), int(math.floor(c + 0.5))


@dataclass
class Scan:
    """One sweep: ranges in meters over an evenly spaced 180-degree fan."""

    ranges: np.ndarray
    angle_min: float = 0.0
    angle_max: float = math.pi
    range_max: float = 10.0
    timestamp: float = 0.0

    def __post_init__(self):
        self.ranges = np.asarray(self.ranges, dtype=np.float64)
        if self.ranges.size == 0:
            raise ParameterError("scan has no beams")
        span = self.angle_max - self.angle_min
        if abs(span - math.pi) > 1e-6:
            raise ParameterError(f"fan must span pi radians, got {span}")
        finite = self.ranges[np.isfinite(self.ranges)]
        if finite.size and (finite.min() <= 0 or finite.max() > self.range_max + 1e-9):
            raise ParameterError("ranges must lie in (0, range_max] or be the no-return sentinel")

    def angles(self) -> np.ndarray:
        n = self.ranges.size
        if n == 1:
            return np.array([0.5 * (self.angle_min + self.angle_max)])
        return np.linspace(self.angle_min, self.angle_max, n)


@dataclass
class GridPair:
    """Binary occupancy and visibility maps of one scan."""

    occupancy: np.ndarray
    visibility: np.ndarray

    def copy(self) -> "GridPair":
        return GridPair(self.occupancy.copy(), self.visibility.copy())


def ray_traverse(
    origin_cell: tuple[int, int], angle: float, max_distance: float, grid: GridSpec
) -> list[tuple[int, int]]:
    """Cells crossed by a ray from the center of origin_cell, in distance order.

    ``max_distance`` is in cell units. The walk clips at the grid border.
    Exact corner crossings step diagonally, matching a supersampled march
    (corner-touching side cells have no interior on the ray).
    """
    r0, c0 = origin_cell
    if not grid.contains(r0, c0):
        raise ParameterError(f"origin {origin_cell} outside grid")
    dc = math.cos(angle)
    dr = -math.sin(angle)
    row, col = r0, c0
    cells = [(row, col)]

    step_r = 1 if dr > 0 else -1
    step_c = 1 if dc > 0 else -1
    # From the cell-center start the first boundary on each axis is half a
    # cell away, in ray-parameter units.
    t_max_r = 0.5 / abs(dr) if dr != 0 else math.inf
    t_max_c = 0.5 / abs(dc) if dc != 0 else math.inf
    t_delta_r = 1.0 / abs(dr) if dr != 0 else math.inf
    t_delta_c = 1.0 / abs(dc) if dc != 0 else math.inf

    while True:
        t_next = min(t_max_r, t_max_c)
        if t_next > max_distance:
            break
        # A (near-)exact corner crossing advances both axes: the side cells
        # touched only at the corner have no ray interior, so a supersampled
        # march never reports them.
        if abs(t_max_c - t_max_r) <= 1e-9 * max(1.0, t_next):
            row += step_r
            col += step_c
            t_max_r += t_delta_r
            t_max_c += t_delta_c
        elif t_max_c < t_max_r:
            col += step_c
            t_max_c += t_delta_c
        else:
            row += step_r
            t_max_r += t_delta_r
        if not grid.contains(row, col):
            break
        cells.append((row, col))
    return cells


def scan_to_maps(scan: Scan, grid: GridSpec) -> GridPair:
    """Rasterize a scan into its occupancy and visibility maps.

    Beams with a return mark the endpoint cell occupied and every traversed
    cell up to and including it visible; no-return beams mark visibility out
    to range_max. Cells no beam reaches stay invisible and unoccupied.
    """
    occupancy = np.zeros((grid.rows, grid.cols))
    visibility = np.zeros((grid.rows, grid.cols))
    sensor = grid.sensor_cell
    range_max_cells = scan.range_max / grid.cell_size

    for angle, rng in zip(scan.angles(), scan.ranges):
        hit = np.isfinite(rng) and rng <= scan.range_max
        dist_cells = (rng / grid.cell_size) if hit else range_max_cells
        for cell in ray_traverse(sensor, angle, dist_cells, grid):
            visibility[cell] = 1.0
        if hit:
            r_end = sensor[0] + 0.5 - math.sin(angle) * dist_cells
            c_end = sensor[1] + 0.5 + math.cos(angle) * dist_cells
            end = (int(math.floor(r_end)), int(math.floor(c_end)))
            if grid.contains(*end):
                occupancy[end] = 1.0
                visibility[end] = 1.0
    return GridPair(occupancy, visibility)
