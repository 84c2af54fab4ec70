import math

import numpy as np
import pytest

from lidarflow.autodiff import ParameterError
from lidarflow.grids import GridPair, GridSpec, Scan, cell_of_index, ray_traverse, scan_to_maps
from helpers import ray_march_cells


def fan_scan(ranges, range_max=10.0):
    return Scan(np.asarray(ranges, dtype=float), 0.0, math.pi, range_max)


class TestGridSpec:
    def test_sensor_sits_bottom_middle(self):
        grid = GridSpec(100, 100, 0.1)
        assert grid.sensor_cell == (99, 50)

    def test_point_round_trip(self):
        grid = GridSpec(32, 32, 0.1)
        r, c = grid.point_to_index(0.35, 1.2)
        x, y = grid.index_to_point(r, c)
        assert (x, y) == pytest.approx((0.35, 1.2))

    def test_rejects_bad_dims(self):
        with pytest.raises(ParameterError):
            GridSpec(0, 10)


class TestRayTraverse:
    def test_angle_zero_walks_a_row(self):
        grid = GridSpec(10, 10, 0.1)
        cells = ray_traverse((4, 2), 0.0, 5.0, grid)
        assert cells == [(4, c) for c in range(2, 8)]

    def test_angle_half_pi_walks_a_column(self):
        grid = GridSpec(10, 10, 0.1)
        cells = ray_traverse((9, 5), math.pi / 2, 6.0, grid)
        assert cells == [(r, 5) for r in range(9, 2, -1)]

    def test_matches_marching_oracle_atan2_1_2(self):
        grid = GridSpec(20, 20, 0.1)
        angle = math.atan2(1, 2)
        got = ray_traverse((0, 0), angle, 10.0, grid)
        want = ray_march_cells((0.5, 0.5), angle, 10.0, 20, 20, step=0.01)
        assert got == want

    def test_diagonal_skips_corner_cells(self):
        grid = GridSpec(10, 10, 0.1)
        cells = ray_traverse((9, 0), math.pi / 4, 6.0, grid)
        assert cells == [(9 - k, k) for k in range(5)]

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_marching_oracle_random(self, seed):
        rng = np.random.default_rng(seed)
        grid = GridSpec(24, 24, 0.1)
        origin = (int(rng.integers(0, 24)), int(rng.integers(0, 24)))
        angle = rng.uniform(0, 2 * math.pi)
        dist = rng.uniform(1.0, 20.0)
        got = ray_traverse(origin, angle, dist, grid)
        want = ray_march_cells((origin[0] + 0.5, origin[1] + 0.5), angle, dist, 24, 24, step=0.001)
        assert got == want

    def test_origin_outside_grid_rejected(self):
        with pytest.raises(ParameterError):
            ray_traverse((30, 0), 0.0, 5.0, GridSpec(10, 10))

    def test_cells_unique_and_ordered(self):
        grid = GridSpec(30, 30, 0.1)
        cells = ray_traverse((29, 3), 1.1, 40.0, grid)
        assert len(cells) == len(set(cells))
        start = np.array([29.5, 3.5])
        dists = [np.linalg.norm(np.array([r + 0.5, c + 0.5]) - start) for r, c in cells]
        assert all(b >= a - 1.0 for a, b in zip(dists, dists[1:]))  # monotone within a cell


class TestScanToMaps:
    def test_no_returns_cover_fan_only(self):
        grid = GridSpec(21, 21, 0.1)
        scan = fan_scan([math.inf] * 181, range_max=2.0)
        maps = scan_to_maps(scan, grid)
        assert maps.occupancy.sum() == 0
        want = np.zeros((21, 21))
        for angle in scan.angles():
            for cell in ray_march_cells((20.5, 10.5), angle, 20.0, 21, 21, step=0.005):
                want[cell] = 1.0
        np.testing.assert_array_equal(maps.visibility, want)

    def test_single_forward_beam(self):
        grid = GridSpec(100, 100, 0.1)
        ranges = np.full(181, math.inf)
        ranges[90] = 2.0  # the pi/2 beam
        maps = scan_to_maps(Scan(ranges, range_max=2.0), grid)
        sensor = grid.sensor_cell
        assert maps.occupancy[sensor[0] - 20, sensor[1]] == 1.0
        assert maps.occupancy.sum() == 1.0
        column = maps.visibility[:, sensor[1]]
        assert column[sensor[0] - 20 : sensor[0] + 1].sum() == 21
        assert column[: sensor[0] - 20].sum() == 0

    def test_diagonal_beam_endpoint_formula(self):
        grid = GridSpec(40, 40, 0.1)
        n = 181
        angles = np.linspace(0, math.pi, n)
        idx = 45  # 45 degrees
        assert angles[idx] == pytest.approx(math.pi / 4)
        d = 1.73
        ranges = np.full(n, math.inf)
        ranges[idx] = d
        maps = scan_to_maps(Scan(ranges, range_max=3.0), grid)
        sensor = grid.sensor_cell
        dist = d / grid.cell_size
        want = (
            math.floor(sensor[0] + 0.5 - math.sin(angles[idx]) * dist),
            math.floor(sensor[1] + 0.5 + math.cos(angles[idx]) * dist),
        )
        assert maps.occupancy[want] == 1.0
        assert maps.occupancy.sum() == 1.0
        # traversed cells match the supersampled oracle
        marched = ray_march_cells((sensor[0] + 0.5, sensor[1] + 0.5), angles[idx], dist, 40, 40, step=0.005)
        for cell in marched:
            assert maps.visibility[cell] == 1.0

    def test_occupied_implies_visible(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            ranges = np.where(rng.random(61) < 0.3, np.inf, rng.uniform(0.2, 3.0, 61))
            maps = scan_to_maps(fan_scan(ranges, range_max=3.0), GridSpec(32, 32, 0.1))
            assert np.all(maps.occupancy <= maps.visibility)

    def test_freeing_an_obstacle_grows_visibility(self):
        # turning a return into a no-return extends that ray, so the visible
        # set can only grow
        grid = GridSpec(32, 32, 0.1)
        ranges = np.full(61, np.inf)
        ranges[30] = 1.0
        blocked = scan_to_maps(fan_scan(ranges, range_max=3.0), grid)
        ranges[30] = np.inf
        free = scan_to_maps(fan_scan(ranges, range_max=3.0), grid)
        assert np.all(blocked.visibility <= free.visibility)

    def test_empty_ranges_rejected(self):
        with pytest.raises(ParameterError):
            Scan(np.array([]))

    def test_span_must_be_pi(self):
        with pytest.raises(ParameterError):
            Scan(np.ones(10), 0.0, math.pi / 2)

    def test_multiple_beams_one_cell_idempotent(self):
        grid = GridSpec(100, 100, 0.1)
        n = 181
        ranges = np.full(n, np.inf)
        ranges[89:92] = 0.3  # three nearly parallel short beams
        maps = scan_to_maps(Scan(ranges, range_max=2.0), grid)
        assert set(np.unique(maps.occupancy)) <= {0.0, 1.0}

    def test_every_returning_beam_occupies_its_endpoint_cell(self):
        rng = np.random.default_rng(17)
        grid = GridSpec(40, 40, 0.1)
        ranges = np.where(rng.random(91) < 0.5, np.inf, rng.uniform(0.3, 3.0, 91))
        scan = fan_scan(ranges, range_max=3.5)
        maps = scan_to_maps(scan, grid)
        sensor = grid.sensor_cell
        for angle, rng_val in zip(scan.angles(), scan.ranges):
            if not math.isfinite(rng_val):
                continue
            dist = rng_val / grid.cell_size
            cell = (
                math.floor(sensor[0] + 0.5 - math.sin(angle) * dist),
                math.floor(sensor[1] + 0.5 + math.cos(angle) * dist),
            )
            if grid.contains(*cell):
                assert maps.occupancy[cell] == 1.0


def test_cell_of_index_centers():
    assert cell_of_index(5.0, 7.0) == (5, 7)
    assert cell_of_index(5.49, 6.51) == (5, 7)
