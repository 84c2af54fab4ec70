"""Synthetic 2-D world with an ego-mounted 180-degree range sensor.

Supplies training sequences and, because object motion is known exactly,
per-cell ground-truth flow between adjacent frames. World coordinates are
meters; the ego starts at the origin heading +y, which aligns the initial
ego frame (x right, y forward) with the world frame. The arena is a
world-fixed rectangle matching the grid footprint; objects reflect off it.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import ParameterError
from .grids import GridPair, GridSpec, Scan, scan_to_maps

STATIC_OWNER = -1
NO_OWNER = -2


@dataclass
class SimObject:
    """A rigid moving obstacle: a disc or an oriented box."""

    kind: str  # "disc" | "box"
    center: np.ndarray
    velocity: np.ndarray
    radius: float = 0.0
    half_extents: np.ndarray | None = None
    heading: float = 0.0
    angular_velocity: float = 0.0

    def __post_init__(self):
        if self.kind not in ("disc", "box"):
            raise ParameterError(f"unknown object kind {self.kind!r}")
        self.center = np.asarray(self.center, dtype=np.float64)
        self.velocity = np.asarray(self.velocity, dtype=np.float64)
        if self.kind == "box":
            self.half_extents = np.asarray(self.half_extents, dtype=np.float64)

    @property
    def bound_radius(self) -> float:
        if self.kind == "disc":
            return self.radius
        return float(np.hypot(*self.half_extents))


@dataclass
class WorldState:
    segments: list  # [(p1, p2)] static walls, world frame
    objects: list  # [SimObject]
    ego_pose: np.ndarray  # (x, y, heading)
    ego_twist: tuple = (0.0, 0.0)  # (v, omega)
    time: float = 0.0
    arena: tuple | None = None  # (xmin, xmax, ymin, ymax)

    def __post_init__(self):
        self.ego_pose = np.asarray(self.ego_pose, dtype=np.float64)


@dataclass(frozen=True)
class ScanSpec:
    beam_count: int = 181
    range_max: float = 10.0

    def __post_init__(self):
        if self.beam_count < 2:
            raise ParameterError("need at least 2 beams across the fan")


def ego_axes(heading: float) -> tuple[np.ndarray, np.ndarray]:
    """(right, forward) unit vectors of the ego frame in world coordinates."""
    forward = np.array([math.cos(heading), math.sin(heading)])
    right = np.array([math.sin(heading), -math.cos(heading)])
    return right, forward


def world_to_ego(pose: np.ndarray, point: np.ndarray) -> np.ndarray:
    right, forward = ego_axes(pose[2])
    d = np.asarray(point, dtype=np.float64) - pose[:2]
    return np.array([d @ right, d @ forward])


def ego_to_world(pose: np.ndarray, point: np.ndarray) -> np.ndarray:
    right, forward = ego_axes(pose[2])
    return pose[:2] + point[0] * right + point[1] * forward


def step_world(world: WorldState, dt: float = 1.0 / 15.0) -> WorldState:
    """Advance every object and the ego pose by dt; pure."""
    objects = []
    for obj in world.objects:
        center = obj.center + obj.velocity * dt
        velocity = obj.velocity.copy()
        if world.arena is not None:
            xmin, xmax, ymin, ymax = world.arena
            m = obj.bound_radius
            if (center[0] - m < xmin and velocity[0] < 0) or (center[0] + m > xmax and velocity[0] > 0):
                velocity[0] = -velocity[0]
            if (center[1] - m < ymin and velocity[1] < 0) or (center[1] + m > ymax and velocity[1] > 0):
                velocity[1] = -velocity[1]
        objects.append(
            replace(
                obj,
                center=center,
                velocity=velocity,
                heading=obj.heading + obj.angular_velocity * dt,
            )
        )
    v, omega = world.ego_twist
    x, y, h = world.ego_pose
    ego_pose = np.array([x + v * math.cos(h) * dt, y + v * math.sin(h) * dt, h + omega * dt])
    return WorldState(
        segments=world.segments,
        objects=objects,
        ego_pose=ego_pose,
        ego_twist=world.ego_twist,
        time=world.time + dt,
        arena=world.arena,
    )


# ---------------------------------------------------------------------------
# analytic ray casting


def _ray_segment(p, d, a, b):
    e = b - a
    denom = d[0] * e[1] - d[1] * e[0]
    if abs(denom) < 1e-12:
        return math.inf
    ap = a - p
    t = (ap[0] * e[1] - ap[1] * e[0]) / denom
    s = (ap[0] * d[1] - ap[1] * d[0]) / denom
    if t > 1e-9 and -1e-12 <= s <= 1.0 + 1e-12:
        return t
    return math.inf


def _ray_disc(p, d, c, r):
    pc = p - c
    b = pc @ d
    disc = b * b - (pc @ pc - r * r)
    if disc < 0:
        return math.inf
    root = math.sqrt(disc)
    t = -b - root
    if t > 1e-9:
        return t
    t = -b + root
    return t if t > 1e-9 else math.inf


def _ray_box(p, d, obj: SimObject):
    ch, sh = math.cos(obj.heading), math.sin(obj.heading)
    rel = p - obj.center
    pl = np.array([ch * rel[0] + sh * rel[1], -sh * rel[0] + ch * rel[1]])
    dl = np.array([ch * d[0] + sh * d[1], -sh * d[0] + ch * d[1]])
    tmin, tmax = -math.inf, math.inf
    for i in range(2):
        h = obj.half_extents[i]
        if abs(dl[i]) < 1e-12:
            if abs(pl[i]) > h:
                return math.inf
            continue
        t1 = (-h - pl[i]) / dl[i]
        t2 = (h - pl[i]) / dl[i]
        if t1 > t2:
            t1, t2 = t2, t1
        tmin = max(tmin, t1)
        tmax = min(tmax, t2)
    if tmax < max(tmin, 0.0):
        return math.inf
    return tmin if tmin > 1e-9 else math.inf


def sense_with_owners(world: WorldState, spec: ScanSpec = ScanSpec()) -> tuple[Scan, np.ndarray]:
    """Scan plus, per beam, the index of the object hit (or STATIC/NO_OWNER)."""
    p = world.ego_pose[:2]
    right, forward = ego_axes(world.ego_pose[2])
    n = spec.beam_count
    ranges = np.full(n, math.inf)
    owners = np.full(n, NO_OWNER, dtype=np.int64)
    angles = np.linspace(0.0, math.pi, n)
    for i, theta in enumerate(angles):
        d = math.cos(theta) * right + math.sin(theta) * forward
        best, owner = math.inf, NO_OWNER
        for a, b in world.segments:
            t = _ray_segment(p, d, np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
            if t < best:
                best, owner = t, STATIC_OWNER
        for k, obj in enumerate(world.objects):
            if obj.kind == "disc":
                t = _ray_disc(p, d, obj.center, obj.radius)
            else:
                t = _ray_box(p, d, obj)
            if t < best:
                best, owner = t, k
        if best <= spec.range_max:
            ranges[i] = best
            owners[i] = owner
    return Scan(ranges, range_max=spec.range_max, timestamp=world.time), owners


def sense(world: WorldState, spec: ScanSpec = ScanSpec()) -> Scan:
    return sense_with_owners(world, spec)[0]


# ---------------------------------------------------------------------------
# ground-truth flow


def _check_same_identities(w0: WorldState, w1: WorldState) -> None:
    if len(w0.objects) != len(w1.objects) or any(
        a.kind != b.kind for a, b in zip(w0.objects, w1.objects)
    ):
        raise ParameterError("worlds do not share object identities")


def _material_point(p_world: np.ndarray, obj_from: SimObject | None, obj_to: SimObject | None):
    """Where the rigid material point at p_world (from-time) sits at to-time."""
    if obj_from is None:
        return p_world
    dphi = obj_to.heading - obj_from.heading
    c, s = math.cos(dphi), math.sin(dphi)
    rel = p_world - obj_from.center
    return obj_to.center + np.array([c * rel[0] - s * rel[1], s * rel[0] + c * rel[1]])


def _owned_cells(world: WorldState, grid: GridSpec, spec: ScanSpec):
    """Occupied endpoint cells of a rendered scan, with the owning object."""
    scan, owners = sense_with_owners(world, spec)
    cells = {}
    sensor = grid.sensor_cell
    for angle, rng, owner in zip(scan.angles(), scan.ranges, owners):
        if not np.isfinite(rng):
            continue
        dist = rng / grid.cell_size
        r = int(math.floor(sensor[0] + 0.5 - math.sin(angle) * dist))
        c = int(math.floor(sensor[1] + 0.5 + math.cos(angle) * dist))
        if grid.contains(r, c):
            cells[(r, c)] = int(owner)
    return cells


def _flow_between(
    world_from: WorldState, world_to: WorldState, grid: GridSpec, spec: ScanSpec
) -> np.ndarray:
    """Flow on occupied cells of world_from's map, pointing at world_to.

    For each occupied cell the material point under the cell center is
    carried by its owner's rigid motion to the other time, re-expressed in
    that frame's ego coordinates; the flow is the index-space displacement.
    Cells without a return carry NaN.
    """
    flow = np.full((2, grid.rows, grid.cols), np.nan)
    for (r, c), owner in _owned_cells(world_from, grid, spec).items():
        p_ego = np.array(grid.index_to_point(r, c))
        p_world = ego_to_world(world_from.ego_pose, p_ego)
        if owner >= 0:
            p_world = _material_point(p_world, world_from.objects[owner], world_to.objects[owner])
        q_ego = world_to_ego(world_to.ego_pose, p_world)
        r_to, c_to = grid.point_to_index(*q_ego)
        flow[0, r, c] = c_to - c
        flow[1, r, c] = r_to - r
    return flow


def ground_truth_flow(
    world_t: WorldState,
    world_t1: WorldState,
    grid: GridSpec,
    spec: ScanSpec = ScanSpec(),
) -> tuple[np.ndarray, np.ndarray]:
    """(backward, forward) flow fields for the step world_t -> world_t1.

    Backward flow lives on occupied cells of the t+1 map and points to where
    the material was at t, so warping the t map with it reproduces the t+1
    map; forward flow is the symmetric field on the t map. Undefined cells
    hold NaN.
    """
    _check_same_identities(world_t, world_t1)
    backward = _flow_between(world_t1, world_t, grid, spec)
    forward = _flow_between(world_t, world_t1, grid, spec)
    return backward, forward


# ---------------------------------------------------------------------------
# dataset generation


@dataclass
class SequenceSample:
    frames: list  # T GridPairs
    gt_next: GridPair
    gt_flow_backward: list  # T arrays (2,H,W); [t] is for frames[t] -> frames[t+1]
    gt_flow_forward: list
    scenario: str = "static_platform"


SCENARIOS = ("static_platform", "dynamic_platform")


@dataclass
class ScenarioConfig:
    scenario: str = "static_platform"
    rows: int = 100
    cols: int = 100
    cell_size: float = 0.1
    fps: float = 15.0
    seq_len: int = 20
    beam_count: int = 181
    range_max: float = 12.0
    objects_min: int = 1
    objects_max: int = 3
    disc_radius: tuple = (0.15, 0.35)
    disc_speed: tuple = (0.5, 1.5)
    ego_speed: tuple = (0.0, 1.0)
    ego_omega: tuple = (-0.3, 0.3)
    walls: bool = True
    with_gt_flow: bool = True

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ParameterError(f"unknown scenario {self.scenario!r}, expected one of {SCENARIOS}")
        if self.seq_len < 2:
            raise ParameterError("seq_len must be at least 2")
        span = min(self.rows, self.cols) * self.cell_size
        top_speed = max(abs(self.disc_speed[1]), abs(self.ego_speed[1]))
        if top_speed / self.fps > 0.5 * span:
            raise ParameterError("per-frame displacement exceeds half the grid span")

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.rows, self.cols, self.cell_size)

    @property
    def scan_spec(self) -> ScanSpec:
        return ScanSpec(self.beam_count, self.range_max)


def _build_world(config: ScenarioConfig, rng: np.random.Generator) -> WorldState:
    # Inset the arena two cells from the grid footprint so its walls land on
    # in-grid cells instead of the outer boundary.
    inset = 2.0 * config.cell_size
    width = config.cols * config.cell_size - 2 * inset
    height = config.rows * config.cell_size - inset
    arena = (-width / 2, width / 2, -0.5, height)
    segments = []
    if config.walls:
        corners = [
            (arena[0], arena[2]),
            (arena[1], arena[2]),
            (arena[1], arena[3]),
            (arena[0], arena[3]),
        ]
        segments = [
            (np.array(corners[i]), np.array(corners[(i + 1) % 4])) for i in range(4)
        ]
    objects = []
    n_obj = int(rng.integers(config.objects_min, config.objects_max + 1))
    for _ in range(n_obj):
        for _attempt in range(50):
            x = rng.uniform(-0.4 * width, 0.4 * width)
            y = rng.uniform(0.25 * height, 0.85 * height)
            if math.hypot(x, y) < 1.0:
                continue
            if all(np.hypot(*(np.array([x, y]) - o.center)) > 0.6 for o in objects):
                break
        speed = rng.uniform(*config.disc_speed)
        direction = rng.uniform(0.0, 2 * math.pi)
        objects.append(
            SimObject(
                kind="disc",
                center=np.array([x, y]),
                velocity=speed * np.array([math.cos(direction), math.sin(direction)]),
                radius=rng.uniform(*config.disc_radius),
            )
        )
    if config.scenario == "dynamic_platform":
        twist = (rng.uniform(*config.ego_speed), rng.uniform(*config.ego_omega))
    else:
        twist = (0.0, 0.0)
    return WorldState(
        segments=segments,
        objects=objects,
        ego_pose=np.array([0.0, 0.0, math.pi / 2]),
        ego_twist=twist,
        arena=arena,
    )


def _roll_sequence(config: ScenarioConfig, seed_seq: np.random.SeedSequence) -> SequenceSample:
    dt = 1.0 / config.fps
    grid = config.grid
    spec = config.scan_spec
    for attempt_seq in seed_seq.spawn(20):
        rng = np.random.default_rng(attempt_seq)
        worlds = [_build_world(config, rng)]
        for _ in range(config.seq_len):
            worlds.append(step_world(worlds[-1], dt))
        clear = all(
            np.hypot(*(obj.center - w.ego_pose[:2])) > obj.bound_radius + 0.2
            for w in worlds
            for obj in w.objects
        )
        if clear:
            break
    frames = [scan_to_maps(sense(w, spec), grid) for w in worlds]
    flows_b, flows_f = [], []
    if config.with_gt_flow:
        for t in range(config.seq_len):
            b, f = ground_truth_flow(worlds[t], worlds[t + 1], grid, spec)
            flows_b.append(b)
            flows_f.append(f)
    return SequenceSample(
        frames=frames[: config.seq_len],
        gt_next=frames[config.seq_len],
        gt_flow_backward=flows_b,
        gt_flow_forward=flows_f,
        scenario=config.scenario,
    )


def _worker_count() -> int:
    raw = os.environ.get("LIDARFLOW_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def generate_dataset(config: ScenarioConfig, count: int, seed: int) -> list[SequenceSample]:
    """Deterministic set of sequences; each draws from its own seed stream."""
    if count < 1:
        raise ParameterError("count must be positive")
    children = np.random.SeedSequence(seed).spawn(count)
    workers = min(_worker_count(), count)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_roll_sequence, [config] * count, children, chunksize=1))
    return [_roll_sequence(config, child) for child in children]
