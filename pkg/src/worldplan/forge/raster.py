"""BEV rasterization of scenarios.

Cells are indexed ``[channel, ix, iy]`` with ``ix`` along the ego's forward
axis. A cell is marked when any of its sub-samples falls inside a shape; the
sub-sample spacing is at most 0.5 m, so at 0.5 m/cell the test reduces to the
plain cell-center test.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import shapely

from ..geometry import points_in_box
from .types import EGO_LENGTH, EGO_WIDTH, NUM_WAYPOINTS, SIM_DT, WAYPOINT_DT, Scenario

CHANNELS = ("drivable", "agent", "ego", "route", "background")
ROUTE_HALF_WIDTH = 1.75
VELOCITY_SCALE = 10.0


@dataclass(frozen=True)
class GridSpec:
    x_min: float = -16.0
    x_max: float = 48.0
    y_min: float = -32.0
    y_max: float = 32.0
    nx: int = 16
    ny: int = 16

    @property
    def resolution(self) -> float:
        return (self.x_max - self.x_min) / self.nx

    @property
    def shape(self) -> tuple:
        return (self.nx, self.ny)

    def cell_centers(self) -> np.ndarray:
        return _samples(self, 1)[:, :, 0]

    def subsamples(self) -> np.ndarray:
        """``[nx, ny, S, 2]`` sample points, ``S = f * f`` per cell."""
        f = max(1, math.ceil(self.resolution / 0.5 - 1e-9))
        return _samples(self, f)


@lru_cache(maxsize=16)
def _samples(grid: GridSpec, f: int) -> np.ndarray:
    rx = (grid.x_max - grid.x_min) / grid.nx
    ry = (grid.y_max - grid.y_min) / grid.ny
    off = (np.arange(f) + 0.5) / f
    xs = grid.x_min + (np.arange(grid.nx)[:, None] + off[None, :]) * rx  # [nx, f]
    ys = grid.y_min + (np.arange(grid.ny)[:, None] + off[None, :]) * ry  # [ny, f]
    X = np.broadcast_to(xs[:, None, :, None], (grid.nx, grid.ny, f, f))
    Y = np.broadcast_to(ys[None, :, None, :], (grid.nx, grid.ny, f, f))
    pts = np.stack([X, Y], axis=-1).reshape(grid.nx, grid.ny, f * f, 2)
    pts.setflags(write=False)
    return pts


DEFAULT_GRID = GridSpec()


@dataclass(eq=False)
class BevRaster:
    data: np.ndarray  # [C, nx, ny]
    grid: GridSpec

    def channel(self, name: str) -> np.ndarray:
        return self.data[CHANNELS.index(name)]

    def __eq__(self, other):
        return isinstance(other, BevRaster) and self.grid == other.grid and np.array_equal(self.data, other.data)


def _reduce(mask: np.ndarray, soft: bool) -> np.ndarray:
    return mask.mean(-1) if soft else mask.any(-1).astype(float)


def _time_index(t: float) -> int:
    k = round(t / WAYPOINT_DT)
    if not (0 <= k <= NUM_WAYPOINTS) or abs(k * WAYPOINT_DT - t) > 1e-9:
        raise ValueError(f"t={t} must lie on the 0.5 s grid within [0, 4]")
    return round(t / SIM_DT)


def box_mask(grid: GridSpec, pose, length: float, width: float, soft: bool = False) -> np.ndarray:
    pts = grid.subsamples()
    # cheap reject: boxes far outside the grid touch no cells
    reach = 0.5 * math.hypot(length, width)
    if (pose[0] + reach < grid.x_min or pose[0] - reach > grid.x_max
            or pose[1] + reach < grid.y_min or pose[1] - reach > grid.y_max):
        return np.zeros(grid.shape)
    return _reduce(points_in_box(pts, pose, length, width), soft)


def _static_masks(scenario: Scenario, grid: GridSpec):
    # sub-sample masks depend only on the map, so they are cached per scenario and grid
    cache = scenario.__dict__.setdefault("_raster_cache", {})
    if grid not in cache:
        pts = grid.subsamples()
        flat = pts.reshape(-1, 2)
        inside = shapely.contains_xy(scenario.drivable_union, flat[:, 0], flat[:, 1])
        route = shapely.LineString(scenario.route)
        on_route = shapely.dwithin(route, shapely.points(flat), ROUTE_HALF_WIDTH)
        cache[grid] = (inside.reshape(pts.shape[:-1]), on_route.reshape(pts.shape[:-1]))
    return cache[grid]


def static_channels(scenario: Scenario, grid: GridSpec = DEFAULT_GRID, soft: bool = False) -> dict:
    inside, on_route = _static_masks(scenario, grid)
    return {
        "drivable": _reduce(inside, soft),
        "route": _reduce(on_route, soft),
        "background": _reduce(~inside, soft),
    }


def agent_channel(scenario: Scenario, t: float, grid: GridSpec = DEFAULT_GRID, soft: bool = False) -> np.ndarray:
    idx = _time_index(t)
    out = np.zeros(grid.shape)
    for agent in scenario.agents:
        m = box_mask(grid, agent.poses[idx], agent.length, agent.width, soft)
        out = np.maximum(out, m)
    return out


def rasterize_bev(scenario: Scenario, t: float, grid: GridSpec = DEFAULT_GRID, soft: bool = False) -> BevRaster:
    """Semantic raster at time ``t``; the ego footprint is drawn only at ``t = 0``."""
    _time_index(t)
    static = static_channels(scenario, grid, soft)
    ego = box_mask(grid, (0.0, 0.0, 0.0), EGO_LENGTH, EGO_WIDTH, soft) if t == 0 else np.zeros(grid.shape)
    data = np.stack([
        static["drivable"],
        agent_channel(scenario, t, grid, soft),
        ego,
        static["route"],
        static["background"],
    ])
    return BevRaster(data, grid)


def ego_channel(proposal, t: float, grid: GridSpec = DEFAULT_GRID) -> np.ndarray:
    proposal = np.asarray(proposal, dtype=float)
    k = round(t / WAYPOINT_DT)
    if not 1 <= k <= len(proposal) or abs(k * WAYPOINT_DT - t) > 1e-9:
        raise ValueError(f"proposal has no waypoint at t={t}")
    pose = proposal[k - 1]
    if not np.all(np.isfinite(pose)):
        raise ValueError("proposal waypoint is not finite")
    return box_mask(grid, pose, EGO_LENGTH, EGO_WIDTH)


def render_future_target(scenario: Scenario, proposal, t: float, grid: GridSpec = DEFAULT_GRID) -> BevRaster:
    """Future semantic target with the ego box placed at the proposal's waypoint at ``t``."""
    ego = ego_channel(proposal, t, grid)
    bev = rasterize_bev(scenario, t, grid)
    bev.data[CHANNELS.index("ego")] = ego
    return bev


def class_map(raster: BevRaster) -> np.ndarray:
    """Collapse a multi-label raster to one class per cell (ego > agent > route > drivable > background)."""
    order = ["ego", "agent", "route", "drivable"]
    out = np.full(raster.grid.shape, CHANNELS.index("background"), dtype=np.int64)
    for name in reversed(order):
        out[raster.channel(name) > 0.5] = CHANNELS.index(name)
    return out


def observation(scenario: Scenario, grid: GridSpec = DEFAULT_GRID) -> np.ndarray:
    """Model input at t = 0: soft semantic channels plus agent velocity channels.

    Returns ``[len(CHANNELS) + 2, nx, ny]`` float32.
    """
    bev = rasterize_bev(scenario, 0.0, grid, soft=True).data
    vel = np.zeros((2,) + grid.shape)
    cover = np.zeros(grid.shape)
    for agent in scenario.agents:
        m = box_mask(grid, agent.poses[0], agent.length, agent.width, soft=True)
        v = agent.velocities()[0] / VELOCITY_SCALE
        vel += m[None] * v[:, None, None]
        cover += m
    vel = vel / np.maximum(cover, 1.0)
    return np.concatenate([bev, vel]).astype(np.float32)


def swept_ego_mask(traj, grid: GridSpec = DEFAULT_GRID, substep: float = 0.1) -> np.ndarray:
    """Cells touched by the ego footprint anywhere along ``traj``."""
    from ..pdm import ego_poses, substep_times

    poses = ego_poses(np.asarray(traj, float)[None], substep_times(substep))[0]
    out = np.zeros(grid.shape)
    for p in poses:
        out = np.maximum(out, box_mask(grid, p, EGO_LENGTH, EGO_WIDTH))
    return out
