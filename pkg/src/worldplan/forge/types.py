from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SIM_DT = 0.1
HORIZON = 4.0
WAYPOINT_DT = 0.5
NUM_WAYPOINTS = 8
SIM_TIMES = np.round(np.arange(0, round(HORIZON / SIM_DT) + 1) * SIM_DT, 10)
WAYPOINT_TIMES = np.round(np.arange(1, NUM_WAYPOINTS + 1) * WAYPOINT_DT, 10)

EGO_LENGTH = 4.5
EGO_WIDTH = 2.0

BEHAVIORS = ("constant-velocity", "lane-follow", "yielding", "crossing")
TEMPLATES = ("straight", "turn", "merge", "crossing", "leading-vehicle")


def _same(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and np.array_equal(a, b)


@dataclass(eq=False)
class EgoStatus:
    velocity: float
    acceleration: float
    yaw_rate: float

    def __post_init__(self):
        vals = np.array([self.velocity, self.acceleration, self.yaw_rate], dtype=float)
        if not np.all(np.isfinite(vals)):
            raise ValueError(f"non-finite ego status {vals}")
        if self.velocity < 0:
            raise ValueError(f"negative ego velocity {self.velocity}")

    def as_array(self) -> np.ndarray:
        return np.array([self.velocity, self.acceleration, self.yaw_rate], dtype=float)

    def __eq__(self, other):
        if not isinstance(other, EgoStatus):
            return NotImplemented
        return _same(self.as_array(), other.as_array())


@dataclass(eq=False)
class AgentTrack:
    """A non-reactive agent: box footprint plus one pose per simulation step (0.1 s)."""

    agent_id: int
    length: float
    width: float
    poses: np.ndarray
    behavior: str = "constant-velocity"

    def __post_init__(self):
        self.poses = np.asarray(self.poses, dtype=float)
        if self.poses.shape != (len(SIM_TIMES), 3):
            raise ValueError(f"agent {self.agent_id}: poses must be {(len(SIM_TIMES), 3)}, got {self.poses.shape}")
        if not np.all(np.isfinite(self.poses)):
            raise ValueError(f"agent {self.agent_id}: non-finite poses")
        if self.length <= 0 or self.width <= 0:
            raise ValueError(f"agent {self.agent_id}: footprint must be positive")
        if self.behavior not in BEHAVIORS:
            raise ValueError(f"unknown behavior {self.behavior!r}")

    def pose_at(self, t: float) -> np.ndarray:
        idx = round(t / SIM_DT)
        if abs(idx * SIM_DT - t) > 1e-9 or not 0 <= idx < len(SIM_TIMES):
            raise ValueError(f"time {t} is not on the simulation grid")
        return self.poses[idx]

    def velocities(self) -> np.ndarray:
        """Per-step (vx, vy) by finite differences, ``[n_steps, 2]``."""
        v = np.diff(self.poses[:, :2], axis=0) / SIM_DT
        return np.concatenate([v, v[-1:]], axis=0)

    def __eq__(self, other):
        if not isinstance(other, AgentTrack):
            return NotImplemented
        return (
            self.agent_id == other.agent_id
            and self.length == other.length
            and self.width == other.width
            and self.behavior == other.behavior
            and _same(self.poses, other.poses)
        )


@dataclass(eq=False)
class Scenario:
    """A synthetic driving scene in the ego frame at t = 0.

    ``drivable`` is a list of polygons (each ``[n, 2]``) whose union is the
    drivable area; ``expert`` holds the 8 future waypoints at 0.5 s spacing.
    """

    scenario_id: str
    drivable: list
    route: np.ndarray
    agents: list
    ego_status: EgoStatus
    expert: np.ndarray
    rng_seed: int
    template: str = "straight"
    _union: object = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.drivable = [np.asarray(p, dtype=float) for p in self.drivable]
        self.route = np.asarray(self.route, dtype=float)
        self.expert = np.asarray(self.expert, dtype=float)
        if self.expert.shape != (NUM_WAYPOINTS, 3) or not np.all(np.isfinite(self.expert)):
            raise ValueError(f"expert must be a finite {(NUM_WAYPOINTS, 3)} array")

    @property
    def drivable_union(self):
        # shapely is imported lazily; geometry is cached per instance
        if self._union is None:
            import shapely

            self._union = shapely.union_all([shapely.Polygon(p) for p in self.drivable])
            shapely.prepare(self._union)
        return self._union

    def agent_poses(self) -> np.ndarray:
        if not self.agents:
            return np.zeros((0, len(SIM_TIMES), 3))
        return np.stack([a.poses for a in self.agents])

    def agent_sizes(self) -> np.ndarray:
        return np.array([[a.length, a.width] for a in self.agents], dtype=float).reshape(-1, 2)

    def __eq__(self, other):
        if not isinstance(other, Scenario):
            return NotImplemented
        return (
            self.scenario_id == other.scenario_id
            and self.rng_seed == other.rng_seed
            and self.template == other.template
            and len(self.drivable) == len(other.drivable)
            and all(_same(a, b) for a, b in zip(self.drivable, other.drivable))
            and _same(self.route, other.route)
            and self.agents == other.agents
            and self.ego_status == other.ego_status
            and _same(self.expert, other.expert)
        )
