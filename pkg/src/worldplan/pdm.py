"""Closed-loop trajectory scoring against a synthetic scenario.

The ego follows the piecewise-linear interpolation of its waypoints (with the
origin at t = 0); agents replay their logged tracks. Five subscores are
produced and combined into the PDM score::

    pdms = nc * dac * (5 * ep + 5 * ttc + 2 * comfort) / 12
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np
import shapely

from .forge.types import NUM_WAYPOINTS, SIM_TIMES, WAYPOINT_DT, EGO_LENGTH, EGO_WIDTH, HORIZON, Scenario
from .geometry import box_corners, interpolate_poses, poses_overlap, project_to_polyline, wrap_angle

SUBSCORE_NAMES = ("nc", "dac", "ttc", "comfort", "ep")


@dataclass(frozen=True)
class Subscores:
    nc: float
    dac: float
    ttc: float
    comfort: float
    ep: float

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (math.isfinite(v) and 0.0 <= v <= 1.0):
                raise ValueError(f"subscore {f.name}={v} outside [0, 1]")

    def as_array(self) -> np.ndarray:
        return np.array([self.nc, self.dac, self.ttc, self.comfort, self.ep], dtype=float)

    @classmethod
    def from_array(cls, arr) -> "Subscores":
        return cls(*(float(v) for v in arr))


@dataclass(frozen=True)
class PdmParams:
    """Oracle thresholds. Defaults follow the usual PDM-style checks."""

    substep: float = 0.1
    ttc_threshold: float = 0.95
    ttc_step: float = 0.1
    max_accel: float = 3.0
    max_jerk: float = 6.0
    max_yaw_rate: float = 0.6


DEFAULT_PARAMS = PdmParams()


def pdms(s: Subscores) -> float:
    """Aggregate PDM score. Raises ``ValueError`` for out-of-range fields."""
    if not isinstance(s, Subscores):
        s = Subscores.from_array(s)
    return s.nc * s.dac * (5.0 * s.ep + 5.0 * s.ttc + 2.0 * s.comfort) / 12.0


def pdms_array(subscores: np.ndarray) -> np.ndarray:
    """Vectorised :func:`pdms` over ``[..., 5]`` arrays in ``SUBSCORE_NAMES`` order."""
    s = np.asarray(subscores, dtype=float)
    if np.any(~np.isfinite(s)) or np.any(s < 0) or np.any(s > 1):
        raise ValueError("subscores must lie in [0, 1]")
    nc, dac, ttc, c, ep = np.moveaxis(s, -1, 0)
    return nc * dac * (5.0 * ep + 5.0 * ttc + 2.0 * c) / 12.0


def _check_trajs(trajs) -> np.ndarray:
    trajs = np.asarray(trajs, dtype=float)
    if trajs.ndim == 2:
        trajs = trajs[None]
    if trajs.shape[1:] != (NUM_WAYPOINTS, 3):
        raise ValueError(f"trajectory must have shape {(NUM_WAYPOINTS, 3)}, got {trajs.shape[1:]}")
    if not np.all(np.isfinite(trajs)):
        raise ValueError("trajectory contains non-finite waypoints")
    return trajs


def substep_times(substep: float) -> np.ndarray:
    n = int(round(HORIZON / substep))
    return np.arange(n + 1) * (HORIZON / n)


def ego_poses(trajs: np.ndarray, times: np.ndarray) -> np.ndarray:
    """Interpolated ego poses ``[n, len(times), 3]``; the origin is the t = 0 pose."""
    full = np.concatenate([np.zeros((trajs.shape[0], 1, 3)), trajs], axis=1)
    knots = np.arange(NUM_WAYPOINTS + 1) * WAYPOINT_DT
    return interpolate_poses(knots, full, times)


def _forward_velocity(poses: np.ndarray, times: np.ndarray) -> np.ndarray:
    v = np.diff(poses[..., :2], axis=-2) / np.diff(times)[:, None]
    return np.concatenate([v, v[..., -1:, :]], axis=-2)


def collision_flags(scenario: Scenario, trajs, substep: float = 0.1) -> np.ndarray:
    """Per-trajectory flag: does the ego box overlap any agent box at any substep?"""
    trajs = _check_trajs(trajs)
    times = substep_times(substep)
    if not scenario.agents:
        return np.zeros(len(trajs), dtype=bool)
    ego = ego_poses(trajs, times)  # [n, S, 3]
    agents = interpolate_poses(SIM_TIMES, scenario.agent_poses(), times)  # [A, S, 3]
    sizes = scenario.agent_sizes()
    hit = poses_overlap(ego[:, None], EGO_LENGTH, EGO_WIDTH,
                        agents[None], sizes[None, :, 0:1], sizes[None, :, 1:2])  # [n, A, S]
    return hit.any(axis=(1, 2))


def _drivable_compliance(scenario: Scenario, ego_corners: np.ndarray) -> np.ndarray:
    n, S = ego_corners.shape[:2]
    polys = shapely.polygons(ego_corners.reshape(n * S, 4, 2))
    inside = shapely.covers(scenario.drivable_union, polys).reshape(n, S)
    return inside.all(axis=1)


def _ttc_ok(scenario, ego_pose, ego_vel, times, params: PdmParams) -> np.ndarray:
    if not scenario.agents:
        return np.ones(ego_pose.shape[0], dtype=bool)
    taus = np.arange(0.0, params.ttc_threshold, params.ttc_step)
    agents = interpolate_poses(SIM_TIMES, scenario.agent_poses(), times)  # [A, S, 3]
    agent_vel = _forward_velocity(agents, times)
    sizes = scenario.agent_sizes()
    ego_proj = ego_pose[:, :, None, :].repeat(len(taus), axis=2)  # [n, S, U, 3]
    ego_proj[..., :2] += ego_vel[:, :, None, :] * taus[:, None]
    ag_proj = agents[:, :, None, :].repeat(len(taus), axis=2)  # [A, S, U, 3]
    ag_proj[..., :2] += agent_vel[:, :, None, :] * taus[:, None]
    hit = poses_overlap(ego_proj[:, None], EGO_LENGTH, EGO_WIDTH, ag_proj[None],
                        sizes[None, :, 0, None, None], sizes[None, :, 1, None, None])  # [n, A, S, U]
    return ~hit.any(axis=(1, 2, 3))


def comfort_ok(trajs: np.ndarray, params: PdmParams = DEFAULT_PARAMS) -> np.ndarray:
    """Comfort from waypoint finite differences (longitudinal accel, jerk, yaw rate)."""
    full = np.concatenate([np.zeros((trajs.shape[0], 1, 3)), trajs], axis=1)
    dt = WAYPOINT_DT
    d = np.diff(full[..., :2], axis=1)
    dth = wrap_angle(np.diff(full[..., 2], axis=1))
    mid = full[:, :-1, 2] + dth / 2.0
    speed = (d[..., 0] * np.cos(mid) + d[..., 1] * np.sin(mid)) / dt
    acc = np.diff(speed, axis=1) / dt
    jerk = np.diff(acc, axis=1) / dt
    yaw_rate = dth / dt
    return (
        (np.abs(acc) <= params.max_accel).all(1)
        & (np.abs(jerk) <= params.max_jerk).all(1)
        & (np.abs(yaw_rate) <= params.max_yaw_rate).all(1)
    )


def route_progress(scenario: Scenario, trajs: np.ndarray) -> np.ndarray:
    s_end = project_to_polyline(trajs[:, -1, :2], scenario.route)
    s_start = project_to_polyline(np.zeros(2), scenario.route)
    return s_end - s_start


def rollout_check_batch(scenario: Scenario, trajs, params: PdmParams = DEFAULT_PARAMS) -> np.ndarray:
    """Subscores for every trajectory in ``trajs`` (``[n, T, 3]``) as an ``[n, 5]`` array."""
    trajs = _check_trajs(trajs)
    times = substep_times(params.substep)
    pose = ego_poses(trajs, times)
    vel = _forward_velocity(pose, times)
    corners = box_corners(pose, EGO_LENGTH, EGO_WIDTH)

    nc = ~collision_flags(scenario, trajs, params.substep)
    dac = _drivable_compliance(scenario, corners)
    ttc = _ttc_ok(scenario, pose, vel, times, params)
    comfort = comfort_ok(trajs, params)

    expert_progress = route_progress(scenario, scenario.expert[None])[0]
    progress = route_progress(scenario, trajs)
    if expert_progress > 1e-6:
        ep = np.clip(progress / expert_progress, 0.0, 1.0)
    else:
        ep = np.ones(len(trajs))
    return np.stack([nc, dac, ttc, comfort, ep], axis=1).astype(float)


def rollout_check(scenario: Scenario, traj, params: PdmParams = DEFAULT_PARAMS) -> Subscores:
    return Subscores.from_array(rollout_check_batch(scenario, traj, params)[0])


def online_pdm_targets(scenario: Scenario, proposals, params: PdmParams = DEFAULT_PARAMS) -> np.ndarray:
    """PDM score of each of the ``K`` proposals, recomputed from scratch."""
    return pdms_array(rollout_check_batch(scenario, proposals, params))


@dataclass
class AnchorSet:
    """Fixed anchor trajectories plus their oracle subscores per scenario id."""

    anchors: np.ndarray
    metrics: dict

    def metrics_for(self, scenario_id: str) -> np.ndarray:
        try:
            return self.metrics[scenario_id]
        except KeyError:
            raise KeyError(f"no anchor metrics precomputed for scenario {scenario_id!r}") from None

    def add_metrics(self, scenarios, params: PdmParams = DEFAULT_PARAMS) -> None:
        for sc in scenarios:
            if sc.scenario_id not in self.metrics:
                self.metrics[sc.scenario_id] = rollout_check_batch(sc, self.anchors, params)


def _unique_rows(flat: np.ndarray) -> np.ndarray:
    _, first = np.unique(flat, axis=0, return_index=True)
    return flat[np.sort(first)]


def build_anchor_set(expert_trajs, M: int, scenarios=(), seed: int = 0,
                     params: PdmParams = DEFAULT_PARAMS) -> AnchorSet:
    """Cluster the expert pool into ``M`` anchors (k-means in flattened waypoint space).

    When ``M`` reaches the number of distinct experts the deduplicated experts
    are used as-is. Anchor subscores are precomputed for each scenario given.
    """
    pool = np.asarray(expert_trajs, dtype=float)
    if M < 1:
        raise ValueError("M must be at least 1")
    if M > len(pool):
        raise ValueError(f"M={M} exceeds the expert pool size {len(pool)}")
    flat = pool.reshape(len(pool), -1)
    unique = _unique_rows(flat)
    if M >= len(unique):
        centers = unique
    else:
        from sklearn.cluster import KMeans

        km = KMeans(n_clusters=M, random_state=seed, n_init=4).fit(flat)
        centers = _unique_rows(km.cluster_centers_)
    anchors = centers.reshape(len(centers), *pool.shape[1:])
    aset = AnchorSet(anchors=anchors, metrics={})
    aset.add_metrics(scenarios, params)
    return aset


def nearest_anchor(trajs, anchors: np.ndarray) -> np.ndarray:
    """Index of the L2-nearest anchor for each trajectory; ties go to the lowest index."""
    trajs = np.asarray(trajs, dtype=float)
    single = trajs.ndim == 2
    if single:
        trajs = trajs[None]
    diff = trajs.reshape(len(trajs), 1, -1) - anchors.reshape(1, len(anchors), -1)
    idx = (diff**2).sum(-1).argmin(-1)
    return idx[0] if single else idx
