"""Procedural scenario generator.

Scenes are laid out in a world frame per template, an ego start pose is picked
on the route, and everything is then expressed in the ego frame at t = 0. The
expert follows the route with a jerk-limited speed profile; the first profile
that passes the oracle's collision and drivable-area checks is kept.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from ..geometry import box_corners, boxes_overlap, polyline_arclength, sample_polyline, wrap_angle
from .types import (
    EGO_LENGTH,
    EGO_WIDTH,
    SIM_TIMES,
    TEMPLATES,
    WAYPOINT_TIMES,
    AgentTrack,
    EgoStatus,
    Scenario,
)

GENERATOR_VERSION = "1"
LANE = 3.5


class GenerationError(RuntimeError):
    pass


@dataclass
class GeneratorConfig:
    agent_count: tuple = (1, 5)
    template_weights: dict = field(default_factory=lambda: {t: 1.0 for t in TEMPLATES})
    max_retries: int = 50

    def __post_init__(self):
        self.agent_count = tuple(int(v) for v in self.agent_count)
        lo, hi = self.agent_count
        if lo < 0 or hi < lo:
            raise ValueError(f"bad agent_count range {self.agent_count}")
        unknown = set(self.template_weights) - set(TEMPLATES)
        if unknown:
            raise ValueError(f"unknown templates {sorted(unknown)}")
        if sum(self.template_weights.values()) <= 0:
            raise ValueError("template weights must have positive mass")

    @classmethod
    def from_dict(cls, d: dict | None) -> "GeneratorConfig":
        d = dict(d or {})
        if "templates" in d and "template_weights" not in d:
            d["template_weights"] = d.pop("templates")
        return cls(**d)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["agent_count"] = list(self.agent_count)
        return out


def _rect(x0, x1, y0, y1):
    return np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=float)


def _line(p0, p1, step=1.0):
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    n = max(2, int(np.ceil(np.linalg.norm(p1 - p0) / step)) + 1)
    return np.linspace(p0, p1, n)


def _concat(*parts):
    out = [parts[0]]
    for p in parts[1:]:
        out.append(p[1:] if np.allclose(p[0], out[-1][-1]) else p)
    return np.concatenate(out)


@dataclass
class _Layout:
    drivable: list
    route: np.ndarray
    s_start: float
    v_des: float
    lanes: list  # agent lanes as world-frame polylines
    key_agent: object = None  # callable(rng, ctx) -> (lane polyline, s0, speed, behavior, extra)


# --- agent motion ---------------------------------------------------------

def _track_along(lane: np.ndarray, s0: float, speed: float, brake_at=None, decel=0.0) -> np.ndarray:
    t = SIM_TIMES
    if brake_at is None:
        s = s0 + speed * t
    else:
        t_stop = brake_at + speed / max(decel, 1e-9)
        tt = np.minimum(t, t_stop)
        s = s0 + speed * tt - 0.5 * decel * np.maximum(tt - brake_at, 0.0) ** 2
    return sample_polyline(lane, s)


def _random_agent(rng, lane, s_range, speed_range):
    s0 = rng.uniform(*s_range)
    speed = rng.uniform(*speed_range)
    behavior = str(rng.choice(["constant-velocity", "lane-follow"]))
    return _track_along(lane, s0, speed), behavior


# --- templates ------------------------------------------------------------

def _straight_lanes():
    return [_line((-40, y), (140, y)) for y in (-LANE, 0.0, LANE)]


def _layout_straight(rng):
    lanes = _straight_lanes()
    return _Layout(
        drivable=[_rect(-40, 140, -1.5 * LANE, 1.5 * LANE)],
        route=lanes[1],
        s_start=40.0,
        v_des=rng.uniform(6, 12),
        lanes=lanes,
    )


def _layout_leading(rng):
    lay = _layout_straight(rng)
    lay.v_des = rng.uniform(8, 12)

    def lead(rng, ctx):
        speed = rng.uniform(2, 8)
        s0 = ctx["s_start"] + rng.uniform(10, 25)
        if rng.random() < 0.6:
            track = _track_along(lay.route, s0, speed, brake_at=rng.uniform(0, 2), decel=rng.uniform(1.5, 4))
            return track, "yielding"
        return _track_along(lay.route, s0, speed), "constant-velocity"

    lay.key_agent = lead
    return lay


def _layout_turn(rng):
    sign = 1.0 if rng.random() < 0.5 else -1.0
    R = rng.uniform(12, 18)
    xs = 0.0
    phi = np.linspace(0, np.pi / 2, max(8, int(np.ceil(R * np.pi / 2 / 0.5))))
    arc = np.stack([xs + R * np.sin(phi), sign * R * (1 - np.cos(phi))], axis=1)
    exit_x = xs + R
    route = _concat(_line((-40, 0), (xs, 0)), arc, _line((exit_x, sign * R), (exit_x, sign * 120)))
    y_lo, y_hi = (0.0, R + 1.5 * LANE) if sign > 0 else (-(R + 1.5 * LANE), 0.0)
    drivable = [
        _rect(-40, exit_x + 1.5 * LANE, -1.5 * LANE, 1.5 * LANE),
        _rect(xs - 3, exit_x + 1.5 * LANE, y_lo, y_hi),
        _rect(exit_x - 1.5 * LANE, exit_x + 1.5 * LANE, *sorted((0.0, sign * 120))),
    ]
    through = [_line((-40, y), (exit_x + 1.5 * LANE, y)) for y in (-LANE * sign,)]
    exit_lanes = [_line((exit_x + dx, sign * R), (exit_x + dx, sign * 120)) for dx in (-LANE, LANE)]
    s_arc0 = 40.0
    return _Layout(
        drivable=drivable,
        route=route,
        s_start=s_arc0 + rng.uniform(-20, 0.5 * R * np.pi / 2),
        v_des=rng.uniform(0.35, 0.5) * R,
        lanes=[route] + through + exit_lanes,
    )


def _layout_merge(rng):
    xe = rng.uniform(30, 45)
    x1 = rng.uniform(5, xe - 25)
    xm = np.arange(x1, x1 + 20 + 1e-9, 0.5)
    ym = LANE * 0.5 * (1 - np.cos(np.pi * (xm - x1) / 20))
    route = _concat(_line((-40, 0), (x1, 0)), np.stack([xm, ym], 1), _line((x1 + 20, LANE), (140, LANE)))
    drivable = [_rect(-40, 140, LANE / 2, 2.5 * LANE), _rect(-40, xe, -LANE / 2, LANE / 2)]
    lanes = [_line((-40, LANE), (140, LANE)), _line((-40, 2 * LANE), (140, 2 * LANE))]
    lay = _Layout(drivable=drivable, route=route, s_start=40.0, v_des=rng.uniform(7, 11), lanes=lanes)

    def merging_traffic(rng, ctx):
        s0 = 40.0 + rng.uniform(-5, 35)
        return _track_along(lanes[0], s0, rng.uniform(4, 11)), "lane-follow"

    lay.key_agent = merging_traffic
    return lay


def _layout_crossing(rng):
    xc = rng.uniform(12, 30)
    lanes = _straight_lanes()
    drivable = [_rect(-40, 140, -1.5 * LANE, 1.5 * LANE), _rect(xc - 1.5 * LANE, xc + 1.5 * LANE, -100, 100)]
    lay = _Layout(drivable=drivable, route=lanes[1], s_start=40.0, v_des=rng.uniform(7, 12), lanes=lanes)

    def crosser(rng, ctx):
        sign = 1.0 if rng.random() < 0.5 else -1.0
        speed = rng.uniform(4, 10)
        t_cross = rng.uniform(0.5, 3.0)
        x = xc - sign * LANE / 2
        lane = _line((x, -sign * 100), (x, sign * 100))
        s0 = 100.0 - speed * t_cross
        return _track_along(lane, s0, speed), "crossing"

    lay.key_agent = crosser
    return lay


_LAYOUTS = {
    "straight": _layout_straight,
    "leading-vehicle": _layout_leading,
    "turn": _layout_turn,
    "merge": _layout_merge,
    "crossing": _layout_crossing,
}


# --- expert ---------------------------------------------------------------

def speed_profile(v0: float, a0: float, v_target: float, times, max_acc=2.0, max_dec=2.8,
                  max_jerk=4.0, dt=0.01) -> np.ndarray:
    """Distance travelled at ``times`` under a jerk-limited speed tracker (no reversing)."""
    n = int(round(max(times) / dt))
    v, a, s = v0, a0, 0.0
    out = np.zeros(n + 1)
    for i in range(n):
        a_cmd = np.clip(1.5 * (v_target - v), -max_dec, max_acc)
        a += np.clip(a_cmd - a, -max_jerk * dt, max_jerk * dt)
        v_next = v + a * dt
        if v_next < 0:
            v_next, a = 0.0, 0.0
        s += 0.5 * (v + v_next) * dt
        v = v_next
        out[i + 1] = s
    idx = np.round(np.asarray(times) / dt).astype(int)
    return out[idx]


def _to_ego(points_or_poses: np.ndarray, origin: np.ndarray) -> np.ndarray:
    x0, y0, th0 = origin
    c, s = np.cos(th0), np.sin(th0)
    arr = np.asarray(points_or_poses, dtype=float)
    dx, dy = arr[..., 0] - x0, arr[..., 1] - y0
    out = arr.copy()
    out[..., 0] = c * dx + s * dy
    out[..., 1] = -s * dx + c * dy
    if arr.shape[-1] == 3:
        out[..., 2] = wrap_angle(arr[..., 2] - th0)
    return out


def _curvature(route, s):
    h = sample_polyline(route, np.array([s - 1.0, s + 1.0]))[:, 2]
    return float(wrap_angle(h[1] - h[0]) / 2.0)


def generate_scenario(seed: int, config: GeneratorConfig | None = None) -> Scenario:
    """Deterministic scenario for ``(seed, config)``.

    Raises:
        GenerationError: when no collision-free, drivable expert was found
            within ``config.max_retries`` agent resamplings.
    """
    from ..pdm import rollout_check_batch  # local import: pdm depends on forge.types

    config = config or GeneratorConfig()
    if seed < 0:
        raise ValueError("seed must be non-negative")
    rng = np.random.default_rng(seed)
    names = [t for t in TEMPLATES if config.template_weights.get(t, 0) > 0]
    w = np.array([config.template_weights[t] for t in names], dtype=float)
    template = str(rng.choice(names, p=w / w.sum()))
    lay = _LAYOUTS[template](rng)

    origin = sample_polyline(lay.route, np.array(lay.s_start))
    route_len = polyline_arclength(lay.route)[-1]
    v0 = float(max(0.5, lay.v_des * rng.uniform(0.7, 1.1)))
    status = EgoStatus(velocity=v0, acceleration=float(rng.uniform(-0.5, 0.5)),
                       yaw_rate=v0 * _curvature(lay.route, lay.s_start))

    ego_box0 = box_corners(np.zeros(3), EGO_LENGTH + 4.0, EGO_WIDTH + 1.0)
    ctx = {"s_start": lay.s_start, "v0": v0}
    targets = [lay.v_des, v0, 0.7 * v0, 0.4 * v0, 0.0]

    for attempt in range(config.max_retries):
        n_agents = int(rng.integers(config.agent_count[0], config.agent_count[1] + 1))
        agents: list[AgentTrack] = []
        corners_so_far = []
        tries = 0
        while len(agents) < n_agents and tries < 20 * max(n_agents, 1):
            tries += 1
            if not agents and lay.key_agent is not None:
                poses, behavior = lay.key_agent(rng, ctx)
            else:
                lane = lay.lanes[int(rng.integers(len(lay.lanes)))]
                poses, behavior = _random_agent(rng, lane, (lay.s_start - 25, lay.s_start + 70), (2, 12))
            poses = _to_ego(poses, origin)
            length, width = float(rng.uniform(4.0, 5.0)), float(rng.uniform(1.8, 2.1))
            corners = box_corners(poses, length, width)
            if boxes_overlap(corners[0], ego_box0):
                continue
            # agents behind the ego in its lane must not outrun it
            if poses[0, 0] < 0 and abs(poses[0, 1]) < LANE / 2 and (poses[-1, 0] - poses[0, 0]) / 4.0 > 0.8 * v0:
                continue
            if any(boxes_overlap(corners, c).any() for c in corners_so_far):
                continue
            corners_so_far.append(corners)
            agents.append(AgentTrack(len(agents), length, width, poses, behavior))

        if len(agents) < n_agents:
            continue
        route_ego = _to_ego(lay.route, origin)
        drivable_ego = [_to_ego(p, origin) for p in lay.drivable]
        candidates = []
        for v_t in targets:
            s = speed_profile(v0, status.acceleration, v_t, WAYPOINT_TIMES)
            s_abs = np.minimum(lay.s_start + s, route_len - 1e-6)
            candidates.append(_to_ego(sample_polyline(lay.route, s_abs), origin))
        candidates = np.stack(candidates)
        probe = Scenario(f"s{seed:06d}", drivable_ego, route_ego, agents, status, candidates[0], seed, template)
        sub = rollout_check_batch(probe, candidates)
        safe = (sub[:, 0] == 1) & (sub[:, 1] == 1)
        preferred = safe & (sub[:, 2] == 1) & (sub[:, 3] == 1)
        pick = np.flatnonzero(preferred if preferred.any() else safe)
        if len(pick) == 0:
            continue
        expert = candidates[pick[0]]
        return Scenario(f"s{seed:06d}", drivable_ego, route_ego, agents, status, expert, seed, template)

    raise GenerationError(f"seed {seed}: no feasible expert after {config.max_retries} attempts")
