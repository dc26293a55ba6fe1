import sys

import numpy as np
import pytest
import torch

from worldplan.forge import AgentTrack, EgoStatus, Scenario, generate_scenario
from worldplan.forge.types import SIM_TIMES


def straight_road(length=120.0, half_width=5.25, x0=-30.0):
    return [np.array([[x0, -half_width], [x0 + length, -half_width], [x0 + length, half_width], [x0, half_width]])]


def constant_track(x, y, theta=0.0, vx=0.0, vy=0.0):
    t = SIM_TIMES
    return np.stack([x + vx * t, y + vy * t, np.full_like(t, theta)], axis=1)


def cruise_expert(speed=8.0):
    t = np.arange(1, 9) * 0.5
    return np.stack([speed * t, np.zeros(8), np.zeros(8)], axis=1)


def make_scenario(agents=(), expert=None, speed=8.0, sid="hand", drivable=None, route=None):
    """A hand-built straight-road scenario in the ego frame."""
    return Scenario(
        scenario_id=sid,
        drivable=drivable if drivable is not None else straight_road(),
        route=route if route is not None else np.stack([np.linspace(-30, 90, 121), np.zeros(121)], 1),
        agents=list(agents),
        ego_status=EgoStatus(speed, 0.0, 0.0),
        expert=cruise_expert(speed) if expert is None else expert,
        rng_seed=0,
    )


def agent(aid, poses, length=4.0, width=2.0, behavior="constant-velocity"):
    return AgentTrack(aid, length, width, poses, behavior)


@pytest.fixture(scope="session")
def scenarios():
    return [generate_scenario(s) for s in range(24)]


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


# gradient-check scale: d = 8, K = 2, T = 4, h = w = 4
TOY_MODEL = dict(d=8, K=2, T=4, L=2, N=2, h=4, w=4, heads=2, n_points=2, wm_heads=2, wm_layers=1,
                 ff_mult=2, agent_slots=2, agent_steps=2)
TOY_REWARD_DIMS = (8, 16, 16, 6)


def toy_inputs(B=2, h=4, w=4, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    obs = torch.rand(B, 7, h, w, generator=g, dtype=dtype)
    status = torch.rand(B, 3, generator=g, dtype=dtype) * torch.tensor([10.0, 1.0, 0.2], dtype=dtype)
    return obs, status


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS, key=lambda s: int(s.split()[1])):
        terminalreporter.write_line(line)
