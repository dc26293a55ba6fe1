"""Planner / world-model coupling: ego-token injection, score alignment, joint loss.

The three switches of :class:`~worldplan.config.CouplingConfig` gate the
interfaces between the two halves:

* ``inject_ego_tokens`` feeds projected planner tokens into every world-model
  iteration (zeros otherwise);
* ``proactive_gradient`` places a stop-gradient on everything the planner
  hands to the environment side (trajectories, tokens, planner logits);
* ``use_world_model`` swaps the world model for an MLP reward predictor over
  trajectory tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .config import CouplingConfig, LossWeights, ModelConfig
from .planner import STATUS_SCALE, WAYPOINT_SCALE, EgoPlanner, PlanOutput, mlp
from .world_model import RewardOutput, Rollout, WorldModel, aggregate_reward, select


class TrainingAborted(RuntimeError):
    pass


class StateProjector(nn.Module):
    """Projects the refined planner token at waypoint ``t_i`` into the world model's ego slot."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.K, self.T = cfg.K, cfg.T
        self.steps = cfg.iteration_steps()
        self.proj = mlp([cfg.d, cfg.d, cfg.d])

    def token(self, tokens: torch.Tensor, k: int, t: int) -> torch.Tensor:
        if not 0 <= t < self.T:
            raise ValueError(f"waypoint index {t} outside [0, {self.T})")
        plan = tokens.view(tokens.shape[0], self.K, self.T, -1)
        return self.proj(plan[:, k, t])

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """``[B, K*T, d]`` tokens to ``[B, K, N, d]`` per-iteration ego tokens."""
        plan = tokens.view(tokens.shape[0], self.K, self.T, -1)
        if not self.steps:
            return plan[:, :, :0]
        return self.proj(plan[:, :, self.steps])


class MLPRewardPredictor(nn.Module):
    """Reward MLP over a trajectory token; stands in for the world model in ablations.

    Emits ``(imitation, nc, dac, ttc, comfort, ep)`` logits per candidate.
    """

    def __init__(self, cfg: ModelConfig, dims=(256, 1024, 1024, 6)):
        super().__init__()
        self.tokenizer = nn.Linear(cfg.T * 3 + 3, dims[0])
        self.net = mlp(list(dims), act=nn.ReLU)
        self.register_buffer("wp_scale", torch.tensor(WAYPOINT_SCALE), persistent=False)
        self.register_buffer("status_scale", torch.tensor(STATUS_SCALE), persistent=False)

    def trajectory_token(self, proposals: torch.Tensor, ego_status: torch.Tensor) -> torch.Tensor:
        B, K = proposals.shape[:2]
        flat = (proposals / self.wp_scale).reshape(B, K, -1)
        status = (ego_status * self.status_scale)[:, None].expand(B, K, 3)
        return self.tokenizer(torch.cat([flat, status], -1))

    def forward(self, token: torch.Tensor) -> torch.Tensor:
        return self.net(token)

    def rewards(self, proposals, ego_status) -> RewardOutput:
        out = self(self.trajectory_token(proposals, ego_status))
        return RewardOutput(out[..., 0], out[..., 1:])


def minmax_normalize(R: torch.Tensor) -> torch.Tensor:
    """Per-row min-max scaling to [0, 1]; constant rows map to 0.5."""
    lo = R.min(-1, keepdim=True).values
    hi = R.max(-1, keepdim=True).values
    span = hi - lo
    return torch.where(span > 0, (R - lo) / torch.where(span > 0, span, torch.ones_like(span)), torch.full_like(R, 0.5))


def loss_align(planner_logits: torch.Tensor, R: torch.Tensor) -> torch.Tensor:
    """Mean squared gap between sigmoid planner scores and detached, normalised world-model scores."""
    target = minmax_normalize(R.detach())
    return ((torch.sigmoid(planner_logits) - target) ** 2).mean()


REWARD_TERMS = ("im", "sim", "align")
WM_TERMS = ("wm",)


def total_loss(parts: dict, w: LossWeights) -> torch.Tensor:
    """Joint objective from the partial losses.

    ``parts`` holds any of ``traj``, ``score``, ``aux`` (unit weight, their
    internal coefficients are already applied), ``im``, ``sim``, ``align``
    (weighted by ``w``) and ``wm`` (already weighted by ``cur``/``fut``).
    """
    coeff = {"traj": 1.0, "score": 1.0, "aux": 1.0, "wm": 1.0, "im": w.im, "sim": w.sim, "align": w.align}
    total = None
    for name, value in parts.items():
        if name not in coeff:
            raise KeyError(f"unknown loss term {name!r}")
        v = value.detach() if torch.is_tensor(value) else value
        if not math.isfinite(float(v)):
            raise TrainingAborted(f"non-finite loss term {name!r}: {float(v)}")
        term = coeff[name] * value
        total = term if total is None else total + term
    return total


@dataclass
class SystemOutput:
    plan: PlanOutput
    rewards: RewardOutput
    R: torch.Tensor  # [B, K]
    selected: torch.Tensor  # [B]
    env_proposals: torch.Tensor  # proposals as seen by the environment side
    env_logits: torch.Tensor  # planner logits as seen by the alignment loss
    rollout: Rollout | None = None
    cur_logits: torch.Tensor | None = None
    fut_logits: torch.Tensor | None = None  # selected candidate, final iteration


class DrivingSystem(nn.Module):
    """Planner plus environment module (world model or reward MLP) behind the coupling switches."""

    def __init__(self, cfg: ModelConfig, coupling: CouplingConfig | None = None):
        super().__init__()
        self.cfg = cfg
        self.coupling = coupling or CouplingConfig()
        self.planner = EgoPlanner(cfg)
        if self.coupling.use_world_model:
            self.world_model = WorldModel(cfg)
            self.state_proj = StateProjector(cfg)
            self.reward_mlp = None
        else:
            self.world_model = None
            self.state_proj = None
            self.reward_mlp = MLPRewardPredictor(cfg, self.coupling.mlp_reward_dims)

    def parameter_groups(self) -> dict:
        ego = list(self.planner.parameters())
        ego_ids = {id(p) for p in ego}
        env = [p for p in self.parameters() if id(p) not in ego_ids]
        return {"ego": ego, "env": env}

    def ego_tokens_for_world_model(self, tokens: torch.Tensor) -> torch.Tensor:
        proj = self.state_proj(tokens)
        return proj if self.coupling.inject_ego_tokens else torch.zeros_like(proj)

    def evaluate_candidates(self, obs, ego_status, proposals, tokens):
        """Environment-side scoring of fixed proposals; returns ``(rewards, rollout, bev0)``."""
        if self.world_model is None:
            return self.reward_mlp.rewards(proposals, ego_status), None, None
        wm = self.world_model
        bev0 = wm.encode_initial_bev(obs)
        a0 = wm.encode_action_token(proposals, ego_status)
        roll = wm.rollout(bev0, a0, self.ego_tokens_for_world_model(tokens))
        return wm.reward_heads(roll), roll, bev0

    def forward(self, obs: torch.Tensor, ego_status: torch.Tensor) -> SystemOutput:
        plan = self.planner(obs, ego_status)
        gate = (lambda x: x) if self.coupling.proactive_gradient else (lambda x: x.detach())
        proposals, tokens, logits = gate(plan.proposals), gate(plan.tokens), gate(plan.scores.logits)
        rewards, roll, bev0 = self.evaluate_candidates(obs, ego_status, proposals, tokens)
        R = aggregate_reward(rewards.r_im, rewards.r_sim, self.coupling.reward_weights, self.coupling.log_eps)
        sel = select(R.detach())
        out = SystemOutput(plan, rewards, R, sel, proposals, logits, roll)
        if roll is not None:
            wm = self.world_model
            out.cur_logits = wm.decode_semantic(bev0)
            last = roll.bevs[-1]
            picked = last[torch.arange(last.shape[0]), sel]
            out.fut_logits = wm.decode_semantic(picked)
        return out
