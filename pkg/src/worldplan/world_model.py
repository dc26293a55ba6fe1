"""Recurrent BEV world model that scores candidate trajectories.

Each candidate evolves its own token sequence ``[action; ego; bev cells]``
through a shared transformer encoder for ``N`` iterations. Reward heads read
a pooled summary of the rollout; the scores are combined with a weighted sum
of logs and the best candidate is picked by argmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig
from .planner import STATUS_SCALE, WAYPOINT_SCALE, SceneEncoder, mlp, sigmoid_focal

SIM_ORDER = ("nc", "dac", "ttc", "comfort", "ep")


@dataclass
class Rollout:
    actions: list  # a_0..a_N, each [B, K, d]
    states: list  # s_hat_0..s_hat_{N-1}, each [B, K, d]
    bevs: list  # B_0..B_N, each [B, K, hw, d]


@dataclass
class RewardOutput:
    im_logits: torch.Tensor  # [B, K]
    sim_logits: torch.Tensor  # [B, K, 5]

    @property
    def r_im(self) -> torch.Tensor:
        return self.im_logits.softmax(-1)

    @property
    def r_sim(self) -> torch.Tensor:
        return torch.sigmoid(self.sim_logits)


class WorldModel(nn.Module):
    def __init__(self, cfg: ModelConfig, n_sem: int = 5):
        super().__init__()
        self.cfg = cfg
        d = cfg.d
        self.hw = cfg.h * cfg.w
        self.bev_encoder = SceneEncoder(cfg.in_channels, d, cfg.h, cfg.w, with_pos=False)
        self.action_encoder = mlp([cfg.T * 3 + 3, d, d])
        self.scene_pos = nn.Parameter(torch.randn(self.hw + 2, d) * 0.02)
        layer = nn.TransformerEncoderLayer(
            d, cfg.wm_heads, cfg.ff_mult * d, dropout=0.0, activation="gelu", batch_first=True
        )
        self.encoder = nn.TransformerEncoder(layer, cfg.wm_layers, enable_nested_tensor=False)
        self.im_head = mlp([3 * d, d, 1])
        self.sim_head = mlp([3 * d, d, 5])
        self.semantic_head = mlp([d, d, n_sem])
        self.register_buffer("wp_scale", torch.tensor(WAYPOINT_SCALE), persistent=False)
        self.register_buffer("status_scale", torch.tensor(STATUS_SCALE), persistent=False)

    def encode_initial_bev(self, obs: torch.Tensor) -> torch.Tensor:
        """``[B, C, h, w]`` rasters to ``B_0`` of shape ``[B, hw, d]``."""
        fmap = self.bev_encoder(obs).feature_map
        return fmap.flatten(2).transpose(1, 2)

    def encode_action_token(self, proposals: torch.Tensor, ego_status: torch.Tensor) -> torch.Tensor:
        """``[B, K, T, 3]`` proposals plus ``[B, 3]`` status to ``[B, K, d]`` action tokens."""
        B, K = proposals.shape[:2]
        flat = (proposals / self.wp_scale).reshape(B, K, -1)
        status = (ego_status * self.status_scale)[:, None].expand(B, K, 3)
        return self.action_encoder(torch.cat([flat, status], -1))

    def step(self, seq: torch.Tensor):
        """One world-model iteration on ``[n, hw + 2, d]`` sequences.

        Returns ``(a_next [n, d], s_hat [n, d], bev_next [n, hw, d])``.
        """
        if seq.shape[1] != self.hw + 2:
            raise ValueError(f"sequence length {seq.shape[1]} != hw + 2 = {self.hw + 2}")
        out = self.encoder(seq + self.scene_pos)
        return out[:, 0], out[:, 1], out[:, 2:]

    def rollout(self, bev0: torch.Tensor, actions0: torch.Tensor, ego_tokens: torch.Tensor, N: int | None = None) -> Rollout:
        """Evolve every candidate for ``N`` iterations, batched over ``B * K``.

        ``ego_tokens`` is ``[B, K, N, d]``; pass zeros to disable injection.
        """
        N = self.cfg.N if N is None else N
        B, K, d = actions0.shape
        bev = bev0[:, None].expand(B, K, -1, -1)
        actions, states, bevs = [actions0], [], [bev]
        a = actions0.reshape(B * K, d)
        cur = bev.reshape(B * K, -1, d)
        for i in range(N):
            s = ego_tokens[:, :, i].reshape(B * K, 1, d)
            a, s_hat, cur = self.step(torch.cat([a[:, None], s, cur], 1))
            actions.append(a.view(B, K, d))
            states.append(s_hat.view(B, K, d))
            bevs.append(cur.view(B, K, -1, d))
        return Rollout(actions, states, bevs)

    def reward_heads(self, roll: Rollout) -> RewardOutput:
        a = torch.stack(roll.actions).mean(0)
        pooled = torch.stack([b.mean(2) for b in roll.bevs]).mean(0)
        s = torch.stack(roll.states).mean(0) if roll.states else torch.zeros_like(a)
        rep = torch.cat([a, pooled, s], -1)
        return RewardOutput(self.im_head(rep).squeeze(-1), self.sim_head(rep))

    def decode_semantic(self, bev: torch.Tensor) -> torch.Tensor:
        """``[..., hw, d]`` BEV state to ``[..., C_sem, h, w]`` logits."""
        logits = self.semantic_head(bev)
        return logits.transpose(-1, -2).reshape(*bev.shape[:-2], -1, self.cfg.h, self.cfg.w)


def aggregate_reward(r_im: torch.Tensor, r_sim: torch.Tensor, weights=(1.0, 1.0, 1.0, 1.0), eps: float = 1e-4) -> torch.Tensor:
    """Weighted log-sum of imitation and simulation scores; ``r_sim`` is ``[..., 5]``."""
    w = [float(v) for v in weights]
    if any(v < 0 for v in w):
        raise ValueError("reward weights must be non-negative")
    nc, dac, ttc, comfort, ep = r_sim.unbind(-1)
    soft = 5.0 * ttc + 2.0 * comfort + 5.0 * ep
    return (
        w[0] * r_im.clamp_min(eps).log()
        + w[1] * nc.clamp_min(eps).log()
        + w[2] * dac.clamp_min(eps).log()
        + w[3] * soft.clamp_min(eps).log()
    )


def select(R: torch.Tensor) -> torch.Tensor:
    """Index of the best candidate along the last axis (first index on ties)."""
    return torch.argmax(R, dim=-1)


def loss_im(r_im: torch.Tensor, proposals: torch.Tensor, expert: torch.Tensor, eps: float = 1e-4) -> torch.Tensor:
    """Cross-entropy against the softmax of negative L2 distances to the expert."""
    dist = (proposals.detach() - expert[:, None]).flatten(2).norm(dim=-1)
    q = torch.softmax(-dist, dim=-1)
    return -(q * r_im.clamp_min(eps).log()).sum(-1).mean()


def loss_sim(sim_logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """BCE of each candidate's predicted subscores against its nearest anchor's metrics."""
    if sim_logits.shape != targets.shape:
        raise ValueError(f"sim targets shape {tuple(targets.shape)} != {tuple(sim_logits.shape)}")
    return F.binary_cross_entropy_with_logits(sim_logits, targets)


def semantic_focal(logits: torch.Tensor, target: torch.Tensor, alpha: float | None = 0.25, gamma: float = 2.0) -> torch.Tensor:
    """Focal loss summed over channels and averaged over cells (and batch)."""
    if logits.shape != target.shape:
        raise ValueError(f"semantic target shape {tuple(target.shape)} != {tuple(logits.shape)}")
    return sigmoid_focal(logits, target, alpha, gamma).sum(-3).mean()


def loss_wm(cur_logits, fut_logits, cur_target, fut_target, lam_cur=1.0, lam_fut=1.0,
            alpha: float | None = 0.25, gamma: float = 2.0) -> torch.Tensor:
    return (lam_cur * semantic_focal(cur_logits, cur_target, alpha, gamma)
            + lam_fut * semantic_focal(fut_logits, fut_target, alpha, gamma))
