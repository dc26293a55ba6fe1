"""Query-centric ego planner.

Learnable ego tokens (one per proposal waypoint, ``K * T`` in total) are
conditioned on the ego status, decoded into waypoints, and refined ``L`` times
by a shared refiner block that attends to the scene feature map at each
token's own waypoint (bilinear sampling plus learned offsets).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .config import LossWeights, ModelConfig

# waypoint / status normalisation shared by every module that ingests them
WAYPOINT_SCALE = (10.0, 10.0, 1.0)
STATUS_SCALE = (0.1, 0.5, 2.0)


@dataclass
class SceneFeatures:
    feature_map: torch.Tensor  # [B, d, h, w]
    pos: torch.Tensor  # [B, d, h, w]


@dataclass
class PlannerScores:
    logits: torch.Tensor  # [B, K] planner-side proposal score
    valid_logits: torch.Tensor  # [B, A]
    agent_states: torch.Tensor  # [B, A, T_a, 2]
    area_logits: torch.Tensor  # [B, h, w]
    bev_logits: torch.Tensor  # [B, C_sem, h, w]
    det_logits: torch.Tensor  # [B, A]
    det_boxes: torch.Tensor  # [B, A, 4] (x, y, length, width)


@dataclass
class PlanOutput:
    proposals: torch.Tensor  # [B, K, T, 3] final stage
    stage_trajs: list  # supervised stages, each [B, K, T, 3]
    tokens: torch.Tensor  # [B, K*T, d] refined ego tokens
    scores: PlannerScores
    scene: SceneFeatures


def mlp(dims, act=nn.GELU):
    layers = []
    for i in range(len(dims) - 1):
        layers.append(nn.Linear(dims[i], dims[i + 1]))
        if i < len(dims) - 2:
            layers.append(act())
    return nn.Sequential(*layers)


class SceneEncoder(nn.Module):
    """Small convolutional encoder from observation rasters to a ``d``-channel map."""

    def __init__(self, in_channels: int, d: int, h: int, w: int, with_pos: bool = True):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_channels, d, 3, padding=1), nn.GELU(),
            nn.Conv2d(d, d, 3, padding=1), nn.GELU(),
        )
        self.out = nn.Conv2d(d, d, 1)
        self.pos = nn.Parameter(torch.randn(1, d, h, w) * 0.02) if with_pos else None

    def forward(self, obs: torch.Tensor) -> SceneFeatures:
        fmap = self.out(self.body(obs))
        pos = self.pos.expand(fmap.shape[0], -1, -1, -1) if self.pos is not None else torch.zeros_like(fmap)
        return SceneFeatures(fmap, pos)


def sample_at(fmap: torch.Tensor, xy: torch.Tensor, extent) -> torch.Tensor:
    """Bilinearly sample ``fmap`` (``[B, C, h, w]``) at metric points ``xy`` (``[B, n, 2]``).

    Row index follows x, column index follows y; points outside the map read zeros.
    Returns ``[B, n, C]``.
    """
    x0, x1, y0, y1 = extent
    u = 2.0 * (xy[..., 0] - x0) / (x1 - x0) - 1.0
    v = 2.0 * (xy[..., 1] - y0) / (y1 - y0) - 1.0
    grid = torch.stack([v, u], dim=-1).unsqueeze(2)  # grid_sample wants (col, row)
    out = F.grid_sample(fmap, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    return out.squeeze(-1).transpose(1, 2)


class EgoRefiner(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d, H, P = cfg.d, cfg.heads, cfg.n_points
        self.heads, self.points = H, P
        self.extent = cfg.extent
        self.cell = (cfg.extent[1] - cfg.extent[0]) / cfg.h
        self.self_attn = nn.MultiheadAttention(d, H, batch_first=True)
        self.norm1 = nn.LayerNorm(d)
        self.wp_embed = nn.Linear(3, d)
        self.offsets = nn.Linear(d, H * P * 2)
        self.attn = nn.Linear(d, H * P)
        self.value = nn.Linear(d, d)
        self.out = nn.Linear(d, d)
        self.norm2 = nn.LayerNorm(d)
        self.ffn = mlp([d, cfg.ff_mult * d, d])
        self.norm3 = nn.LayerNorm(d)
        self.register_buffer("wp_scale", torch.tensor(WAYPOINT_SCALE), persistent=False)
        self._init_offsets()

    def _init_offsets(self):
        nn.init.zeros_(self.offsets.weight)
        nn.init.zeros_(self.attn.weight)
        nn.init.zeros_(self.attn.bias)
        angles = torch.arange(self.heads * self.points) * (2 * math.pi / (self.heads * self.points))
        ring = torch.stack([angles.cos(), angles.sin()], -1)
        with torch.no_grad():
            self.offsets.bias.copy_(0.5 * ring.flatten())

    def cross_attend(self, query: torch.Tensor, waypoints: torch.Tensor, scene: SceneFeatures) -> torch.Tensor:
        B, n, d = query.shape
        H, P = self.heads, self.points
        ref = waypoints.reshape(B, n, 3)[..., :2]
        off = self.offsets(query).view(B, n, H, P, 2) * self.cell
        loc = ref[:, :, None, None, :] + off
        sampled = sample_at(scene.feature_map + scene.pos, loc.reshape(B, n * H * P, 2), self.extent)
        v = self.value(sampled).view(B, n, H, P, H, d // H)
        # head h reads its own slice of the projected value at its own points
        idx = torch.arange(H, device=query.device)
        v = v[:, :, idx, :, idx]  # [H, B, n, P, dh]
        w = self.attn(query).view(B, n, H, P).softmax(-1)
        agg = torch.einsum("bnhp,hbnpc->bnhc", w, v).reshape(B, n, d)
        return self.out(agg)

    def forward(self, tokens: torch.Tensor, waypoints: torch.Tensor, scene: SceneFeatures) -> torch.Tensor:
        sa, _ = self.self_attn(tokens, tokens, tokens, need_weights=False)
        q = self.norm1(tokens + sa)
        B, n, _ = q.shape
        query = q + self.wp_embed(waypoints.reshape(B, n, 3) / self.wp_scale)
        q = self.norm2(q + self.cross_attend(query, waypoints, scene))
        return self.norm3(q + self.ffn(q))


class PlannerHeads(nn.Module):
    def __init__(self, cfg: ModelConfig, n_sem: int = 5):
        super().__init__()
        d, A, Ta = cfg.d, cfg.agent_slots, cfg.agent_steps
        self.A, self.Ta, self.n_sem = A, Ta, n_sem
        self.K, self.T = cfg.K, cfg.T
        self.score = mlp([d, d, 1])
        self.agents = mlp([d, 2 * d, A * (1 + 2 * Ta)])
        self.det = mlp([d, d, A * 5])
        self.cell_ctx = nn.Linear(d, d)
        self.cell = nn.Conv2d(d, 1 + n_sem, 1)
        self.register_buffer("pos_scale", torch.tensor(10.0), persistent=False)

    def forward(self, tokens: torch.Tensor, scene: SceneFeatures) -> PlannerScores:
        B = tokens.shape[0]
        per_prop = tokens.view(B, self.K, self.T, -1).mean(2)
        glob = tokens.mean(1)
        agents = self.agents(glob).view(B, self.A, 1 + 2 * self.Ta)
        det = self.det(glob).view(B, self.A, 5)
        cells = self.cell(scene.feature_map + scene.pos + self.cell_ctx(glob)[:, :, None, None])
        return PlannerScores(
            logits=self.score(per_prop).squeeze(-1),
            valid_logits=agents[..., 0],
            agent_states=agents[..., 1:].view(B, self.A, self.Ta, 2) * self.pos_scale,
            area_logits=cells[:, 0],
            bev_logits=cells[:, 1:],
            det_logits=det[..., 0],
            det_boxes=det[..., 1:] * self.pos_scale,
        )


class EgoPlanner(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d
        self.encoder = SceneEncoder(cfg.in_channels, d, cfg.h, cfg.w)
        self.base_tokens = nn.Parameter(torch.randn(cfg.K * cfg.T, d))
        self.status_proj = nn.Linear(3, d)
        self.refiner = EgoRefiner(cfg)
        self.traj_head = mlp([d, d, 3])
        self.heads = PlannerHeads(cfg)
        self.register_buffer("status_scale", torch.tensor(STATUS_SCALE), persistent=False)
        self.register_buffer("wp_scale", torch.tensor(WAYPOINT_SCALE), persistent=False)

    def encode_scene(self, obs: torch.Tensor) -> SceneFeatures:
        return self.encoder(obs)

    def init_tokens(self, ego_status: torch.Tensor) -> torch.Tensor:
        cond = self.status_proj(ego_status * self.status_scale)  # [B, d]
        return self.base_tokens.unsqueeze(0) + cond.unsqueeze(1)

    def decode_trajectory(self, tokens: torch.Tensor) -> torch.Tensor:
        B = tokens.shape[0]
        return (self.traj_head(tokens) * self.wp_scale).view(B, self.cfg.K, self.cfg.T, 3)

    def refine(self, tokens, waypoints, scene):
        return self.refiner(tokens, waypoints, scene)

    def forward(self, obs: torch.Tensor, ego_status: torch.Tensor) -> PlanOutput:
        scene = self.encode_scene(obs)
        q = self.init_tokens(ego_status)
        trajs = [self.decode_trajectory(q)]
        for _ in range(self.cfg.L):
            q = self.refine(q, trajs[-1], scene)
            trajs.append(self.decode_trajectory(q))
        stages = trajs[1:] if self.cfg.L > 0 else trajs
        return PlanOutput(trajs[-1], stages, q, self.heads(q, scene), scene)


# --- losses -----------------------------------------------------------------

def diversity_penalty(trajs: torch.Tensor, margin: float = 2.0) -> torch.Tensor:
    """Mean hinge ``max(0, margin - |e_k - e_j|)`` over ordered endpoint pairs ``k != j``."""
    K = trajs.shape[1]
    if K < 2:
        return trajs.sum() * 0.0
    end = trajs[:, :, -1, :2]
    diff = end[:, :, None] - end[:, None, :]
    dist = torch.sqrt((diff**2).sum(-1).clamp_min(1e-12))
    off_diag = ~torch.eye(K, dtype=torch.bool, device=trajs.device)
    return F.relu(margin - dist)[:, off_diag].mean()


def loss_traj(stage_trajs, expert: torch.Tensor, gamma: float = 0.5, lam_div: float = 0.1,
              margin: float = 2.0) -> torch.Tensor:
    """Discounted winner-take-all L1 over refinement stages, plus a diversity term."""
    if len(stage_trajs) == 0:
        raise ValueError("loss_traj needs at least one stage")
    L = len(stage_trajs)
    total = 0.0
    for l, trajs in enumerate(stage_trajs, start=1):
        err = (trajs - expert[:, None]).abs().sum(-1).mean(-1)  # [B, K]
        term = err.min(dim=1).values.mean()
        if lam_div:
            term = term + lam_div * diversity_penalty(trajs, margin)
        total = total + gamma ** (L - l) * term
    return total


def sigmoid_focal(logits, targets, alpha: float | None = 0.25, gamma: float = 2.0) -> torch.Tensor:
    """Element-wise sigmoid focal loss; ``alpha=None`` disables class balancing."""
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p = torch.sigmoid(logits)
    p_t = p * targets + (1 - p) * (1 - targets)
    loss = ce * (1 - p_t) ** gamma if gamma else ce
    if alpha is not None and alpha >= 0:
        loss = (alpha * targets + (1 - alpha) * (1 - targets)) * loss
    return loss


def _check_shape(name, a, b):
    if a.shape != b.shape:
        raise ValueError(f"{name}: prediction shape {tuple(a.shape)} != target shape {tuple(b.shape)}")


def loss_score(scores: PlannerScores, targets: dict, w: LossWeights = LossWeights()) -> torch.Tensor:
    """Planner scorer loss. ``targets`` holds ``pdm`` [B,K], ``valid`` [B,A], ``states`` [B,A,Ta,2], ``area`` [B,h,w]."""
    _check_shape("pdm", scores.logits, targets["pdm"])
    _check_shape("valid", scores.valid_logits, targets["valid"])
    _check_shape("states", scores.agent_states, targets["states"])
    _check_shape("area", scores.area_logits, targets["area"])
    final = F.binary_cross_entropy_with_logits(scores.logits, targets["pdm"])
    valid = F.binary_cross_entropy_with_logits(scores.valid_logits, targets["valid"])
    mask = targets["valid"][:, :, None, None].expand_as(scores.agent_states) > 0.5
    diff = torch.where(mask, (scores.agent_states - targets["states"]).abs(), torch.zeros_like(scores.agent_states))
    state = diff.sum() / mask.sum().clamp_min(1)
    area = F.binary_cross_entropy_with_logits(scores.area_logits, targets["area"])
    return w.final * final + w.valid * valid + w.state * state + w.area * area


def loss_aux(scores: PlannerScores, targets: dict, w: LossWeights = LossWeights()) -> torch.Tensor:
    """Auxiliary perception loss. ``targets``: ``bev_class`` [B,h,w] (long), ``det_cls`` [B,A], ``det_boxes`` [B,A,4]."""
    if scores.bev_logits.shape[-2:] != targets["bev_class"].shape[-2:]:
        raise ValueError("bev_class: spatial shape mismatch")
    _check_shape("det_cls", scores.det_logits, targets["det_cls"])
    _check_shape("det_boxes", scores.det_boxes, targets["det_boxes"])
    bev = F.cross_entropy(scores.bev_logits, targets["bev_class"])
    cls = sigmoid_focal(scores.det_logits, targets["det_cls"], w.focal_alpha, w.focal_gamma).mean()
    pos = targets["det_cls"][..., None].expand_as(scores.det_boxes) > 0.5
    box_err = torch.where(pos, (scores.det_boxes - targets["det_boxes"]).abs(), torch.zeros_like(scores.det_boxes))
    box = box_err.sum() / pos.sum().clamp_min(1)
    return w.bev * bev + w.cls * cls + w.box * box
