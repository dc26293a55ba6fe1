import math

import numpy as np
import pytest
import torch
from torch import nn

from worldplan.config import LossWeights, ModelConfig
from worldplan.planner import (
    EgoPlanner,
    PlannerScores,
    SceneFeatures,
    diversity_penalty,
    loss_aux,
    loss_score,
    loss_traj,
    sample_at,
)

TOY = dict(d=8, K=2, T=4, L=2, N=2, h=4, w=4, heads=2, n_points=2, wm_heads=2, agent_slots=3, agent_steps=4)


def toy_planner(**kw):
    return EgoPlanner(ModelConfig(**{**TOY, **kw}))


def inputs(B=2, h=4, w=4, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(B, 7, h, w, generator=g), torch.rand(B, 3, generator=g) * torch.tensor([10.0, 1.0, 0.2])


# --- forward pieces ----------------------------------------------------------

def test_zero_input_zero_final_layer_gives_zero_features():
    p = toy_planner()
    nn.init.zeros_(p.encoder.out.weight)
    nn.init.zeros_(p.encoder.out.bias)
    feats = p.encode_scene(torch.zeros(1, 7, 4, 4))
    assert torch.count_nonzero(feats.feature_map) == 0


def test_encode_scene_is_pure():
    p = toy_planner()
    obs, _ = inputs()
    assert torch.equal(p.encode_scene(obs).feature_map, p.encode_scene(obs).feature_map)


def test_init_tokens_equal_base_with_zero_status_and_weights():
    p = toy_planner()
    nn.init.zeros_(p.status_proj.weight)
    nn.init.zeros_(p.status_proj.bias)
    q = p.init_tokens(torch.zeros(2, 3))
    assert q.shape == (2, 2 * 4, 8)
    assert torch.equal(q[0], p.base_tokens) and torch.equal(q[1], p.base_tokens)
    # any status is ignored when the projection is zero
    assert torch.equal(p.init_tokens(torch.tensor([[5.0, 1.0, 0.1]]))[0], p.base_tokens)


def test_init_tokens_depend_on_status():
    p = toy_planner()
    a = p.init_tokens(torch.tensor([[5.0, 0.0, 0.0]]))
    b = p.init_tokens(torch.tensor([[6.0, 0.0, 0.0]]))
    assert not torch.equal(a, b)


def test_decode_identical_tokens_identical_waypoints():
    p = toy_planner()
    tok = torch.randn(1, 1, 8).expand(1, 8, 8)
    wp = p.decode_trajectory(tok)
    assert wp.shape == (1, 2, 4, 3)
    assert torch.equal(wp, wp[:, :1, :1].expand_as(wp))


def test_decode_zero_head_gives_origin():
    p = toy_planner()
    last = p.traj_head[-1]
    nn.init.zeros_(last.weight)
    nn.init.zeros_(last.bias)
    assert torch.count_nonzero(p.decode_trajectory(torch.randn(3, 8, 8))) == 0


def test_refiner_zero_scene_only_bias_path():
    p = toy_planner()
    r = p.refiner
    tokens = torch.randn(1, 8, 8)
    zero = SceneFeatures(torch.zeros(1, 8, 4, 4), torch.zeros(1, 8, 4, 4))
    wp_a = torch.randn(1, 2, 4, 3) * 10
    wp_b = torch.randn(1, 2, 4, 3) * 10
    with torch.no_grad():
        out = r(tokens, wp_a, zero)
        # waypoint-independent once the scene carries nothing
        assert torch.allclose(out, r(tokens, wp_b, zero), atol=1e-6)
        sa, _ = r.self_attn(tokens, tokens, tokens, need_weights=False)
        q = r.norm1(tokens + sa)
        q = r.norm2(q + r.out(r.value.bias).expand_as(q))
        manual = r.norm3(q + r.ffn(q))
    assert torch.allclose(out, manual, atol=1e-6)


def test_sampling_is_shift_equivariant():
    extent = (-16.0, 48.0, -32.0, 32.0)
    h = w = 8
    cell_x, cell_y = 64.0 / h, 64.0 / w
    fmap = torch.randn(1, 3, h, w)
    shifted = torch.zeros_like(fmap)
    shifted[:, :, 1:, 1:] = fmap[:, :, :-1, :-1]
    g = torch.Generator().manual_seed(1)
    # interior points whose shifted location stays inside the map
    xy = torch.stack([
        torch.empty(20).uniform_(extent[0] + cell_x, extent[1] - 2 * cell_x, generator=g),
        torch.empty(20).uniform_(extent[2] + cell_y, extent[3] - 2 * cell_y, generator=g),
    ], -1)[None]
    a = sample_at(fmap, xy, extent)
    b = sample_at(shifted, xy + torch.tensor([cell_x, cell_y]), extent)
    assert torch.allclose(a, b, atol=1e-6)


def test_sampling_outside_reads_zero():
    fmap = torch.ones(1, 2, 4, 4)
    far = torch.tensor([[[500.0, 0.0], [0.0, -500.0]]])
    assert torch.count_nonzero(sample_at(fmap, far, (-16.0, 48.0, -32.0, 32.0))) == 0


def test_depth_zero_decodes_initial_tokens():
    p = toy_planner(L=0)
    obs, status = inputs()
    out = p(obs, status)
    expect = p.decode_trajectory(p.init_tokens(status))
    assert torch.equal(out.proposals, expect)
    assert len(out.stage_trajs) == 1


def test_plan_shapes_and_determinism():
    p = toy_planner()
    obs, status = inputs()
    a, b = p(obs, status), p(obs, status)
    assert a.proposals.shape == (2, 2, 4, 3)
    assert len(a.stage_trajs) == 2
    assert a.tokens.shape == (2, 8, 8)
    assert torch.equal(a.proposals, b.proposals) and torch.equal(a.scores.logits, b.scores.logits)


def test_refiner_stages_share_parameters():
    p = toy_planner(L=3)
    seen = []
    handle = p.refiner.register_forward_hook(lambda mod, inp, out: seen.append(mod))
    p(*inputs())
    handle.remove()
    assert len(seen) == 3
    assert all(m is p.refiner for m in seen)
    ids = [id(t) for t in p.parameters()]
    assert len(ids) == len(set(ids))
    assert all(id(t) in ids for t in p.refiner.parameters())


# --- loss_traj ---------------------------------------------------------------

def test_loss_traj_single_proposal_is_mean_l1():
    expert = torch.randn(3, 4, 3, dtype=torch.float64)
    prop = torch.randn(3, 1, 4, 3, dtype=torch.float64)
    got = loss_traj([prop], expert, lam_div=0.0).item()
    manual = sum(abs(a - b) for a, b in zip(prop.flatten().tolist(), expert.flatten().tolist())) / (3 * 4)
    assert got == pytest.approx(manual, abs=1e-12)


def test_loss_traj_exact_proposal_zero():
    expert = torch.randn(1, 4, 3)
    props = torch.stack([expert[0] + 1.0, expert[0]])[None]
    assert loss_traj([props], expert, lam_div=0.0).item() == 0.0


def test_loss_traj_hand_built_stages():
    expert = torch.zeros(1, 4, 3, dtype=torch.float64)
    # per-waypoint L1 of 1.0 and 0.4 give stage errors e1 = 1.0, e2 = 0.4
    s1 = torch.zeros(1, 1, 4, 3, dtype=torch.float64)
    s1[..., 0] = 1.0
    s2 = torch.zeros(1, 1, 4, 3, dtype=torch.float64)
    s2[..., 1] = -0.4
    got = loss_traj([s1, s2], expert, gamma=0.5, lam_div=0.0).item()
    assert got == pytest.approx(0.5 * 1.0 + 1.0 * 0.4, abs=1e-12)
    assert got == pytest.approx(0.9, abs=1e-12)


def test_loss_traj_rejects_empty():
    with pytest.raises(ValueError):
        loss_traj([], torch.zeros(1, 4, 3))


def test_winner_take_all_gradient_is_sparse():
    expert = torch.zeros(2, 4, 3, dtype=torch.float64)
    trajs = torch.randn(2, 5, 4, 3, dtype=torch.float64, requires_grad=True)
    loss_traj([trajs], expert, lam_div=0.0).backward()
    win = (trajs.detach() - expert[:, None]).abs().sum(-1).mean(-1).argmin(1)
    for b in range(2):
        for k in range(5):
            nz = trajs.grad[b, k].abs().sum().item()
            assert (nz > 0) if k == win[b] else (nz == 0.0)


def test_diversity_penalty_hand_case():
    trajs = torch.zeros(1, 3, 4, 3)
    trajs[0, 1, -1, 0] = 1.0  # 1 m from proposal 0
    trajs[0, 2, -1, 0] = 10.0  # far from both
    # ordered pairs: (0,1),(1,0) contribute 1 each; the rest contribute 0
    assert diversity_penalty(trajs, 2.0).item() == pytest.approx(2.0 / 6.0)
    assert diversity_penalty(trajs[:, :1]).item() == 0.0


# --- loss_score / loss_aux ---------------------------------------------------

def scores_like(B=2, K=3, A=4, Ta=2, h=3, w=3, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)

    def r(*s):
        return torch.randn(*s, generator=g, dtype=dtype)

    return PlannerScores(r(B, K), r(B, A), r(B, A, Ta, 2) * 5, r(B, h, w), r(B, 5, h, w), r(B, A), r(B, A, 4) * 5)


def score_targets(B=2, K=3, A=4, Ta=2, h=3, w=3, seed=1, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return {
        "pdm": torch.rand(B, K, generator=g, dtype=dtype),
        "valid": (torch.rand(B, A, generator=g) > 0.5).to(dtype),
        "states": torch.randn(B, A, Ta, 2, generator=g, dtype=dtype) * 5,
        "area": (torch.rand(B, h, w, generator=g) > 0.5).to(dtype),
    }


def _bce(logit, y):
    p = 1 / (1 + math.exp(-logit))
    return -(y * math.log(p) + (1 - y) * math.log(1 - p))


def _mean(xs):
    return sum(xs) / len(xs)


def test_loss_score_matches_elementwise_oracle():
    s, t = scores_like(), score_targets()
    final = _mean([_bce(a, b) for a, b in zip(s.logits.flatten().tolist(), t["pdm"].flatten().tolist())])
    valid = _mean([_bce(a, b) for a, b in zip(s.valid_logits.flatten().tolist(), t["valid"].flatten().tolist())])
    num, den = 0.0, 0
    for b in range(2):
        for a in range(4):
            if t["valid"][b, a] > 0.5:
                num += (s.agent_states[b, a] - t["states"][b, a]).abs().sum().item()
                den += s.agent_states[b, a].numel()
    area = _mean([_bce(a, b) for a, b in zip(s.area_logits.flatten().tolist(), t["area"].flatten().tolist())])
    w = LossWeights(final=0.7, valid=1.3, state=0.5, area=2.0)
    expect = 0.7 * final + 1.3 * valid + 0.5 * num / max(den, 1) + 2.0 * area
    assert loss_score(s, t, w).item() == pytest.approx(expect, abs=1e-8)


def test_loss_score_saturated_logits_vanish():
    t = score_targets()
    t["pdm"] = (t["pdm"] > 0.5).double()
    sat = lambda y: (2 * y - 1) * 20.0  # noqa: E731
    s = PlannerScores(sat(t["pdm"]), sat(t["valid"]), t["states"].clone(), sat(t["area"]),
                      torch.zeros(2, 5, 3, 3), torch.zeros(2, 4), torch.zeros(2, 4, 4))
    assert loss_score(s, t).item() <= 1e-6 * 3


def test_loss_score_invalid_agents_mask_states():
    s, t = scores_like(), score_targets()
    t["valid"] = torch.zeros_like(t["valid"])
    w = LossWeights(final=0, valid=0, area=0)
    s.agent_states.requires_grad_(True)
    loss = loss_score(s, t, w)
    assert loss.item() == 0.0
    loss.backward()
    assert torch.count_nonzero(s.agent_states.grad) == 0


def test_loss_score_shape_mismatch():
    s, t = scores_like(), score_targets()
    t["pdm"] = t["pdm"][:, :2]
    with pytest.raises(ValueError, match="pdm"):
        loss_score(s, t)


def aux_targets(B=2, A=4, h=3, w=3, seed=2, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return {
        "bev_class": torch.randint(0, 5, (B, h, w), generator=g),
        "det_cls": (torch.rand(B, A, generator=g) > 0.5).to(dtype),
        "det_boxes": torch.randn(B, A, 4, generator=g, dtype=dtype) * 5,
    }


def _focal(logit, y, alpha, gamma):
    p = 1 / (1 + math.exp(-logit))
    pt = p if y == 1 else 1 - p
    at = alpha if y == 1 else 1 - alpha
    return -at * (1 - pt) ** gamma * math.log(pt)


def test_loss_aux_matches_elementwise_oracle():
    s, t = scores_like(), aux_targets()
    ce = []
    for b in range(2):
        for i in range(3):
            for j in range(3):
                z = s.bev_logits[b, :, i, j].tolist()
                m = max(z)
                lse = m + math.log(sum(math.exp(v - m) for v in z))
                ce.append(lse - z[int(t["bev_class"][b, i, j])])
    cls = _mean([_focal(a, b, 0.25, 2.0) for a, b in zip(s.det_logits.flatten().tolist(), t["det_cls"].flatten().tolist())])
    num, den = 0.0, 0
    for b in range(2):
        for a in range(4):
            if t["det_cls"][b, a] > 0.5:
                num += (s.det_boxes[b, a] - t["det_boxes"][b, a]).abs().sum().item()
                den += 4
    w = LossWeights(bev=1.5, cls=0.5, box=0.25)
    expect = 1.5 * _mean(ce) + 0.5 * cls + 0.25 * num / max(den, 1)
    assert loss_aux(s, t, w).item() == pytest.approx(expect, abs=1e-8)


def test_loss_aux_perfect_bev_vanishes():
    t = aux_targets()
    logits = torch.nn.functional.one_hot(t["bev_class"], 5).permute(0, 3, 1, 2).double() * 40.0
    s = scores_like()
    s.bev_logits = logits
    w = LossWeights(cls=0, box=0)
    assert loss_aux(s, t, w).item() <= 1e-6


def test_loss_aux_zero_agents_is_background_only():
    s, t = scores_like(), aux_targets()
    t["det_cls"] = torch.zeros_like(t["det_cls"])
    s.det_boxes.requires_grad_(True)
    w = LossWeights(bev=0)
    loss = loss_aux(s, t, w)
    expect = _mean([_focal(a, 0, 0.25, 2.0) for a in s.det_logits.flatten().tolist()])
    assert loss.item() == pytest.approx(expect, abs=1e-10)
    loss.backward()
    assert torch.count_nonzero(s.det_boxes.grad) == 0


def test_loss_aux_shape_mismatch():
    s, t = scores_like(), aux_targets()
    t["bev_class"] = t["bev_class"][:, :2]
    with pytest.raises(ValueError):
        loss_aux(s, t)


def test_trained_proposals_are_diverse(tmp_path, scenarios):
    """Train briefly with the diversity term and measure pairwise endpoint separation."""
    from worldplan.forge import generate_scenario
    from worldplan.harness.data import prepare_scenario

    cfg = ModelConfig(d=16, K=8, T=8, L=1, N=2, h=8, w=8, heads=2, n_points=2, wm_heads=2)
    p = EgoPlanner(cfg)
    arrays = [prepare_scenario(sc, cfg) for sc in scenarios[:16]]
    obs = torch.from_numpy(np.stack([a["obs"] for a in arrays])).float()
    status = torch.from_numpy(np.stack([a["status"] for a in arrays])).float()
    expert = torch.from_numpy(np.stack([a["expert"] for a in arrays])).float()
    opt = torch.optim.Adam(p.parameters(), lr=1e-3)
    for _ in range(30):
        opt.zero_grad()
        loss_traj(p(obs, status).stage_trajs, expert, lam_div=0.1).backward()
        opt.step()
    test = [prepare_scenario(generate_scenario(s), cfg) for s in range(1000, 1050)]
    with torch.no_grad():
        out = p(torch.from_numpy(np.stack([a["obs"] for a in test])).float(),
                torch.from_numpy(np.stack([a["status"] for a in test])).float())
    end = out.proposals[:, :, -1, :2]
    d = torch.cdist(end, end)
    iu = torch.triu_indices(8, 8, 1)
    frac = (d[:, iu[0], iu[1]] > 0).float().mean().item()
    assert frac >= 0.95
