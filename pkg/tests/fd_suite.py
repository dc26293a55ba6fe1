"""Central finite-difference checks of analytic gradients at toy dimensions.

Each check compares ``grad . v`` against ``(f(x + h v) - f(x - h v)) / 2h`` for
a random direction ``v`` restricted to one block of tensors, in float64.
"""

import torch
from conftest import TOY_MODEL, TOY_REWARD_DIMS, toy_inputs

from worldplan.config import CouplingConfig, LossWeights, ModelConfig
from worldplan.coupling import DrivingSystem, loss_align
from worldplan.planner import loss_aux, loss_score, loss_traj
from worldplan.world_model import loss_im, loss_sim, loss_wm

STEP = 1e-6
TOL = 1e-4
CFG = ModelConfig(**TOY_MODEL)


def directional_error(fn, tensors, seed=0, h=STEP):
    """Relative error between analytic and numeric directional derivatives of ``fn()``."""
    g = torch.Generator().manual_seed(seed)
    dirs = [torch.randn(t.shape, generator=g, dtype=t.dtype) for t in tensors]
    for t in tensors:
        t.grad = None
    with torch.enable_grad():
        val = fn()
        grads = torch.autograd.grad(val, tensors, allow_unused=True)
    analytic = sum(float((gr * v).sum()) for gr, v in zip(grads, dirs) if gr is not None)
    with torch.no_grad():
        for t, v in zip(tensors, dirs):
            t.add_(h * v)
        up = float(fn())
        for t, v in zip(tensors, dirs):
            t.sub_(2 * h * v)
        down = float(fn())
        for t, v in zip(tensors, dirs):
            t.add_(h * v)
    numeric = (up - down) / (2 * h)
    scale = max(abs(analytic), abs(numeric))
    if scale < 1e-9:  # both vanish: the block does not reach this output
        return 0.0, analytic, numeric
    return abs(analytic - numeric) / scale, analytic, numeric


def toy_system(**coupling):
    torch.manual_seed(0)
    return DrivingSystem(CFG, CouplingConfig(mlp_reward_dims=TOY_REWARD_DIMS, **coupling)).double()


def toy_targets(B=2, seed=1):
    g = torch.Generator().manual_seed(seed)
    K, T, A, Ta, h, w = CFG.K, CFG.T, CFG.agent_slots, CFG.agent_steps, CFG.h, CFG.w
    d = torch.float64

    def r(*s):
        return torch.rand(*s, generator=g, dtype=d)

    return {
        "expert": torch.randn(B, T, 3, generator=g, dtype=d) * 3,
        "pdm": r(B, K), "valid": torch.tensor([[1.0, 0.0], [1.0, 1.0]], dtype=d), "states": r(B, A, Ta, 2) * 5,
        "area": (r(B, h, w) > 0.5).to(d), "bev_class": torch.randint(0, 5, (B, h, w), generator=g),
        "det_cls": torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=d), "det_boxes": r(B, A, 4) * 5,
        "sim": r(B, K, 5), "cur": (r(B, 5, h, w) > 0.5).to(d), "fut": (r(B, 5, h, w) > 0.5).to(d),
    }


LOSSES = {
    "traj": lambda out, t: loss_traj(out.plan.stage_trajs, t["expert"], 0.5, 0.1, 2.0),
    "score": lambda out, t: loss_score(out.plan.scores, t, LossWeights()),
    "aux": lambda out, t: loss_aux(out.plan.scores, t, LossWeights()),
    # the soft imitation target is a constant of the step, so it is built from frozen proposals
    "im": lambda out, t: loss_im(out.rewards.r_im, t["frozen_proposals"], t["expert"]),
    "sim": lambda out, t: loss_sim(out.rewards.sim_logits, t["sim"]),
    "align": lambda out, t: loss_align(out.env_logits, out.R),
    "wm": lambda out, t: loss_wm(out.cur_logits, out.fut_logits, t["cur"], t["fut"]),
}


def system_blocks(system):
    p, wm = system.planner, system.world_model
    blocks = {
        "scene_encoder": list(p.encoder.parameters()),
        "init_tokens": [p.base_tokens, *p.status_proj.parameters()],
        "ego_refiner": list(p.refiner.parameters()),
        "trajectory_decoder": list(p.traj_head.parameters()),
        "planner_heads": list(p.heads.parameters()),
    }
    if wm is not None:
        blocks.update({
            "bev_encoder": list(wm.bev_encoder.parameters()),
            "action_encoder": list(wm.action_encoder.parameters()),
            "wm_step": [wm.scene_pos, *wm.encoder.parameters()],
            "reward_heads": [*wm.im_head.parameters(), *wm.sim_head.parameters()],
            "semantic_head": list(wm.semantic_head.parameters()),
            "state_projector": list(system.state_proj.parameters()),
        })
    else:
        blocks["mlp_reward"] = list(system.reward_mlp.parameters())
    return blocks


def loss_cases():
    """``(name, fn, tensors)`` for every loss and every parameter block."""
    cases = []
    obs, status = toy_inputs(dtype=torch.float64)
    t = toy_targets()
    for variant in ({}, {"use_world_model": False, "inject_ego_tokens": False}):
        system = toy_system(**variant)
        tag = "" if system.world_model is not None else "mlp/"
        with torch.no_grad():
            t = {**t, "frozen_proposals": system(obs, status).env_proposals.clone()}
        for lname, lfn in LOSSES.items():
            if lname == "wm" and system.world_model is None:
                continue
            fn = (lambda s=system, f=lfn: f(s(obs, status), t))
            cases.append((f"{tag}{lname}/all", fn, list(system.parameters())))
            for bname, params in system_blocks(system).items():
                cases.append((f"{tag}{lname}/{bname}", fn, params))
    return cases


def op_cases():
    """Gradient checks of individual operations with respect to their inputs."""
    cases = []
    system = toy_system()
    p, wm, proj = system.planner, system.world_model, system.state_proj
    obs, status = toy_inputs(dtype=torch.float64)
    obs.requires_grad_(True)
    status.requires_grad_(True)
    cases.append(("op/encode_scene", lambda: p.encode_scene(obs).feature_map.mean(), [obs]))
    cases.append(("op/init_tokens", lambda: p.init_tokens(status).sin().sum(), [status]))
    tokens = torch.randn(2, CFG.K * CFG.T, CFG.d, dtype=torch.float64, requires_grad=True)
    cases.append(("op/decode_trajectory", lambda: (p.decode_trajectory(tokens) * torch.arange(3.0).double()).sum(),
                  [tokens]))
    scene = p.encode_scene(obs.detach())
    wps = (torch.randn(2, CFG.K, CFG.T, 3, dtype=torch.float64) * 8).requires_grad_(True)
    # LayerNorm outputs have near-constant norm, so read them out through fixed random weights
    probe = torch.randn(2, CFG.K * CFG.T, CFG.d, dtype=torch.float64)
    cases.append(("op/ego_refiner_step", lambda: (p.refine(tokens, wps, scene) * probe).sum(), [tokens, wps]))
    cases.append(("op/encode_initial_bev", lambda: wm.encode_initial_bev(obs).pow(2).mean(), [obs]))
    props = (torch.randn(2, CFG.K, CFG.T, 3, dtype=torch.float64) * 5).requires_grad_(True)
    cases.append(("op/encode_action_token", lambda: wm.encode_action_token(props, status).tanh().sum(),
                  [props, status]))
    seq = torch.randn(2, CFG.h * CFG.w + 2, CFG.d, dtype=torch.float64)
    ego_slot = seq[:, 1].clone().requires_grad_(True)
    probe_bev = torch.randn(2, CFG.h * CFG.w, CFG.d, dtype=torch.float64)
    cases.append(("op/wm_step",
                  lambda: (wm.step(torch.cat([seq[:, :1], ego_slot[:, None], seq[:, 2:]], 1))[2] * probe_bev).sum(),
                  [ego_slot]))
    cases.append(("op/inject_ego_token", lambda: proj.token(tokens, 1, CFG.iteration_steps()[0]).norm(), [tokens]))
    mlp_sys = toy_system(use_world_model=False, inject_ego_tokens=False)
    cases.append(("op/mlp_reward_predictor",
                  lambda: mlp_sys.reward_mlp.rewards(props, status).sim_logits.sigmoid().sum(), [props]))
    return cases


def run_suite(seeds=(0, 1)):
    """Worst relative error per case over a couple of random directions."""
    results = {}
    for name, fn, tensors in loss_cases() + op_cases():
        results[name] = max(directional_error(fn, tensors, seed)[0] for seed in seeds)
    return results
