"""Joint training of the planner and its environment module.

Artifacts written to ``out_dir``:

* ``config.yaml``: the resolved run config
* ``groups.json``: optimizer groups with learning rates and parameter names
* ``steps.csv``: one row per optimizer step (see ``STEP_COLUMNS``)
* ``epochs.csv``: per-epoch means (see ``EPOCH_COLUMNS``)
* ``checkpoint.pt``: state dict, config, config hash and group membership
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from ..config import RunConfig
from ..coupling import DrivingSystem, SystemOutput, TrainingAborted, loss_align, total_loss
from ..forge.types import NUM_WAYPOINTS
from ..pdm import AnchorSet, nearest_anchor, online_pdm_targets, pdms_array
from ..planner import loss_aux, loss_score, loss_traj
from ..world_model import loss_im, loss_sim, loss_wm, semantic_focal
from .data import PreparedSet, future_targets, future_time, load_anchors, load_prepared

log = logging.getLogger(__name__)

TERMS = ("traj", "score", "aux", "im", "sim", "align", "wm")
STEP_COLUMNS = ("epoch", "step") + ("total",) + TERMS + ("wall_s", "config_hash")
EPOCH_COLUMNS = ("epoch", "total") + TERMS + ("eval_pdms", "wall_s", "config_hash")
CHECKPOINT = "checkpoint.pt"


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    torch.use_deterministic_algorithms(True, warn_only=True)


def build_optimizer(system: DrivingSystem, cfg: RunConfig) -> torch.optim.Adam:
    groups = system.parameter_groups()
    ids = [id(p) for g in groups.values() for p in g]
    all_ids = [id(p) for p in system.parameters()]
    # every parameter in exactly one group
    assert len(ids) == len(set(ids)) and set(ids) == set(all_ids), "optimizer groups must partition the parameters"
    lrs = {"ego": cfg.lr_ego, "env": cfg.lr_env}
    return torch.optim.Adam(
        [{"params": groups[name], "lr": lrs[name], "name": name} for name in ("ego", "env")],
        weight_decay=cfg.weight_decay,
    )


def group_membership(system: DrivingSystem) -> dict:
    names = {id(p): n for n, p in system.named_parameters()}
    return {g: [names[id(p)] for p in ps] for g, ps in system.parameter_groups().items()}


def online_targets(batch: dict, proposals: np.ndarray, anchors: AnchorSet, cached: bool) -> np.ndarray:
    """Per-proposal PDM targets ``[B, K]``.

    With ``cached`` the proposal inherits the precomputed score of its nearest
    anchor instead of being rolled out.
    """
    out = []
    for sc, props in zip(batch["scenarios"], proposals):
        if cached:
            out.append(pdms_array(anchors.metrics_for(sc.scenario_id)[nearest_anchor(props, anchors.anchors)]))
        else:
            out.append(online_pdm_targets(sc, props))
    return np.stack(out)


def sim_targets(batch: dict, proposals: np.ndarray, anchors: AnchorSet) -> np.ndarray:
    return np.stack([
        anchors.metrics_for(sc.scenario_id)[nearest_anchor(props, anchors.anchors)]
        for sc, props in zip(batch["scenarios"], proposals)
    ])


def compute_losses(system: DrivingSystem, out: SystemOutput, batch: dict, anchors: AnchorSet,
                   cfg: RunConfig) -> dict:
    w = cfg.losses
    plan = out.plan
    dtype = plan.proposals.dtype
    props = plan.proposals.detach().double().numpy()
    env_props = out.env_proposals.detach().double().numpy()
    pdm_t = torch.as_tensor(online_targets(batch, props, anchors, cfg.cache_online_targets), dtype=dtype)
    sim_t = torch.as_tensor(sim_targets(batch, env_props, anchors), dtype=dtype)
    score_t = {"pdm": pdm_t, "valid": batch["valid"], "states": batch["states"], "area": batch["area"]}
    aux_t = {"bev_class": batch["bev_class"], "det_cls": batch["det_cls"], "det_boxes": batch["det_boxes"]}
    parts = {
        "traj": loss_traj(plan.stage_trajs, batch["expert"], w.gamma, w.div, w.div_margin),
        "score": loss_score(plan.scores, score_t, w),
        "aux": loss_aux(plan.scores, aux_t, w),
        "im": loss_im(out.rewards.r_im, out.env_proposals, batch["expert"], system.coupling.log_eps),
        "sim": loss_sim(out.rewards.sim_logits, sim_t),
        "align": loss_align(out.env_logits, out.R),
    }
    if out.cur_logits is not None:
        t_fut = future_time(system.cfg)
        alpha = w.focal_alpha
        if t_fut is None:
            parts["wm"] = w.cur * semantic_focal(out.cur_logits, batch["cur_target"], alpha, w.focal_gamma)
        else:
            picked = out.env_proposals[torch.arange(len(props)), out.selected]
            fut_t = future_targets(batch["fut_base"], picked, t_fut, system.cfg.grid)
            parts["wm"] = loss_wm(out.cur_logits, out.fut_logits, batch["cur_target"], fut_t,
                                  w.cur, w.fut, alpha, w.focal_gamma)
    return parts


@dataclass
class TrainResult:
    out_dir: Path
    checkpoint: Path
    steps: list
    epochs: list
    config_hash: str


def _append_csv(path: Path, columns, row) -> None:
    new = not path.exists()
    with open(path, "a", newline="") as f:
        wr = csv.DictWriter(f, fieldnames=list(columns))
        if new:
            wr.writeheader()
        wr.writerow({k: row.get(k, "") for k in columns})


def save_checkpoint(system: DrivingSystem, cfg: RunConfig, path: Path, epoch: int) -> None:
    torch.save({
        "state_dict": system.state_dict(),
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "groups": group_membership(system),
        "epoch": epoch,
    }, path)


def load_checkpoint(path):
    """Returns ``(system, RunConfig, payload)``; the system is in eval mode."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    cfg = RunConfig.from_dict(payload["config"])
    if cfg.hash() != payload["config_hash"]:
        raise ValueError(f"{path}: embedded config does not match its hash")
    system = DrivingSystem(cfg.model, cfg.coupling)
    system.load_state_dict(payload["state_dict"])
    system.eval()
    return system, cfg, payload


def train(cfg: RunConfig, train_set: PreparedSet | None = None, anchors: AnchorSet | None = None,
          eval_set: PreparedSet | None = None) -> TrainResult:
    if cfg.model.T != NUM_WAYPOINTS:
        raise ValueError(f"training needs T = {NUM_WAYPOINTS} to roll proposals out in the oracle")
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    h = cfg.hash()
    cfg.save(out_dir / "config.yaml")
    for name in ("steps.csv", "epochs.csv"):
        (out_dir / name).unlink(missing_ok=True)

    if train_set is None:
        train_set = load_prepared(cfg.train_dir, cfg.model, cfg.max_train)
    if len(train_set) == 0:
        raise ValueError(f"{cfg.train_dir}: no training scenarios")
    if anchors is None:
        anchors = load_anchors(cfg.train_dir, train_set.scenarios, cfg.anchors, seed=0)
    if cfg.eval_every_epoch and eval_set is None:
        eval_set = load_prepared(cfg.eval_dir, cfg.model, cfg.max_eval)

    seed_everything(cfg.seed)
    system = DrivingSystem(cfg.model, cfg.coupling)
    opt = build_optimizer(system, cfg)
    groups = group_membership(system)
    (out_dir / "groups.json").write_text(json.dumps({
        g: {"lr": pg["lr"], "parameters": groups[g]} for g, pg in zip(("ego", "env"), opt.param_groups)
    }, indent=1))
    log.info("groups: ego=%d env=%d tensors", len(groups["ego"]), len(groups["env"]))

    rng = np.random.default_rng(cfg.seed)
    steps, epochs = [], []
    step = 0
    t0 = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        system.train()
        order = rng.permutation(len(train_set))
        sums = dict.fromkeys(("total",) + TERMS, 0.0)
        n_steps = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = train_set.batch(order[start:start + cfg.batch_size])
            out = system(batch["obs"], batch["status"])
            parts = compute_losses(system, out, batch, anchors, cfg)
            try:
                loss = total_loss(parts, cfg.losses)
            except TrainingAborted as exc:
                raise TrainingAborted(f"step {step}: {exc}") from exc
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(system.parameters(), cfg.grad_clip)
            opt.step()
            row = {"epoch": epoch, "step": step, "total": loss.item()}
            row.update({k: v.item() for k, v in parts.items()})
            for k in sums:
                sums[k] += row.get(k, 0.0)
            row.update(wall_s=round(time.perf_counter() - t0, 3), config_hash=h)
            _append_csv(out_dir / "steps.csv", STEP_COLUMNS, row)
            steps.append(row)
            step += 1
            n_steps += 1
        erow = {"epoch": epoch, **{k: v / n_steps for k, v in sums.items()}}
        if cfg.eval_every_epoch:
            from .evaluate import evaluate_system, summarize

            erow["eval_pdms"] = summarize(evaluate_system(system, eval_set, cfg.batch_size, h))["pdms"]
        erow.update(wall_s=round(time.perf_counter() - t0, 3), config_hash=h)
        _append_csv(out_dir / "epochs.csv", EPOCH_COLUMNS, erow)
        epochs.append(erow)
        log.info("epoch %d total=%.4f (%.1fs)", epoch, erow["total"], erow["wall_s"])
    ckpt = out_dir / CHECKPOINT
    save_checkpoint(system, cfg, ckpt, cfg.epochs)
    return TrainResult(out_dir, ckpt, steps, epochs, h)
