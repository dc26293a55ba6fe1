"""Training samples prepared from scenario datasets.

Everything that depends only on the scenario (model input, supervision
rasters, key-agent targets) is computed once and cached next to the dataset
as an ``.npz`` keyed by the preparation settings. The only proposal-dependent
target, the ego channel of the future semantic map, is filled in at train time.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from ..config import ModelConfig
from ..forge.dataset import read_dataset, read_manifest
from ..forge.raster import CHANNELS, GridSpec, class_map, ego_channel, observation, rasterize_bev, swept_ego_mask
from ..forge.types import HORIZON, SIM_TIMES, WAYPOINT_DT, Scenario
from ..geometry import interpolate_poses
from ..pdm import AnchorSet, build_anchor_set

log = logging.getLogger(__name__)

PREP_VERSION = 1
EGO = CHANNELS.index("ego")

ARRAY_KEYS = ("obs", "status", "expert", "valid", "states", "area", "bev_class",
              "det_cls", "det_boxes", "cur_target", "fut_base")


def future_time(cfg: ModelConfig) -> float | None:
    """Time of the waypoint read by the last world-model iteration (None when N = 0)."""
    steps = cfg.iteration_steps()
    return (steps[-1] + 1) * WAYPOINT_DT if steps else None


def key_agents(scenario: Scenario, slots: int, steps: int):
    """Nearest ``slots`` agents at t = 0: validity, future xy ``[slots, steps, 2]``, boxes ``[slots, 4]``."""
    valid = np.zeros(slots)
    states = np.zeros((slots, steps, 2))
    boxes = np.zeros((slots, 4))
    if not scenario.agents:
        return valid, states, boxes
    start = np.array([a.poses[0, :2] for a in scenario.agents])
    order = np.argsort(np.linalg.norm(start, axis=1), kind="stable")[:slots]
    times = (np.arange(steps) + 1) * HORIZON / steps
    for slot, i in enumerate(order):
        agent = scenario.agents[i]
        valid[slot] = 1.0
        states[slot] = interpolate_poses(SIM_TIMES, agent.poses, times)[:, :2]
        boxes[slot] = (agent.poses[0, 0], agent.poses[0, 1], agent.length, agent.width)
    return valid, states, boxes


def one_hot_class(classes: np.ndarray, n: int = len(CHANNELS)) -> np.ndarray:
    return (np.arange(n)[:, None, None] == classes[None]).astype(np.float32)


def prepare_scenario(scenario: Scenario, cfg: ModelConfig) -> dict:
    grid = cfg.grid
    valid, states, boxes = key_agents(scenario, cfg.agent_slots, cfg.agent_steps)
    cur = rasterize_bev(scenario, 0.0, grid)
    t_fut = future_time(cfg)
    fut = rasterize_bev(scenario, t_fut, grid).data if t_fut is not None else np.zeros_like(cur.data)
    return {
        "obs": observation(scenario, grid),
        "status": scenario.ego_status.as_array(),
        "expert": scenario.expert[: cfg.T],
        "valid": valid,
        "states": states,
        "area": swept_ego_mask(scenario.expert, grid),
        "bev_class": class_map(cur),
        "det_cls": valid.copy(),
        "det_boxes": boxes,
        "cur_target": cur.data,
        "fut_base": fut,
    }


def _prep_key(manifest: dict, cfg: ModelConfig, count: int) -> str:
    blob = json.dumps({
        "v": PREP_VERSION,
        "seeds": manifest["seeds"][:count],
        "gen": manifest["generator_version"],
        "grid": list(cfg.extent) + [cfg.h, cfg.w],
        "A": cfg.agent_slots, "Ta": cfg.agent_steps, "T": cfg.T, "N": cfg.N,
    }, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class PreparedSet:
    scenarios: list
    arrays: dict  # key -> stacked numpy array, first axis = scenario

    def __len__(self):
        return len(self.scenarios)

    @property
    def ids(self) -> list:
        return [sc.scenario_id for sc in self.scenarios]

    def batch(self, idx, dtype=torch.float32) -> dict:
        idx = np.asarray(idx)
        out = {}
        for k, v in self.arrays.items():
            a = torch.from_numpy(np.ascontiguousarray(v[idx]))
            out[k] = a.long() if k == "bev_class" else a.to(dtype)
        out["scenarios"] = [self.scenarios[i] for i in idx]
        return out


def load_prepared(path, cfg: ModelConfig, limit: int | None = None, cache: bool = True) -> PreparedSet:
    path = Path(path)
    manifest = read_manifest(path)
    scenarios = read_dataset(path)
    if limit is not None:
        scenarios = scenarios[:limit]
    if scenarios and cfg.T > len(scenarios[0].expert):
        raise ValueError(f"T={cfg.T} exceeds the dataset's waypoint count")
    cache_file = path / ".cache" / f"prep_{_prep_key(manifest, cfg, len(scenarios))}.npz"
    if cache and cache_file.exists():
        with np.load(cache_file) as z:
            arrays = {k: z[k] for k in ARRAY_KEYS}
        if len(arrays["obs"]) == len(scenarios):
            return PreparedSet(scenarios, arrays)
    log.info("preparing %d scenarios from %s", len(scenarios), path)
    per = [prepare_scenario(sc, cfg) for sc in scenarios]
    if per:
        arrays = {k: np.stack([p[k] for p in per]) for k in ARRAY_KEYS}
    else:
        arrays = {k: np.zeros((0,)) for k in ARRAY_KEYS}
    if cache and per:
        cache_file.parent.mkdir(exist_ok=True)
        tmp = cache_file.with_suffix(".tmp.npz")
        np.savez(tmp, **arrays)
        tmp.replace(cache_file)
    return PreparedSet(scenarios, arrays)


def load_anchors(path, scenarios, M: int, seed: int = 0, cache: bool = True) -> AnchorSet:
    """Anchor set over the experts of ``scenarios`` with metrics for each of them, cached on disk."""
    path = Path(path)
    experts = np.stack([sc.expert for sc in scenarios])
    ids = [sc.scenario_id for sc in scenarios]
    digest = hashlib.sha256(experts.tobytes() + json.dumps([ids, M, seed]).encode()).hexdigest()[:16]
    cache_file = path / ".cache" / f"anchors_{digest}.npz"
    if cache and cache_file.exists():
        with np.load(cache_file) as z:
            return AnchorSet(z["anchors"], dict(zip(ids, z["metrics"])))
    aset = build_anchor_set(experts, min(M, len(experts)), scenarios, seed=seed)
    if cache:
        cache_file.parent.mkdir(exist_ok=True)
        tmp = cache_file.with_suffix(".tmp.npz")
        np.savez(tmp, anchors=aset.anchors, metrics=np.stack([aset.metrics[i] for i in ids]))
        tmp.replace(cache_file)
    return aset


def future_targets(fut_base: torch.Tensor, proposals: torch.Tensor, t: float, grid: GridSpec) -> torch.Tensor:
    """Future semantic targets with the ego box placed at each proposal's waypoint at ``t``.

    ``fut_base`` is ``[B, C, h, w]``, ``proposals`` ``[B, T, 3]`` (one per sample).
    """
    out = fut_base.clone()
    props = proposals.detach().cpu().double().numpy()
    for b in range(len(props)):
        out[b, EGO] = torch.from_numpy(ego_channel(props[b], t, grid)).to(out.dtype)
    return out
