"""Run configuration: model dimensions, loss weights, coupling switches, optimisation.

Configs are plain dataclasses loaded from YAML. ``config_hash`` is the SHA-256
of the canonical JSON form and is stamped on every artifact a run produces.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass

import yaml

from .forge.raster import GridSpec


@dataclass
class ModelConfig:
    d: int = 64
    K: int = 8
    T: int = 8
    L: int = 3
    N: int = 4
    h: int = 16
    w: int = 16
    heads: int = 4
    n_points: int = 4
    wm_layers: int = 2
    wm_heads: int = 4
    ff_mult: int = 4
    agent_slots: int = 6
    agent_steps: int = 8
    in_channels: int = 7
    extent: tuple = (-16.0, 48.0, -32.0, 32.0)

    def __post_init__(self):
        self.extent = tuple(float(v) for v in self.extent)
        if self.N > 0 and self.T % self.N != 0:
            raise ValueError(f"N={self.N} must divide T={self.T}")
        if self.d % self.heads or self.d % self.wm_heads:
            raise ValueError("d must be divisible by the head counts")

    @property
    def grid(self) -> GridSpec:
        x0, x1, y0, y1 = self.extent
        return GridSpec(x0, x1, y0, y1, self.h, self.w)

    def iteration_steps(self) -> list:
        """Waypoint index ``t_i`` fed to world-model iteration ``i``."""
        return [(i + 1) * self.T // self.N - 1 for i in range(self.N)]


@dataclass
class LossWeights:
    gamma: float = 0.5
    div: float = 0.1
    div_margin: float = 2.0
    final: float = 1.0
    valid: float = 1.0
    state: float = 1.0
    area: float = 1.0
    bev: float = 1.0
    cls: float = 1.0
    box: float = 1.0
    im: float = 1.0
    sim: float = 1.0
    align: float = 1.0
    cur: float = 1.0
    fut: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be non-negative")


@dataclass
class CouplingConfig:
    inject_ego_tokens: bool = True
    proactive_gradient: bool = True
    use_world_model: bool = True
    mlp_reward_dims: tuple = (256, 1024, 1024, 6)
    reward_weights: tuple = (1.0, 1.0, 1.0, 1.0)
    log_eps: float = 1e-4

    def __post_init__(self):
        self.mlp_reward_dims = tuple(int(v) for v in self.mlp_reward_dims)
        self.reward_weights = tuple(float(v) for v in self.reward_weights)
        if not self.use_world_model and self.inject_ego_tokens:
            raise ValueError("inject_ego_tokens requires use_world_model")
        if any(w < 0 for w in self.reward_weights):
            raise ValueError("reward weights must be non-negative")
        if self.mlp_reward_dims[-1] != 6:
            raise ValueError("the reward MLP must emit 6 logits")


VARIANTS = {
    "full": {},
    "no_world_model": {"use_world_model": False, "inject_ego_tokens": False},
    "no_ego_injection": {"inject_ego_tokens": False},
    "no_proactive_gradient": {"proactive_gradient": False},
}


@dataclass
class RunConfig:
    train_dir: str = "data/train"
    eval_dir: str = "data/eval"
    out_dir: str = "runs/default"
    model: ModelConfig = field(default_factory=ModelConfig)
    losses: LossWeights = field(default_factory=LossWeights)
    coupling: CouplingConfig = field(default_factory=CouplingConfig)
    lr_ego: float = 1e-4
    lr_env: float = 1e-5
    weight_decay: float = 0.0
    grad_clip: float = 10.0
    epochs: int = 5
    batch_size: int = 8
    seed: int = 0
    anchors: int = 64
    max_train: int | None = None
    max_eval: int | None = None
    eval_every_epoch: bool = False
    cache_online_targets: bool = False

    def __post_init__(self):
        if self.lr_ego <= 0 or self.lr_env <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def with_variant(self, variant: str) -> "RunConfig":
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
        d = self.to_dict()
        d["coupling"].update(VARIANTS[variant])
        return RunConfig.from_dict(d)

    @classmethod
    def from_dict(cls, d: dict | None) -> "RunConfig":
        d = dict(d or {})
        nested = {"model": ModelConfig, "losses": LossWeights, "coupling": CouplingConfig}
        for key, typ in nested.items():
            if key in d and not is_dataclass(d[key]):
                d[key] = _build(typ, d[key] or {})
        return _build(cls, d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as f:
            return cls.from_dict(yaml.safe_load(f) or {})

    def save(self, path) -> None:
        with open(path, "w") as f:
            yaml.safe_dump(self.to_dict(), f, sort_keys=False)


# Overrides applied on top of the defaults. "desk" fits the full ablation suite
# on one CPU: an 8x8 BEV grid (8 m cells) and both learning rates scaled up
# tenfold, keeping their ratio.
PRESETS = {
    "paper": {},
    "desk": {"model": {"h": 8, "w": 8}, "lr_ego": 1e-3, "lr_env": 1e-4, "max_train": 512, "max_eval": 128},
}


def merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def preset(name: str, **overrides) -> RunConfig:
    """``RunConfig`` from a named preset plus nested ``overrides``."""
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return RunConfig.from_dict(merge(merge(RunConfig().to_dict(), PRESETS[name]), overrides))


def _build(typ, d: dict):
    known = {f.name for f in fields(typ)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown {typ.__name__} keys: {sorted(unknown)}")
    return typ(**d)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def config_hash(d: dict) -> str:
    blob = json.dumps(_plain(d), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
