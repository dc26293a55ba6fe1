"""Command line entry point: ``worldplan <command> ...``.

Every flag can also be set through an environment variable named
``WORLDPLAN_<FLAG>`` (upper case, dashes as underscores), e.g.
``WORLDPLAN_CONFIG=run.yaml worldplan train``. Explicit flags win.
``WORLDPLAN_TRAIN_DIR``, ``WORLDPLAN_EVAL_DIR`` and ``WORLDPLAN_OUT_DIR``
override the matching paths inside a run config.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from ..config import PRESETS

ENV_PREFIX = "WORLDPLAN_"
CONFIG_PATH_KEYS = ("train_dir", "eval_dir", "out_dir")


def parse_range(text: str) -> range:
    """``"A:B"`` to ``range(A, B)``; a bare ``"N"`` means ``range(0, N)``."""
    lo, sep, hi = text.partition(":")
    try:
        r = range(int(lo), int(hi)) if sep else range(int(lo))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected A:B, got {text!r}") from None
    if len(r) == 0:
        raise argparse.ArgumentTypeError(f"empty range {text!r}")
    return r


def _env(name: str):
    return os.environ.get(ENV_PREFIX + name.upper().replace("-", "_"))


def _arg(p, flag, **kw):
    name = flag.lstrip("-")
    env = _env(name)
    if env is not None:
        kw["default"] = kw["type"](env) if "type" in kw else env
        kw["required"] = False
    p.add_argument(flag, **kw)


def _load_run_config(path, preset_name="paper"):
    """Preset, then the YAML file on top, then path overrides from the environment."""
    import yaml

    from ..config import merge, preset

    d = preset(preset_name).to_dict()
    if path:
        with open(path) as f:
            d = merge(d, yaml.safe_load(f) or {})
    for key in CONFIG_PATH_KEYS:
        if _env(key):
            d[key] = _env(key)
    return preset("paper", **d)


def _gen_one(args):
    from ..forge.generate import GeneratorConfig, generate_scenario

    seed, cfg = args
    return generate_scenario(seed, GeneratorConfig.from_dict(cfg))


def cmd_generate(a) -> int:
    import yaml

    from ..forge.dataset import write_dataset
    from ..forge.generate import GeneratorConfig

    raw = {}
    if a.config:
        with open(a.config) as f:
            raw = yaml.safe_load(f) or {}
    gcfg = GeneratorConfig.from_dict(raw).to_dict()
    jobs = [(s, gcfg) for s in a.seed_range]
    if a.workers > 1:
        with ProcessPoolExecutor(a.workers) as ex:
            scenarios = list(ex.map(_gen_one, jobs, chunksize=16))
    else:
        scenarios = [_gen_one(j) for j in jobs]
    manifest = write_dataset(scenarios, a.out, gcfg)
    print(f"wrote {manifest['count']} scenarios to {a.out}")
    return 0


def load_trajectories(path) -> dict:
    """``scenario_id -> [T, 3]`` from ``.npz`` (one array per id) or ``.json``."""
    path = Path(path)
    if path.suffix == ".npz":
        with np.load(path) as z:
            return {k: z[k] for k in z.files}
    with open(path) as f:
        return {k: np.asarray(v, dtype=float) for k, v in json.load(f).items()}


def cmd_score(a) -> int:
    from ..forge.dataset import read_dataset
    from .evaluate import evaluate_policy, write_metrics

    scenarios = read_dataset(a.dataset)
    trajs = load_trajectories(a.trajectories)
    missing = [sc.scenario_id for sc in scenarios if sc.scenario_id not in trajs]
    if missing and not a.allow_missing:
        print(f"no trajectory for {len(missing)} scenarios (first: {missing[0]})", file=sys.stderr)
        return 2
    scenarios = [sc for sc in scenarios if sc.scenario_id in trajs]
    rows = evaluate_policy(lambda sc: trajs[sc.scenario_id], scenarios, config_hash="")
    summary = write_metrics(rows, a.out)
    print(json.dumps(summary))
    return 0


def cmd_train(a) -> int:
    from .train import train

    cfg = _load_run_config(a.config, a.preset)
    if a.out_dir:
        cfg.out_dir = a.out_dir
    res = train(cfg)
    print(f"checkpoint: {res.checkpoint} (config {res.config_hash})")
    return 0


def cmd_eval(a) -> int:
    from .evaluate import evaluate_checkpoint

    out = a.out or str(Path(a.ckpt).parent / "eval")
    _, summary = evaluate_checkpoint(a.ckpt, a.split, out, max_eval=a.max_eval)
    print(json.dumps(summary))
    return 0


def cmd_ablate(a) -> int:
    from .ablate import ablate

    cfg = _load_run_config(a.config, a.preset)
    result = ablate(cfg, a.seeds, out_dir=a.out_dir or cfg.out_dir)
    result.pop("rows")
    print(json.dumps(result, indent=1, sort_keys=True))
    return 0


def cmd_report(a) -> int:
    from .report import ReportError, report

    try:
        report(a.run)
    except ReportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"report written to {Path(a.run) / 'report'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="worldplan", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a scenario dataset")
    _arg(p, "--seed-range", type=parse_range, required=True, help="seeds A:B (B exclusive)")
    _arg(p, "--out", required=True, help="dataset directory")
    _arg(p, "--config", help="generator YAML")
    _arg(p, "--workers", type=int, default=1)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("score", help="score given trajectories with the oracle")
    _arg(p, "--dataset", required=True)
    _arg(p, "--trajectories", required=True, help=".npz or .json keyed by scenario_id")
    _arg(p, "--out", default="score")
    p.add_argument("--allow-missing", action="store_true")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("train", help="train a model")
    _arg(p, "--config", help="run config YAML")
    _arg(p, "--preset", default="paper", choices=sorted(PRESETS), help="defaults the YAML is layered on")
    _arg(p, "--out-dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    _arg(p, "--ckpt", required=True)
    _arg(p, "--split", required=True)
    _arg(p, "--out")
    _arg(p, "--max-eval", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate all variants over seeds")
    _arg(p, "--config", help="base run config YAML")
    _arg(p, "--preset", default="paper", choices=sorted(PRESETS), help="defaults the YAML is layered on")
    _arg(p, "--seeds", type=parse_range, default=range(5))
    _arg(p, "--out-dir")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="plots and summary for a run directory")
    _arg(p, "--run", required=True)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    a = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    return a.func(a)


if __name__ == "__main__":
    sys.exit(main())
