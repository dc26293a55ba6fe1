"""Full system versus its three coupling ablations, over several seeds.

``ablation.csv`` has one row per (seed, variant) followed by one ``mean`` row
per variant; columns are ``ABLATION_COLUMNS``. ``ablation_summary.json``
carries the per-variant means and the one-sided sign test of full against
each ablation.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import replace
from pathlib import Path

from ..config import RunConfig
from ..pdm import SUBSCORE_NAMES
from .data import load_anchors, load_prepared
from .evaluate import evaluate_system, write_metrics
from .train import load_checkpoint, train

log = logging.getLogger(__name__)

VARIANT_ORDER = ("full", "no_world_model", "no_ego_injection", "no_proactive_gradient")
ABLATION_COLUMNS = (
    ("seed", "variant") + SUBSCORE_NAMES + ("pdms", "use_world_model", "inject_ego_tokens",
                                            "proactive_gradient", "config_hash")
)


def sign_test(wins: int, losses: int) -> float:
    """One-sided sign-test p-value for ``wins`` out of ``wins + losses`` non-tied pairs."""
    n = wins + losses
    if n == 0:
        return 1.0
    return sum(math.comb(n, k) for k in range(wins, n + 1)) / 2**n


def compare(rows, baseline: str = "full") -> dict:
    """Means per variant and a sign test of ``baseline`` against every other variant."""
    by = {}
    for r in rows:
        by.setdefault(r["variant"], {})[r["seed"]] = r["pdms"]
    means = {v: sum(d.values()) / len(d) for v, d in by.items()}
    tests = {}
    for v, d in by.items():
        if v == baseline:
            continue
        seeds = sorted(set(d) & set(by[baseline]))
        wins = sum(by[baseline][s] > d[s] for s in seeds)
        losses = sum(by[baseline][s] < d[s] for s in seeds)
        tests[v] = {"wins": wins, "losses": losses, "ties": len(seeds) - wins - losses,
                    "p_value": sign_test(wins, losses)}
    return {"mean_pdms": means, "sign_test": tests}


def ablate(base: RunConfig, seeds, variants=VARIANT_ORDER, out_dir=None) -> dict:
    out_dir = Path(out_dir or base.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    base.save(out_dir / "base_config.yaml")
    # identical data and anchors for every run
    train_set = load_prepared(base.train_dir, base.model, base.max_train)
    eval_set = load_prepared(base.eval_dir, base.model, base.max_eval)
    anchors = load_anchors(base.train_dir, train_set.scenarios, base.anchors, seed=0)
    rows = []
    for seed in seeds:
        for variant in variants:
            cfg = replace(base.with_variant(variant), seed=int(seed),
                          out_dir=str(out_dir / variant / f"seed{seed}"))
            log.info("ablation run %s seed %s", variant, seed)
            res = train(cfg, train_set, anchors, eval_set if cfg.eval_every_epoch else None)
            evals = evaluate_system(load_checkpoint(res.checkpoint)[0], eval_set, cfg.batch_size, res.config_hash)
            summary = write_metrics(evals, res.out_dir / "eval")
            c = cfg.coupling
            rows.append({"seed": int(seed), "variant": variant,
                         **{k: summary[k] for k in SUBSCORE_NAMES + ("pdms",)},
                         "use_world_model": c.use_world_model, "inject_ego_tokens": c.inject_ego_tokens,
                         "proactive_gradient": c.proactive_gradient, "config_hash": res.config_hash})
    result = compare(rows)
    write_table(rows, out_dir / "ablation.csv", base.hash())
    (out_dir / "ablation_summary.json").write_text(json.dumps(result, indent=1, sort_keys=True))
    result["rows"] = rows
    return result


def write_table(rows, path, base_hash: str = "") -> None:
    """Per-run rows, then per-variant means stamped with the base config hash."""
    variants = [v for v in VARIANT_ORDER if any(r["variant"] == v for r in rows)]
    means = []
    for v in variants:
        vr = [r for r in rows if r["variant"] == v]
        m = {k: sum(r[k] for r in vr) / len(vr) for k in SUBSCORE_NAMES + ("pdms",)}
        m.update(seed="mean", variant=v, **{k: vr[0][k] for k in ABLATION_COLUMNS[-4:-1]})
        m["config_hash"] = base_hash
        means.append(m)
    with open(path, "w", newline="") as f:
        wr = csv.DictWriter(f, fieldnames=list(ABLATION_COLUMNS), lineterminator="\n")
        wr.writeheader()
        for r in rows + means:
            wr.writerow({k: r[k] for k in ABLATION_COLUMNS})


def read_table(path) -> list:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
