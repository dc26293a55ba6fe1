"""Closed-loop evaluation of the selected trajectory per scenario.

``metrics.csv`` columns: ``scenario_id, selected, nc, dac, ttc, comfort, ep,
pdms, error, config_hash``. Failed scenarios keep their row with an ``error``
message and empty metrics. ``summary.csv`` holds one row: scenario count,
exclusions, per-subscore means and mean PDMS (means over per-scenario values).
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np
import torch

from ..coupling import DrivingSystem
from ..pdm import SUBSCORE_NAMES, pdms, rollout_check
from .data import PreparedSet, load_prepared

METRIC_COLUMNS = ("scenario_id", "selected") + SUBSCORE_NAMES + ("pdms", "error", "config_hash")
SUMMARY_COLUMNS = ("n", "excluded") + SUBSCORE_NAMES + ("pdms", "config_hash")


def _score_row(scenario, traj, selected, config_hash) -> dict:
    row = {"scenario_id": scenario.scenario_id, "selected": selected, "error": "", "config_hash": config_hash}
    try:
        s = rollout_check(scenario, traj)
    except ValueError as exc:
        row.update({k: math.nan for k in SUBSCORE_NAMES + ("pdms",)}, error=str(exc))
        return row
    row.update(zip(SUBSCORE_NAMES, s.as_array().tolist()))
    row["pdms"] = pdms(s)
    return row


@torch.no_grad()
def evaluate_system(system: DrivingSystem, data: PreparedSet, batch_size: int = 8, config_hash: str = "") -> list:
    """Plan, score candidates, select (the same forward pass as training) and roll the pick out."""
    was_training = system.training
    system.eval()
    rows = []
    for start in range(0, len(data), batch_size):
        idx = np.arange(start, min(start + batch_size, len(data)))
        batch = data.batch(idx)
        out = system(batch["obs"], batch["status"])
        props = out.plan.proposals.double().numpy()
        sel = out.selected.numpy()
        for b, sc in enumerate(batch["scenarios"]):
            rows.append(_score_row(sc, props[b, sel[b]], int(sel[b]), config_hash))
    system.train(was_training)
    return sorted(rows, key=lambda r: r["scenario_id"])


def evaluate_policy(policy, scenarios, config_hash: str = "") -> list:
    """Score ``policy(scenario) -> [T, 3]`` on each scenario."""
    rows = []
    for sc in scenarios:
        try:
            traj = np.asarray(policy(sc), dtype=float)
        except Exception as exc:  # a failing policy is recorded per scenario
            rows.append({"scenario_id": sc.scenario_id, "selected": "", "error": repr(exc),
                         "config_hash": config_hash, **{k: math.nan for k in SUBSCORE_NAMES + ("pdms",)}})
            continue
        rows.append(_score_row(sc, traj, 0, config_hash))
    return sorted(rows, key=lambda r: r["scenario_id"])


def summarize(rows) -> dict:
    ok = [r for r in rows if not r.get("error")]
    out = {"n": len(ok), "excluded": len(rows) - len(ok)}
    for k in SUBSCORE_NAMES + ("pdms",):
        out[k] = float(np.mean([float(r[k]) for r in ok])) if ok else math.nan
    out["config_hash"] = rows[0]["config_hash"] if rows else ""
    return out


def write_metrics(rows, out_dir) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = summarize(rows)
    for name, cols, data in (("metrics.csv", METRIC_COLUMNS, rows), ("summary.csv", SUMMARY_COLUMNS, [summary])):
        with open(out_dir / name, "w", newline="") as f:
            wr = csv.DictWriter(f, fieldnames=list(cols), lineterminator="\n")
            wr.writeheader()
            for r in data:
                wr.writerow({k: _fmt(r.get(k, "")) for k in cols})
    return summary


def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return v


def read_metrics(path) -> list:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def evaluate_checkpoint(ckpt, split, out_dir=None, max_eval: int | None = None, batch_size: int | None = None):
    """Evaluate ``ckpt`` on dataset dir ``split``; writes CSVs when ``out_dir`` is given."""
    from .train import load_checkpoint

    system, cfg, payload = load_checkpoint(ckpt)
    data = load_prepared(split, cfg.model, max_eval if max_eval is not None else cfg.max_eval)
    rows = evaluate_system(system, data, batch_size or cfg.batch_size, payload["config_hash"])
    summary = write_metrics(rows, out_dir) if out_dir is not None else summarize(rows)
    return rows, summary
