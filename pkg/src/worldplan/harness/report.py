"""Plots and a markdown summary for a training run or an ablation directory.

Training run directories need ``steps.csv``, ``epochs.csv``, ``config.yaml``
and ``checkpoint.pt``; ablation directories need ``ablation.csv``. Output goes
to ``<run>/report/``. PNGs are written without timestamps so regeneration is
byte-identical.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402

from ..forge.raster import CHANNELS  # noqa: E402
from .train import TERMS  # noqa: E402

RUN_FILES = ("steps.csv", "epochs.csv", "config.yaml", "checkpoint.pt")
ABLATION_FILES = ("ablation.csv",)
PNG_META = {"Software": None}
CLASS_COLORS = ["#c8c8c8", "#d62728", "#1f77b4", "#2ca02c", "#ffffff"]  # CHANNELS order


class ReportError(RuntimeError):
    pass


def _read(path) -> list:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _num(v):
    return float(v) if v not in ("", None) else math.nan


def _save(fig, path):
    fig.savefig(path, dpi=80, metadata=PNG_META)
    plt.close(fig)


def plot_losses(steps, epochs, path) -> dict:
    data = {"step": [int(r["step"]) for r in steps], "epoch": [int(r["epoch"]) for r in epochs]}
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(10, 4))
    for name in ("total",) + TERMS:
        data[f"step_{name}"] = [_num(r[name]) for r in steps]
        data[f"epoch_{name}"] = [_num(r[name]) for r in epochs]
        if not np.all(np.isnan(data[f"step_{name}"])):
            a1.plot(data["step"], data[f"step_{name}"], label=name, lw=1)
            a2.plot(data["epoch"], data[f"epoch_{name}"], marker="o", label=name)
    a1.set(xlabel="step", ylabel="loss", yscale="log", title="per-step losses")
    a2.set(xlabel="epoch", ylabel="epoch mean", yscale="log", title="per-epoch means")
    a2.legend(fontsize=7)
    _save(fig, path)
    return data


def plot_pdms(epochs, path) -> dict:
    pts = [(int(r["epoch"]), float(r["eval_pdms"])) for r in epochs if r.get("eval_pdms") not in ("", None)]
    fig, ax = plt.subplots(figsize=(5, 4))
    if pts:
        ax.plot(*zip(*pts), marker="o")
    else:
        ax.text(0.5, 0.5, "no per-epoch evaluation logged", ha="center", transform=ax.transAxes)
    ax.set(xlabel="epoch", ylabel="eval PDMS", title="PDMS per epoch")
    _save(fig, path)
    return {"epoch": [p[0] for p in pts], "pdms": [p[1] for p in pts]}


def plot_variants(rows, path) -> dict:
    means = [r for r in rows if r["seed"] == "mean"]
    data = {"variant": [r["variant"] for r in means], "pdms": [float(r["pdms"]) for r in means]}
    per_seed = {v: [float(r["pdms"]) for r in rows if r["variant"] == v and r["seed"] != "mean"]
                for v in data["variant"]}
    fig, ax = plt.subplots(figsize=(6, 4))
    x = np.arange(len(means))
    ax.bar(x, data["pdms"], color="#8fb3d9")
    for i, v in enumerate(data["variant"]):
        ax.scatter([i] * len(per_seed[v]), per_seed[v], color="k", s=10, zorder=3)
    ax.set_xticks(x, data["variant"], rotation=15, fontsize=8)
    ax.set(ylabel="mean PDMS", title="variants")
    _save(fig, path)
    data["per_seed"] = per_seed
    return data


def _class_image(sem_logits: np.ndarray) -> np.ndarray:
    # highest-priority channel whose probability passes 0.5; the most likely channel otherwise
    prob = 1.0 / (1.0 + np.exp(-sem_logits))
    cls = prob.argmax(0)
    for name in ("drivable", "route", "agent", "ego"):
        cls[prob[CHANNELS.index(name)] > 0.5] = CHANNELS.index(name)
    return cls


def _draw_map(ax, cls, extent, proposals, selected, title):
    cmap = matplotlib.colors.ListedColormap(CLASS_COLORS)
    x0, x1, y0, y1 = extent
    # cls is [ix, iy]; draw forward (+x) up and left (+y) on the left
    ax.imshow(cls[::-1, ::-1], cmap=cmap, vmin=-0.5, vmax=len(CHANNELS) - 0.5,
              extent=(y1, y0, x0, x1), interpolation="nearest")
    for k, p in enumerate(proposals):
        xs = np.concatenate([[0.0], p[:, 0]])
        ys = np.concatenate([[0.0], p[:, 1]])
        if k == selected:
            continue
        ax.plot(ys, xs, color="0.3", lw=0.8)
    p = proposals[selected]
    ax.plot(np.concatenate([[0.0], p[:, 1]]), np.concatenate([[0.0], p[:, 0]]), color="orange", lw=2.2)
    ax.set(xlim=(y1, y0), ylim=(x0, x1), title=title)
    ax.tick_params(labelsize=6)


def plot_bev(run_dir: Path, path, n: int = 2) -> dict:
    from .data import load_prepared
    from .train import load_checkpoint

    system, cfg, _ = load_checkpoint(run_dir / "checkpoint.pt")
    split = cfg.eval_dir if Path(cfg.eval_dir).exists() else cfg.train_dir
    data = load_prepared(split, cfg.model, n)
    batch = data.batch(np.arange(len(data)))
    with torch.no_grad():
        out = system(batch["obs"], batch["status"])
    props = out.plan.proposals.double().numpy()
    sel = out.selected.numpy()
    fig, axes = plt.subplots(len(data), 2, figsize=(7, 3.5 * len(data)), squeeze=False)
    shown = {"scenario_id": data.ids, "selected": sel.tolist()}
    for b in range(len(data)):
        cur_truth = batch["cur_target"][b].numpy()
        cur = out.cur_logits[b].numpy() if out.cur_logits is not None else None
        fut = out.fut_logits[b].numpy() if out.fut_logits is not None else None
        if cur is None:
            cur_cls = _class_image(np.where(cur_truth > 0.5, 10.0, -10.0))
            title = "current (ground truth)"
        else:
            cur_cls, title = _class_image(cur), "current (predicted)"
        _draw_map(axes[b, 0], cur_cls, cfg.model.extent, props[b], sel[b], f"{data.ids[b]} {title}")
        if fut is None:
            axes[b, 1].axis("off")
            axes[b, 1].text(0.5, 0.5, "no world model", ha="center", transform=axes[b, 1].transAxes)
        else:
            _draw_map(axes[b, 1], _class_image(fut), cfg.model.extent, props[b], sel[b], "future (predicted)")
    _save(fig, path)
    return shown


def missing_files(run_dir: Path) -> list:
    if (run_dir / "ablation.csv").exists():
        return []
    return [f for f in RUN_FILES if not (run_dir / f).exists()]


def report(run_dir) -> dict:
    """Render plots for ``run_dir``; returns the plotted data keyed by figure."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise ReportError(f"{run_dir} is not a directory; expected {', '.join(RUN_FILES)} or {ABLATION_FILES[0]}")
    missing = missing_files(run_dir)
    if missing:
        raise ReportError(f"{run_dir}: missing {', '.join(missing)} (a run needs {', '.join(RUN_FILES)}; "
                          f"an ablation needs {ABLATION_FILES[0]})")
    out = run_dir / "report"
    out.mkdir(exist_ok=True)
    plotted = {}
    lines = [f"# Report for {run_dir.name}", ""]
    if (run_dir / "ablation.csv").exists():
        rows = _read(run_dir / "ablation.csv")
        plotted["variants"] = plot_variants(rows, out / "variants.png")
        lines += ["| variant | mean PDMS |", "|---|---|"]
        lines += [f"| {v} | {p:.4f} |" for v, p in zip(plotted["variants"]["variant"], plotted["variants"]["pdms"])]
        lines += ["", "![variants](variants.png)"]
    else:
        steps, epochs = _read(run_dir / "steps.csv"), _read(run_dir / "epochs.csv")
        plotted["losses"] = plot_losses(steps, epochs, out / "losses.png")
        plotted["pdms"] = plot_pdms(epochs, out / "pdms.png")
        plotted["bev"] = plot_bev(run_dir, out / "bev.png")
        lines += [f"config hash: `{epochs[-1]['config_hash'] if epochs else ''}`", "",
                  "| epoch | total loss | eval PDMS |", "|---|---|---|"]
        lines += [f"| {r['epoch']} | {float(r['total']):.4f} | {r.get('eval_pdms', '')} |" for r in epochs]
        lines += ["", "![losses](losses.png)", "![pdms](pdms.png)", "![bev](bev.png)"]
    (out / "report.md").write_text("\n".join(lines) + "\n")
    return plotted
