"""Figure rendering for training logs and ablation sweeps (Agg backend)."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def plot_loss_curves(log_csv, out_png):
    """Per-term loss curves from a training log CSV."""
    steps, series = [], {"l_simple": [], "l_vlb": [], "l_perc": [], "total": []}
    with open(log_csv) as f:
        for row in csv.DictReader(f):
            steps.append(int(row["step"]))
            for key in series:
                series[key].append(float(row[key]))
    fig, ax = plt.subplots(figsize=(7, 4))
    for key, values in series.items():
        ax.plot(steps, values, label=key, linewidth=1.0)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return Path(out_png)


def plot_ablation_metric(rows, metric, out_png):
    """One line per (sweep target, order) across the swept weight values."""
    fig, ax = plt.subplots(figsize=(7, 4))
    for target in ("style", "text"):
        for order in ("style_first", "text_first"):
            pts = [
                (r["weight"], r[metric])
                for r in rows
                if r["sweep_target"] == target and r["order"] == order
            ]
            if not pts:
                continue
            pts.sort()
            ax.plot(
                [p[0] for p in pts],
                [p[1] for p in pts],
                marker="o",
                markersize=3,
                linewidth=1.0,
                label=f"sweep {target}, {order}",
            )
    defaults = [r for r in rows if r.get("default_setting")]
    if defaults:
        ax.scatter(
            [r["weight"] for r in defaults],
            [r[metric] for r in defaults],
            s=80,
            facecolors="none",
            edgecolors="black",
            label="default setting",
        )
    ax.set_xlabel("swept guidance weight")
    ax.set_ylabel(metric)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return Path(out_png)
