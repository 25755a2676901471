"""Figures for search and training runs, rendered to SVG next to the
CSVs they come from.  Output is deterministic: fixed hash salt, no
embedded dates."""

from __future__ import annotations

import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

GROUP_ORDER = ["C1", "C2", "C4", "D1", "D2", "D4"]
_COLORS = {"C1": "#888888", "C2": "#1f77b4", "C4": "#2ca02c",
           "D1": "#9467bd", "D2": "#ff7f0e", "D4": "#d62728"}


def _save(fig, path: str) -> str:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with plt.rc_context({"svg.hashsalt": "equisearch"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def _f(row, key):
    return float(row[key])


def plot_training(records, path: str) -> str:
    """Loss against optimizer step."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    steps = [int(r["step"]) for r in records]
    losses = [_f(r, "loss") for r in records]
    ax.plot(steps, losses, lw=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def plot_evo(rows, path: str) -> str:
    """Left: best and selected-mean validation accuracy per generation.
    Right: the final generation in (params, acc) space with survivors
    marked."""
    gens = sorted({int(r["gen"]) for r in rows})
    best, sel_mean = [], []
    for g in gens:
        accs = [_f(r, "val_acc") for r in rows if int(r["gen"]) == g]
        sel = [_f(r, "val_acc") for r in rows
               if int(r["gen"]) == g and int(r["selected"])]
        best.append(max(accs))
        sel_mean.append(float(np.mean(sel)) if sel else float("nan"))

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(gens, best, marker="o", ms=3, label="best")
    ax1.plot(gens, sel_mean, marker="s", ms=3, label="selected mean")
    ax1.set_xlabel("generation")
    ax1.set_ylabel("val accuracy")
    ax1.legend(fontsize=8)
    ax1.grid(alpha=0.3)

    last = gens[-1]
    final = [r for r in rows if int(r["gen"]) == last]
    for r in final:
        picked = bool(int(r["selected"]))
        ax2.scatter(int(r["params"]), _f(r, "val_acc"),
                    marker="o" if picked else "x",
                    c="#d62728" if picked else "#888888", s=22)
        ax2.annotate(r["genotype"], (int(r["params"]), _f(r, "val_acc")),
                     fontsize=5, alpha=0.7)
    ax2.set_xlabel("parameters")
    ax2.set_ylabel("val accuracy")
    ax2.set_title(f"generation {last}", fontsize=9)
    ax2.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def plot_diff(rows, path: str, n_layers: int | None = None) -> str:
    """Mixture-weight trajectories, one panel per layer."""
    if n_layers is None:
        n_layers = 0
        while f"z{n_layers}_C1" in rows[0]:
            n_layers += 1
    iters = [int(r["iter"]) for r in rows]
    cols = min(n_layers, 4)
    rows_of_axes = (n_layers + cols - 1) // cols
    fig, axes = plt.subplots(rows_of_axes, cols,
                             figsize=(3.0 * cols, 2.6 * rows_of_axes),
                             squeeze=False)
    for l in range(n_layers):
        ax = axes[l // cols][l % cols]
        for name in GROUP_ORDER:
            ax.plot(iters, [_f(r, f"z{l}_{name}") for r in rows],
                    label=name, color=_COLORS[name], lw=1.0)
        ax.set_title(f"layer {l}", fontsize=9)
        ax.set_ylim(0, 1)
        ax.grid(alpha=0.3)
        if l == 0:
            ax.legend(fontsize=6, ncol=2)
    for l in range(n_layers, rows_of_axes * cols):
        axes[l // cols][l % cols].axis("off")
    fig.supxlabel("iteration", fontsize=9)
    fig.supylabel("mixture weight", fontsize=9)
    fig.tight_layout()
    return _save(fig, path)


def render_run_dir(run_dir: str, out_dir: str | None = None) -> list[str]:
    """Render a figure for every known CSV found in a run directory."""
    from . import train as tr
    out_dir = out_dir or run_dir
    written = []
    jobs = [("train_log.csv", plot_training, "training.svg"),
            ("evo_history.csv", plot_evo, "evo.svg"),
            ("diff_trajectory.csv", plot_diff, "diff.svg")]
    for csv_name, fn, svg_name in jobs:
        src = os.path.join(run_dir, csv_name)
        if os.path.exists(src):
            rows = tr.read_rows(src)
            if rows:
                written.append(fn(rows, os.path.join(out_dir, svg_name)))
    return written
