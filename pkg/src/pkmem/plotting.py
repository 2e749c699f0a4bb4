"""Figures for the CLI reports, rendered headless to PNG next to the CSV/JSONL files."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

GOLDEN = (math.sqrt(5) - 1.0) / 2.0

STYLE = {
    "figure.dpi": 110,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "lines.linewidth": 1.4,
}

SERIES_COLORS = {"dense": "#4c72b0", "memory": "#dd8452", "atomics": "#55a868", "lock": "#c44e52",
                 "reverse_indices": "#8172b3", "sequential": "#937860"}


def figure(ncols: int = 1, width: float = 4.5):
    fig, axes = plt.subplots(1, ncols, figsize=(width * ncols, width * GOLDEN), squeeze=False)
    return fig, list(axes[0])


def save(fig, path, header: str | None = None) -> Path:
    """Write ``fig`` as PNG; the run header goes into the PNG text metadata."""
    path = Path(path)
    meta = {"Software": "pkmem"}
    if header:
        meta["Description"] = header
    fig.savefig(path, format="png", metadata=meta)
    plt.close(fig)
    return path


def plot_training(curves: dict, path, threshold: float | None = None, header: str | None = None) -> Path:
    """Loss and recall against step for each named run.

    ``curves`` maps a label to a sequence of metric records with ``step``,
    ``train_loss``, ``eval_nll`` and ``recall``.
    """
    with plt.rc_context(STYLE):
        fig, (ax_loss, ax_rec) = figure(2)
        for label, recs in curves.items():
            steps = [r["step"] for r in recs]
            color = SERIES_COLORS.get(label.split("-")[0])
            ax_loss.plot(steps, [r["train_loss"] for r in recs], color=color, label=f"{label} train")
            ax_loss.plot(steps, [r["eval_nll"] for r in recs], color=color, ls="--", label=f"{label} eval")
            ax_rec.plot(steps, [r["recall"] for r in recs], color=color, label=label)
        if threshold is not None:
            ax_rec.axhline(threshold, color="0.5", lw=0.8, ls=":")
        ax_loss.set(xlabel="step", ylabel="NLL (object token)", yscale="log")
        ax_rec.set(xlabel="step", ylabel="recall", ylim=(0, 1.02))
        ax_loss.legend()
        ax_rec.legend(loc="lower right")
        return save(fig, path, header)


def plot_bench(reports, path, header: str | None = None) -> Path:
    """Median GB/s per strategy against value dim, one panel per skew."""
    import numpy as np

    skews = sorted({r.skew for r in reports})
    with plt.rc_context(STYLE):
        fig, axes = figure(max(1, len(skews)))
        for ax, skew in zip(axes, skews):
            rows = [r for r in reports if r.skew == skew]
            for strat in sorted({r.strategy for r in rows}):
                for workers in sorted({r.workers for r in rows}):
                    pts = {}
                    for r in rows:
                        if r.strategy == strat and r.workers == workers:
                            pts.setdefault(r.n, []).append(r.gbps)
                    if not pts:
                        continue
                    ns = sorted(pts)
                    ax.plot(ns, [float(np.median(pts[n])) for n in ns], marker="o", ms=3,
                            color=SERIES_COLORS.get(strat), alpha=1.0 if workers == 1 else 0.6,
                            ls="-" if workers == 1 else "--", label=f"{strat} w={workers}")
            ax.set(xscale="log", xlabel="value dim n", ylabel="GB/s", title=f"{skew} indices")
            ax.legend()
        return save(fig, path, header)


def plot_ablation(rows, path, header: str | None = None) -> Path:
    """Final recall and train NLL per swept value, one line per seed."""
    with plt.rc_context(STYLE):
        fig, (ax_rec, ax_nll) = figure(2)
        values = list(dict.fromkeys(r.value for r in rows))
        x = {v: i for i, v in enumerate(values)}
        for seed in sorted({r.seed for r in rows}):
            sel = [r for r in rows if r.seed == seed]
            ax_rec.plot([x[r.value] for r in sel], [r.recall for r in sel], marker="o", ms=3, label=f"seed {seed}")
            ax_nll.plot([x[r.value] for r in sel], [r.train_nll for r in sel], marker="o", ms=3,
                        label=f"seed {seed}")
        axis = rows[0].axis if rows else ""
        for ax, ylabel in ((ax_rec, "final recall"), (ax_nll, "final train NLL")):
            ax.set_xticks(range(len(values)))
            ax.set_xticklabels(values)
            ax.set(xlabel=axis, ylabel=ylabel)
        ax_rec.legend()
        return save(fig, path, header)
