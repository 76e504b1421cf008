"""Figures written next to the tab-separated reports."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .adc import DensifyRecord  # noqa: E402

STYLE = {
    "figure.figsize": (4.0, 3.0),
    "figure.dpi": 120,
    "axes.grid": True,
    "grid.linestyle": ":",
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 8,
    "legend.fontsize": 7,
    "lines.linewidth": 1.2,
}


def figure_path(report_path) -> Path:
    """``report.tsv`` -> ``report.png``."""
    return Path(report_path).with_suffix(".png")


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_group_psnr(report, path, title: str = "test PSNR per view group") -> Path:
    """Bar chart of mean PSNR per group; identical (+inf) groups are drawn as hatched bars."""
    means = report.group_means()
    groups = list(means)
    vals = [means[g][0] for g in groups]
    finite = [v for v in vals if math.isfinite(v)]
    cap = (max(finite) if finite else 50.0) + 5.0
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        x = np.arange(len(groups))
        heights = [v if math.isfinite(v) else cap for v in vals]
        bars = ax.bar(x, heights, width=0.6, color="#4c72b0")
        for b, v in zip(bars, vals):
            if not math.isfinite(v):
                b.set_hatch("//")
            label = "inf" if not math.isfinite(v) else f"{v:.2f}"
            ax.text(b.get_x() + b.get_width() / 2, b.get_height(), label, ha="center",
                    va="bottom", fontsize=7)
        ax.set_xticks(x, [f"group {g}" for g in groups])
        ax.set_ylabel("PSNR (dB)")
        ax.set_title(title)
        return _save(fig, path)


def plot_densify(records: Sequence[DensifyRecord], path) -> Path:
    """Largest per-group average gradient and primitives added, per densification pass."""
    with plt.rc_context(STYLE):
        fig, (ax0, ax1) = plt.subplots(2, 1, sharex=True, figsize=(4.0, 4.0))
        its = [r.iteration for r in records]
        groups = sorted({g for r in records for g in r.group_max_avg})
        for g in groups:
            ax0.plot(its, [r.group_max_avg.get(g, np.nan) for r in records], marker=".",
                     label=f"group {g}")
        ax0.set_ylabel("max avg grad")
        if groups:
            ax0.set_yscale("log")
            ax0.legend()
        ax1.bar(its, [r.added for r in records], width=max(1, _spacing(its) * 0.4),
                color="#55a868", label="added")
        ax1.bar(its, [-r.pruned for r in records], width=max(1, _spacing(its) * 0.4),
                color="#c44e52", label="pruned")
        ax1.axhline(0, color="k", lw=0.5)
        ax1.set_xlabel("iteration")
        ax1.set_ylabel("primitives")
        ax1.legend()
        return _save(fig, path)


def _spacing(its) -> float:
    return float(np.min(np.diff(its))) if len(its) > 1 else 1.0


def plot_variants(summary: dict, path) -> Path:
    """Mean test PSNR per variant with per-seed points."""
    names = list(summary)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for i, n in enumerate(names):
            seeds = list(summary[n]["seeds"].values())
            ax.bar(i, summary[n]["mean"], width=0.6, color="#8172b2", alpha=0.6)
            ax.plot([i] * len(seeds), seeds, "k.", ms=4)
        ax.set_xticks(range(len(names)), names)
        ax.set_ylabel("mean test PSNR (dB)")
        finite = [v for n in names for v in summary[n]["seeds"].values() if math.isfinite(v)]
        if finite:
            ax.set_ylim(min(finite) - 1.0, max(finite) + 1.0)
        return _save(fig, path)


def plot_overlap(rows, path) -> Path:
    """Stacked common/unique primitive counts for each ordered model pair."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        labels = [f"{r.a} vs {r.b}" for r in rows]
        x = np.arange(len(rows))
        common = [r.common for r in rows]
        ax.bar(x, common, width=0.6, label="common", color="#4c72b0")
        ax.bar(x, [r.unique for r in rows], width=0.6, bottom=common, label="unique",
               color="#dd8452")
        ax.set_xticks(x, labels)
        ax.set_ylabel("primitives")
        ax.legend()
        return _save(fig, path)
