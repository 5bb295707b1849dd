"""Report figures. Rendered with the Agg backend; PNGs carry no timestamp or version metadata."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

COLORS = ["#1b6ca8", "#d1495b", "#66a182", "#edae49", "#6c4f77", "#2e4057"]

STYLE = {
    "axes.prop_cycle": matplotlib.cycler(color=COLORS),
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "font.size": 8,
    "font.family": "DejaVu Sans",
    "legend.fontsize": 8,
    "legend.frameon": False,
    "lines.linewidth": 1.4,
    "figure.dpi": 100,
    "savefig.dpi": 120,
}

# drop Software/Creation metadata so identical inputs give identical bytes
_PNG_METADATA = {"Software": None}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.savefig(path, format="png", metadata=_PNG_METADATA)
    plt.close(fig)
    return path


def training_curves(stats: Sequence[Mapping[str, float]], path: str | Path) -> Path:
    """Reward components and KL against step."""
    steps = [row["step"] for row in stats]
    with plt.rc_context(STYLE):
        fig, (top, bottom) = plt.subplots(2, 1, figsize=(5.5, 4.8), sharex=True)
        for col, label in [("mean_reward", "r_final"), ("mean_r_acc", "r_acc"),
                           ("mean_r_proxy", "r_proxy"), ("mean_r_format", "r_format")]:
            top.plot(steps, [row[col] for row in stats], label=label)
        top.set_ylabel("expected reward")
        top.legend(loc="lower right", ncol=2)
        bottom.plot(steps, [row["mean_kl"] for row in stats], color=COLORS[4], label="KL to reference")
        bottom.plot(steps, [row["clip_fraction"] for row in stats], color=COLORS[5], ls="--", label="clip fraction")
        bottom.set_xlabel("step")
        bottom.legend(loc="upper left")
        fig.tight_layout()
        return _save(fig, path)


def dataset_bars(rows: Sequence[Mapping], path: str | Path, metrics: Sequence[str] = ("em", "acc", "mc", "faith")) -> Path:
    """Grouped per-dataset bars for every metric present in ``rows`` (values in percent)."""
    present = [m for m in metrics if any(row.get(m) is not None for row in rows)]
    names = [str(row["dataset"]) for row in rows]
    width = 0.8 / max(len(present), 1)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * len(names) + 2), 3.2))
        for k, m in enumerate(present):
            xs = [i + (k - (len(present) - 1) / 2) * width for i in range(len(names))]
            ax.bar(xs, [row.get(m) or 0.0 for row in rows], width=width, label=m)
        ax.set_xticks(range(len(names)), names, rotation=30, ha="right")
        ax.set_ylim(0, 100)
        ax.set_ylabel("score (%)")
        ax.legend(ncol=len(present) or 1, loc="upper right")
        fig.tight_layout()
        return _save(fig, path)


def reward_histogram(counts: Mapping[int, int], path: str | Path) -> Path:
    levels = [0, 1, 2, 3]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.6, 2.6))
        ax.bar(levels, [counts.get(v, 0) for v in levels], color=COLORS[0])
        ax.set_xticks(levels)
        ax.set_xlabel("r_final")
        ax.set_ylabel("rollouts")
        fig.tight_layout()
        return _save(fig, path)


def perplexity_bars(per_dataset: Mapping[str, float], path: str | Path) -> Path:
    names = sorted(per_dataset)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4.0, 0.6 * len(names) + 2), 3.0))
        ax.bar(range(len(names)), [per_dataset[n] for n in names], color=COLORS[1])
        ax.set_xticks(range(len(names)), names, rotation=30, ha="right")
        ax.set_ylabel("mean perplexity")
        fig.tight_layout()
        return _save(fig, path)
