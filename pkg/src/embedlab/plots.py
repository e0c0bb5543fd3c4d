"""Figures for ablation summaries (Agg backend, deterministic PNG bytes)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_STYLE = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, path: Path) -> None:
    # no Software/date metadata, so reruns produce identical bytes
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)


def _objectives(ax_row, summary):
    regimes = list(dict.fromkeys(r["regime"] for r in summary))
    for ax, regime in zip(ax_row, regimes):
        for obj in ("nce", "distill", "score"):
            pts = [(r["step"], r["ndcg@10"]) for r in summary if r["regime"] == regime and r["objective"] == obj]
            if pts:
                s, v = zip(*pts)
                ax.plot(s, v, marker="o", ms=3, label=obj)
        ax.set_title(f"{regime} regime")
        ax.set_xlabel("step")
        ax.set_ylabel("nDCG@10")
        ax.legend(frameon=False)


def plot_ablation(result, path) -> None:
    path = Path(path)
    s = result.summary
    with plt.rc_context(_STYLE):
        if result.name == "objectives":
            n = len({r["regime"] for r in s})
            fig, axes = plt.subplots(1, n, figsize=(4 * n, 3), squeeze=False)
            _objectives(axes[0], s)
        elif result.name == "projection":
            fig, ax = plt.subplots(figsize=(5, 3))
            labels = [r["setting"] for r in s]
            ax.bar(range(len(s)), [r["ndcg@10"] for r in s], color="0.6")
            ax.set_xticks(range(len(s)), labels, rotation=20, ha="right")
            ax.set_ylabel("nDCG@10")
        elif result.name == "retrieval-components":
            fig, ax = plt.subplots(figsize=(5, 3))
            ax.barh(range(len(s))[::-1], [r["ndcg@10"] for r in s], color="0.6")
            ax.set_yticks(range(len(s))[::-1], [r["loss_configuration"] for r in s])
            ax.set_xlabel("nDCG@10")
        elif result.name == "gor-quantization":
            fig, ax = plt.subplots(figsize=(4, 3))
            x = np.arange(len(s))
            ax.bar(x - 0.2, [r["full"] for r in s], 0.4, label="full precision")
            ax.bar(x + 0.2, [r["binary"] for r in s], 0.4, label="binary")
            ax.set_xticks(x, [r["configuration"] for r in s])
            ax.set_ylabel("nDCG@10")
            ax.legend(frameon=False)
        elif result.name == "mrl-sweep":
            fig, ax = plt.subplots(figsize=(4, 3))
            ax.plot([r["dim"] for r in s], [r["ndcg@10"] for r in s], marker="o")
            ax.set_xscale("log", base=2)
            ax.set_xlabel("embedding dimension")
            ax.set_ylabel("nDCG@10")
        else:
            raise ValueError(f"no figure for {result.name}")
        fig.tight_layout()
        _save(fig, path)
