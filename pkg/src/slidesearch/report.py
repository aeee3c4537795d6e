"""Figure rendering for the report path: PR curves and training history.

The evaluation code emits delimited data only; this module turns those
tables into PNG files written next to the CSVs.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def render_pr_curve(points, path, title: str = "Interpolated precision-recall") -> None:
    recalls = [p[0] for p in points]
    precisions = [p[1] for p in points]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(recalls, precisions, marker="o", markersize=3)
    ax.set_xlabel("Recall")
    ax.set_ylabel("Precision")
    ax.set_xlim(0.0, 1.0)
    ax.set_ylim(0.0, 1.05)
    ax.grid(True, alpha=0.3)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(Path(path), dpi=120)
    plt.close(fig)


def render_history(history, path, title: str = "Training loss") -> None:
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(range(1, len(history) + 1), history)
    ax.set_xlabel("Epoch")
    ax.set_ylabel("Loss")
    ax.grid(True, alpha=0.3)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(Path(path), dpi=120)
    plt.close(fig)
