"""File-only figures for training curves and evaluation reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import METRICS, REGIONS, EvaluationReport  # noqa: E402
from .trainer import NETS  # noqa: E402


def plot_loss_curves(history: np.ndarray, path) -> Path:
    """Epoch-mean loss of both networks on a log axis."""
    h = np.asarray(history)
    fig, ax = plt.subplots(figsize=(6, 4))
    for i, net in enumerate(NETS):
        rows = h[h[:, 2] == i]
        if len(rows) == 0:
            continue
        epochs = np.unique(rows[:, 0])
        ax.plot(epochs, [rows[rows[:, 0] == e, 3].mean() for e in epochs], marker=".", label=net)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    ax.set_yscale("log")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_report(report: EvaluationReport, path) -> Path:
    """Per-region mean and std of each metric, one panel per metric."""
    fig, axes = plt.subplots(1, len(METRICS), figsize=(3 * len(METRICS), 3.2))
    regions = list(REGIONS)
    for ax, metric in zip(axes, METRICS):
        means = [report.summary[r][metric]["mean"] for r in regions]
        stds = [report.summary[r][metric]["std"] for r in regions]
        ax.bar(regions, np.nan_to_num(means), yerr=np.nan_to_num(stds), capsize=4, color=["#c0504d", "#4f81bd"])
        ax.set_title(metric)
        if metric == "SC":
            ax.set_ylim(0, 1.05)
    fig.suptitle(f"{len(report.cases)} cases")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
