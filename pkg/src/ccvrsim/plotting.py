"""Matplotlib figures written next to the CSV/JSON reports."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
    "font.size": 8,
    "axes.labelsize": 8,
    "axes.titlesize": 9,
    "legend.fontsize": 7,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.2,
}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    # no Software tag, so PNG bytes depend only on the data
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def label_histogram_figure(hist: np.ndarray, path: str | Path) -> Path:
    """Per-client stacked class counts."""
    with plt.rc_context(STYLE):
        k, c = hist.shape
        fig, ax = plt.subplots(figsize=(5, 0.3 * k + 1.2))
        left = np.zeros(k)
        cmap = plt.get_cmap("tab10" if c <= 10 else "tab20")
        for j in range(c):
            ax.barh(np.arange(k), hist[:, j], left=left, color=cmap(j % cmap.N), label=str(j))
            left += hist[:, j]
        ax.set_yticks(np.arange(k))
        ax.set_ylabel("client")
        ax.set_xlabel("samples")
        ax.invert_yaxis()
        ax.legend(title="class", ncol=min(c, 10), loc="upper center", bbox_to_anchor=(0.5, -0.25), frameon=False)
        return _save(fig, path)


def accuracy_curve_figure(rounds: Sequence[int], accuracy: Sequence[float], path: str | Path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 2.5))
        ax.plot(rounds, 100 * np.asarray(accuracy), marker="o", markersize=2)
        ax.set_xlabel("round")
        ax.set_ylabel("test accuracy (%)")
        return _save(fig, path)


def classifier_norms_figure(norms: np.ndarray, row_labels: Sequence[str], path: str | Path) -> Path:
    """Heatmap of classifier row norms, one row per (round, client)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 0.25 * len(row_labels) + 1.2))
        im = ax.imshow(norms, aspect="auto", cmap="viridis")
        ax.set_yticks(np.arange(len(row_labels)))
        ax.set_yticklabels(row_labels)
        ax.set_xlabel("class")
        fig.colorbar(im, ax=ax, label=r"$\|\varphi_c\|_2$")
        return _save(fig, path)


def cka_layers_figure(names: Sequence[str], means: Sequence[float], path: str | Path, title: str = "") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 2.5))
        ax.bar(np.arange(len(names)), means, color="tab:blue")
        ax.set_xticks(np.arange(len(names)))
        ax.set_xticklabels(names, rotation=30, ha="right")
        ax.set_ylim(0, 1)
        ax.set_ylabel("mean cross-client CKA")
        if title:
            ax.set_title(title)
        return _save(fig, path)


def matrix_figure(matrix: np.ndarray, labels: Sequence[int | str], path: str | Path, label: str) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.5, 3))
        im = ax.imshow(matrix, cmap="magma")
        ax.set_xticks(np.arange(len(labels)))
        ax.set_yticks(np.arange(len(labels)))
        ax.set_xticklabels(labels)
        ax.set_yticklabels(labels)
        fig.colorbar(im, ax=ax, label=label)
        return _save(fig, path)


def calibration_figure(before: np.ndarray, after: np.ndarray, path: str | Path) -> Path:
    """Per-class accuracy before and after classifier calibration."""
    with plt.rc_context(STYLE):
        c = len(before)
        x = np.arange(c)
        fig, ax = plt.subplots(figsize=(4.5, 2.5))
        ax.bar(x - 0.2, 100 * before, width=0.4, label="before")
        ax.bar(x + 0.2, 100 * after, width=0.4, label="after")
        ax.set_xticks(x)
        ax.set_xlabel("class")
        ax.set_ylabel("accuracy (%)")
        ax.legend(frameon=False)
        return _save(fig, path)


def sweep_figure(
    values: Sequence[float], means: Sequence[float], stds: Sequence[float], path: str | Path, xlabel: str = "$M_c$"
) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 2.5))
        ax.errorbar(np.arange(len(values)), 100 * np.asarray(means), yerr=100 * np.asarray(stds), marker="o", capsize=2)
        ax.set_xticks(np.arange(len(values)))
        ax.set_xticklabels([f"{v:g}" for v in values])
        ax.set_xlabel(xlabel)
        ax.set_ylabel("test accuracy (%)")
        return _save(fig, path)
