"""Figure rendering for the CLI report paths (matplotlib, Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from scipy.stats import gaussian_kde

from .experiments import ScaleResult
from .metrics import FeatureStats


def save_loss_curve(path: str | Path, losses: list[float], title: str = "training loss") -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(losses, lw=0.8)
    if len(losses) > 20:
        k = max(len(losses) // 50, 5)
        smooth = np.convolve(losses, np.ones(k) / k, mode="valid")
        ax.plot(np.arange(len(smooth)) + k - 1, smooth, lw=1.6)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_feature_distributions(
    path: str | Path, groups: dict[str, list[FeatureStats]]
) -> None:
    """Kernel-density plots of the four low-level features per image group."""
    names = ["brightness", "contrast", "sharpness", "si"]
    fig, axes = plt.subplots(1, 4, figsize=(14, 3))
    for ax, name in zip(axes, names):
        for label, stats in groups.items():
            vals = np.array([getattr(s, name) for s in stats], dtype=float)
            if len(vals) > 2 and vals.std() > 1e-12:
                xs = np.linspace(vals.min(), vals.max(), 200)
                ax.plot(xs, gaussian_kde(vals)(xs), label=label)
            else:
                ax.axvline(vals.mean(), ls="--", label=label)
        ax.set_title(name)
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_augmentation_curve(path: str | Path, results: list[ScaleResult]) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    arms = sorted({r.arm for r in results})
    for arm in arms:
        rows = sorted((r for r in results if r.arm == arm), key=lambda r: r.scale)
        ax.plot([r.scale for r in rows], [r.acc1 for r in rows], marker="o", label=f"{arm} acc@1")
    ax.set_xlabel("augmentation scale")
    ax.set_ylabel("accuracy")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_sample_grid(path: str | Path, rows: list[list[np.ndarray]], row_labels: list[str]) -> None:
    n_rows = len(rows)
    n_cols = max(len(r) for r in rows)
    fig, axes = plt.subplots(n_rows, n_cols, figsize=(1.4 * n_cols, 1.5 * n_rows), squeeze=False)
    for i, (row, label) in enumerate(zip(rows, row_labels)):
        for j in range(n_cols):
            ax = axes[i][j]
            ax.axis("off")
            if j < len(row):
                ax.imshow(row[j], cmap="gray", vmin=0, vmax=1)
            if j == 0:
                ax.set_title(label, fontsize=8, loc="left")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
