"""Matplotlib renderings saved alongside the delimited outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_learning_curve(rows, path) -> None:
    """Reward curves per epoch from (epoch, r_id, r_all, clip, ratio) rows."""
    epochs = [r[0] for r in rows]
    r_id = [r[1] for r in rows]
    r_all = [r[2] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, r_id, label="identifier prompts", marker="o", ms=3)
    ax.plot(epochs, r_all, label="all prompts", marker="s", ms=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean reward")
    ax.set_ylim(0.0, 1.0)
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_loss_curve(rows, path) -> None:
    """Loss curves from (step, loss) or (step, loss_subject, loss_prior) rows."""
    steps = [r[0] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    if len(rows[0]) == 2:
        ax.plot(steps, [r[1] for r in rows], label="loss", lw=0.8)
    else:
        ax.plot(steps, [r[1] for r in rows], label="subject loss", lw=0.8)
        ax.plot(steps, [r[2] for r in rows], label="prior loss", lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_report_chart(rows, path) -> None:
    """Grouped bars of mean metrics per checkpoint label.

    rows follow evaluate.ABLATION_COLUMNS.
    """
    labels = sorted({r[0] for r in rows})
    metrics = ("text_fidelity", "subject_fidelity", "mean_reward")
    means = {
        lab: [float(np.mean([r[4 + i] for r in rows if r[0] == lab])) for i in range(3)]
        for lab in labels
    }
    x = np.arange(len(metrics))
    width = 0.8 / max(len(labels), 1)
    fig, ax = plt.subplots(figsize=(6, 4))
    for j, lab in enumerate(labels):
        ax.bar(x + j * width, means[lab], width, label=lab)
    ax.set_xticks(x + width * (len(labels) - 1) / 2)
    ax.set_xticklabels(metrics)
    ax.legend(fontsize=8)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_image_grid(images, path, rewards=None, cols: int = 5) -> None:
    """Lossless raster of sampled images (values clipped to [-1, 1])."""
    n = len(images)
    cols = min(cols, n)
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(1.6 * cols, 1.8 * rows), squeeze=False)
    for i in range(rows * cols):
        ax = axes[i // cols][i % cols]
        ax.axis("off")
        if i < n:
            img = (np.clip(images[i], -1.0, 1.0) + 1.0) / 2.0
            ax.imshow(img, interpolation="nearest")
            if rewards is not None:
                ax.set_title(f"r={rewards[i]:.2f}", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
