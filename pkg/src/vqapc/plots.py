"""Matplotlib rendering for the report artifacts: loss curves, codebook
sweep summaries, and conditional-probability heatmaps. Figures are written
next to their CSV counterparts."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_loss_curve(loss_history, path, title="Training loss"):
    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = np.arange(1, len(loss_history) + 1)
    ax.plot(epochs, loss_history, marker="o", markersize=3, color="purple")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean normalized L1 loss")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_sweep_curves(sizes, losses, phone_errs, speaker_errs, path):
    """Loss / phone error / speaker error versus codebook size."""
    fig, ax1 = plt.subplots(figsize=(6.5, 4.5))
    ax1.plot(sizes, phone_errs, marker="o", color="red", label="phone error")
    ax1.plot(sizes, speaker_errs, marker="s", color="blue", label="speaker error")
    ax1.set_xscale("log", base=2)
    ax1.set_xlabel("codebook size")
    ax1.set_ylabel("probe error rate")
    ax2 = ax1.twinx()
    ax2.plot(sizes, losses, marker="^", color="purple", label="train loss")
    ax2.set_ylabel("final training loss")
    lines1, labels1 = ax1.get_legend_handles_labels()
    lines2, labels2 = ax2.get_legend_handles_labels()
    ax1.legend(lines1 + lines2, labels1 + labels2, loc="best")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_heatmap_image(display_matrix, saturation, path):
    """Render an already-clipped P(phone|code) matrix."""
    fig, ax = plt.subplots(figsize=(7, 4))
    im = ax.imshow(display_matrix, aspect="auto", cmap="viridis",
                   vmin=0.0, vmax=saturation, interpolation="nearest")
    ax.set_xlabel("code (co-cluster order)")
    ax.set_ylabel("phone (co-cluster order)")
    fig.colorbar(im, ax=ax, label="P(phone | code)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
