"""Figure rendering for the CLI report path.

Each function renders one PNG next to the delimited output it illustrates
and returns the written path.  Uses the Agg backend; nothing here opens a
window.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .phase_core import MotionField


def plot_time_histories(histories, path, truth=None, frame_rate=None) -> Path:
    """u and v trajectories per tracked pixel, optional truth overlay.

    ``truth`` is an (n, 2) array of uniform (dx, dy) per frame, plotted
    dashed behind the extracted curves.
    """
    path = Path(path)
    fig, axes = plt.subplots(2, 1, figsize=(8, 5), sharex=True)
    for hist in histories:
        frames = hist.samples[:, 0]
        t = frames / frame_rate if frame_rate else frames
        label = f"pixel {hist.pixel}"
        axes[0].plot(t, hist.samples[:, 1], lw=0.9, label=label)
        axes[1].plot(t, hist.samples[:, 2], lw=0.9, label=label)
    if truth is not None:
        truth = np.asarray(truth)
        frames = np.arange(len(truth))
        t = frames / frame_rate if frame_rate else frames
        axes[0].plot(t, truth[:, 0], "k--", lw=1.2, label="truth")
        axes[1].plot(t, truth[:, 1], "k--", lw=1.2, label="truth")
    axes[0].set_ylabel("u [px]")
    axes[1].set_ylabel("v [px]")
    axes[1].set_xlabel("time [s]" if frame_rate else "frame")
    axes[0].legend(fontsize=7, ncol=3, loc="upper right")
    for ax in axes:
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def plot_motion_field(field: MotionField, path, title="") -> Path:
    """Heatmaps of u and v with their masks alongside."""
    path = Path(path)
    fig, axes = plt.subplots(2, 2, figsize=(7, 6))
    vmax = max(np.abs(field.u).max(), np.abs(field.v).max(), 1e-6)
    for row, (grid, mask, name) in enumerate(
        [(field.u, field.mask_u.mask, "u"), (field.v, field.mask_v.mask, "v")]
    ):
        im = axes[row, 0].imshow(grid, cmap="RdBu_r", vmin=-vmax, vmax=vmax)
        axes[row, 0].set_title(f"{name} [px]", fontsize=9)
        fig.colorbar(im, ax=axes[row, 0], shrink=0.8)
        axes[row, 1].imshow(mask, cmap="gray", vmin=0, vmax=1)
        axes[row, 1].set_title(f"mask {name} ({int(mask.sum())} px)", fontsize=9)
    for ax in axes.flat:
        ax.set_xticks([])
        ax.set_yticks([])
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def plot_threshold_sweep(sweeps, path) -> Path:
    """MAE and pixel count vs threshold coefficient, one curve per direction."""
    path = Path(path)
    fig, ax_mae = plt.subplots(figsize=(6, 4))
    ax_count = ax_mae.twinx()
    for sweep in sweeps:
        c = np.asarray(sweep.coefficients)
        ax_mae.plot(c, sweep.mae_per_c, "o-", label=f"MAE {sweep.direction}")
        ax_count.plot(
            c, sweep.pixel_counts, "s--", alpha=0.5, label=f"pixels {sweep.direction}"
        )
    ax_mae.set_xlabel("threshold coefficient C")
    ax_mae.set_ylabel("MAE [px]")
    ax_count.set_ylabel("masked pixel count")
    ax_mae.grid(alpha=0.3)
    lines1, labels1 = ax_mae.get_legend_handles_labels()
    lines2, labels2 = ax_count.get_legend_handles_labels()
    ax_mae.legend(lines1 + lines2, labels1 + labels2, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def plot_training_curves(log: dict, path) -> Path:
    """Train/validation loss terms over epochs from a parsed training log."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = log["epoch"]
    ax.plot(epochs, log["train_total"], label="train total")
    ax.plot(epochs, log["val_total"], label="val total")
    ax.plot(epochs, log["train_full"], ":", alpha=0.7, label="train full")
    ax.plot(epochs, log["val_full"], ":", alpha=0.7, label="val full")
    ax.set_xlabel("epoch")
    ax.set_ylabel("EPE loss [px]")
    ax.set_yscale("log")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path
