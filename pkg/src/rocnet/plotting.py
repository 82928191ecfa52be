"""Figures written next to the CSV reports."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def figure_size(scale=1.0):
    golden = (math.sqrt(5.0) - 1.0) / 2.0
    width = 6.0 * scale
    return width, width * golden


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_loss_curve(history, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figure_size())
        it = np.arange(1, len(history) + 1)
        ax.semilogy(it, [r.total for r in history], label="total")
        ax.semilogy(it, [max(r.label_loss, 1e-12) for r in history], label="label", lw=0.8)
        ax.semilogy(it, [max(r.recon_loss, 1e-12) for r in history], label="reconstruction", lw=0.8)
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss per tree")
        evals = [(i + 1, r.mean_train_iou) for i, r in enumerate(history) if r.mean_train_iou is not None]
        if evals:
            ax2 = ax.twinx()
            ax2.plot(*zip(*evals), "k.--", lw=0.8, label="train IoU")
            ax2.set_ylabel("mean train IoU")
            ax2.set_ylim(0, 1)
        ax.legend(loc="upper right")
        _save(fig, path)


def plot_eval(report, path):
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=figure_size(1.2))
        axes[0].hist(report.iou, bins=20, range=(0, 1), color="0.4")
        axes[0].set_xlabel("IoU")
        axes[0].set_ylabel("samples")
        axes[0].set_title(f"{report.mode} mode, mean {report.mean_iou:.3f}")
        cd = [c * 1e3 for c in report.chamfer if not math.isnan(c)]
        axes[1].hist(cd, bins=20, color="0.4")
        axes[1].set_xlabel("Chamfer distance x1e3")
        _save(fig, path)


def plot_param_growth(report, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figure_size())
        levels = [r.levels for r in report.rows]
        ax.plot(levels, [r.encoder_params / 1e6 for r in report.rows], "o", label="encoder")
        xs = np.array([min(levels), max(levels)])
        ax.plot(xs, (report.slope * xs + report.intercept) / 1e6, "-", lw=0.8, label="affine fit")
        ax.set_xticks(levels)
        ax.set_xticklabels([r.name for r in report.rows], rotation=30, ha="right")
        ax.set_ylabel("trainable parameters (M)")
        ax.legend()
        _save(fig, path)


def plot_voxels(grid, path, title=""):
    with plt.rc_context(STYLE):
        fig = plt.figure(figsize=(4, 4))
        ax = fig.add_subplot(projection="3d")
        ax.voxels(grid.occupancy, facecolors="0.7", edgecolor="0.3", linewidth=0.1)
        ax.set_axis_off()
        if title:
            ax.set_title(title)
        _save(fig, path)
