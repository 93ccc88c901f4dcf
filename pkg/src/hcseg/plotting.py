"""Matplotlib figures and CSV tables that accompany the JSON reports."""
from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def level_panel(image, boundary_overlays, leak_overlays, prediction, levels, path, ue=None):
    """Two rows per figure: cluster boundaries on top, leakage below, one column per level.

    The prediction occupies an extra column on the right of the top row.
    """
    n = len(levels)
    fig, axes = plt.subplots(2, n + 1, figsize=(2.4 * (n + 1), 5.0), squeeze=False)
    for j, lv in enumerate(levels):
        axes[0, j].imshow(boundary_overlays[j], interpolation="nearest")
        axes[0, j].set_title(f"level {lv} clusters", fontsize=9)
        axes[1, j].imshow(leak_overlays[j], interpolation="nearest")
        title = f"level {lv} leakage"
        if ue is not None:
            title += f"\nUE={ue[j]:.3f}"
        axes[1, j].set_title(title, fontsize=9)
    axes[0, n].imshow(prediction, interpolation="nearest")
    axes[0, n].set_title("prediction", fontsize=9)
    axes[1, n].imshow(image, interpolation="nearest")
    axes[1, n].set_title("input", fontsize=9)
    for ax in axes.ravel():
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def training_curves(history, path):
    """Total loss and each logged component against the step index."""
    steps = [r["step"] for r in history]
    keys = [k for k in ("loss", "pixel_ce", "ce", "dice", "cls", "reg") if history and k in history[0]]
    fig, ax = plt.subplots(figsize=(6, 4))
    for k in keys:
        ax.plot(steps, [r[k] for r in history], label=k, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def write_csv(rows, path):
    """List of flat dicts -> CSV with the union of keys as header (first-seen order)."""
    header = []
    for r in rows:
        for k in r:
            if k not in header:
                header.append(k)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=header)
        w.writeheader()
        for r in rows:
            w.writerow(r)
