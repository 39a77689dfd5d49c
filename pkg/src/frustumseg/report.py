"""Figure rendering for the CLI report paths.

Every plot lands next to its CSV so runs can be inspected without
re-running anything: training emits loss curves, evaluation emits a
per-class IoU bar chart and a confusion-matrix heatmap, and the overlap
report emits a paired bar chart.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_loss_curves(rows, path: str) -> None:
    """rows: (iter, dice, ce_main, ce_aux, total, lr) tuples."""
    arr = np.asarray([r[:6] for r in rows], dtype=np.float64)
    fig, (ax, ax_lr) = plt.subplots(
        2, 1, figsize=(7, 6), sharex=True, gridspec_kw={"height_ratios": [3, 1]}
    )
    it = arr[:, 0]
    for col, name in ((1, "dice"), (2, "ce_main"), (3, "ce_aux"), (4, "total")):
        ax.plot(it, arr[:, col], label=name, linewidth=1.0)
    ax.set_ylabel("loss")
    ax.legend(loc="upper right", fontsize=8)
    ax.grid(alpha=0.3)
    ax_lr.plot(it, arr[:, 5], color="tab:gray", linewidth=1.0)
    ax_lr.set_ylabel("lr")
    ax_lr.set_xlabel("iteration")
    ax_lr.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_iou_bars(iou_by_class: dict[str, float], path: str) -> None:
    names = list(iou_by_class)
    values = [iou_by_class[n] for n in names]
    fig, ax = plt.subplots(figsize=(1.0 + 0.9 * len(names), 4))
    ax.bar(range(len(names)), values, color="tab:blue")
    ax.set_xticks(range(len(names)), names, rotation=30, ha="right")
    ax.set_ylim(0, 1)
    ax.set_ylabel("IoU")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_confusion_heatmap(counts: np.ndarray, path: str, class_names=None) -> None:
    c = counts.shape[0]
    names = class_names or [str(i) for i in range(c)]
    row_sums = counts.sum(axis=1, keepdims=True)
    frac = np.divide(counts, np.maximum(row_sums, 1), dtype=np.float64)
    fig, ax = plt.subplots(figsize=(1.5 + 0.7 * c, 1.2 + 0.7 * c))
    im = ax.imshow(frac, cmap="viridis", vmin=0, vmax=1)
    ax.set_xticks(range(c), names, rotation=30, ha="right")
    ax.set_yticks(range(c), names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("truth")
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_overlap_bars(miou_no_overlap: float, miou_overlap: float, path: str) -> None:
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.bar([0, 1], [miou_no_overlap, miou_overlap], color=["tab:gray", "tab:blue"])
    ax.set_xticks([0, 1], ["w/o overlap", "w/ overlap"])
    ax.set_ylabel("mIoU")
    ax.set_ylim(0, 1)
    delta = miou_overlap - miou_no_overlap
    ax.set_title(f"overlap gain = {delta:+.4f}")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
