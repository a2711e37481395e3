"""Training-curve figures rendered from a metrics table.

The report path writes a PNG with three panels (loss, accuracy, learning
rate) next to the delimited metrics file, so a run directory is readable
both by scripts and at a glance.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def render_training_curves(rows, out_path):
    """Render loss/accuracy/lr panels from metrics rows.

    ``rows`` are dicts with keys epoch, split, loss, accuracy, lr (the
    metrics table rows). Returns the output path.
    """
    by_split = {}
    for row in rows:
        by_split.setdefault(row["split"], []).append(row)
    for series in by_split.values():
        series.sort(key=lambda r: r["epoch"])

    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
    for split, series in sorted(by_split.items()):
        epochs = [r["epoch"] for r in series]
        axes[0].plot(epochs, [r["loss"] for r in series], marker="o",
                     label=split)
        axes[1].plot(epochs, [r["accuracy"] for r in series], marker="o",
                     label=split)
    first = next(iter(sorted(by_split))) if by_split else None
    if first is not None:
        series = by_split[first]
        axes[2].step([r["epoch"] for r in series], [r["lr"] for r in series],
                     where="post")
    axes[0].set_title("loss")
    axes[1].set_title("accuracy")
    axes[1].set_ylim(0.0, 1.05)
    axes[2].set_title("learning rate")
    axes[2].set_yscale("log")
    for ax in axes:
        ax.set_xlabel("epoch")
        ax.grid(True, alpha=0.3)
    axes[0].legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return out_path
