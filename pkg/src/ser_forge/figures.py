"""Matplotlib rendering for run reports and sweep tables.

Every function writes a PNG next to the delimited output it mirrors and
returns the path. Rendering is headless (Agg).
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

DPI = 150


def save_confusion_matrix_figure(counts, class_names, path):
    """Row-normalized heatmap with raw counts annotated."""
    counts = np.asarray(counts, dtype=np.int64)
    k = counts.shape[0]
    row_sums = counts.sum(axis=1, keepdims=True)
    rates = np.divide(counts, row_sums, out=np.zeros_like(counts, dtype=float),
                      where=row_sums > 0)

    fig, ax = plt.subplots(figsize=(5.0, 4.2))
    im = ax.imshow(rates, cmap="Blues", vmin=0.0, vmax=1.0)
    for i in range(k):
        for j in range(k):
            color = "white" if rates[i, j] > 0.5 else "black"
            ax.text(j, i, f"{counts[i, j]}\n{rates[i, j]:.2f}",
                    ha="center", va="center", fontsize=8, color=color)
    ax.set_xticks(range(k), class_names, rotation=45, ha="right")
    ax.set_yticks(range(k), class_names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    fig.colorbar(im, ax=ax, fraction=0.046, label="recall")
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def save_loss_curves_figure(curves, path):
    """Per-fold training loss over epochs; curves is {fold: [loss, ...]}."""
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    for fold in sorted(curves):
        losses = curves[fold]
        ax.plot(range(1, len(losses) + 1), losses, label=f"fold {fold}", linewidth=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def save_eca_weights_figure(layer, class_means, path):
    """Per-class mean attention score across channels for one layer."""
    fig, ax = plt.subplots(figsize=(6.0, 3.2))
    for name in sorted(class_means):
        scores = class_means[name]
        ax.plot(range(len(scores)), scores, label=name, linewidth=1.2)
    ax.set_xlabel("channel")
    ax.set_ylabel("mean attention score")
    ax.set_title(f"layer {layer}")
    ax.set_ylim(0.0, 1.0)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def save_sweep_figure(rows, path):
    """ACC against dataset version, one line per configuration label."""
    by_config = {}
    for row in rows:
        if row.get("acc") is None:
            continue
        by_config.setdefault(row["config"], []).append((row["version"], row["acc"]))

    fig, ax = plt.subplots(figsize=(6.0, 3.8))
    for config in sorted(by_config):
        points = sorted(by_config[config])
        ax.plot([v for v, _ in points], [a for _, a in points],
                marker="o", markersize=3, linewidth=1.2, label=config)
    ax.set_xlabel("dataset version")
    ax.set_ylabel("ACC")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path
