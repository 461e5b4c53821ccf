"""Matplotlib figure rendering for the CLI report paths.

All figures go straight to PNG files via the Agg backend. The default
matplotlib "Software" metadata tag is stripped so identical runs produce
byte-identical images.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = ["save_loss_curve", "save_similarity_bars", "save_class_psnr_bars"]

_PNG_META = {"Software": None}

_TAXONOMY_COLORS = {
    "conv1x1": "#4878cf",
    "conv3x3": "#d65f5f",
    "layernorm": "#6acc65",
    "sca": "#b47cc7",
}


def _save(fig, path) -> None:
    fig.savefig(path, dpi=110, metadata=_PNG_META)
    plt.close(fig)


def save_loss_curve(history: dict, path, title: str = "training loss") -> None:
    """Per-epoch mean loss (log scale) with the learning-rate schedule overlaid."""
    losses = history["epoch_loss"]
    lrs = history.get("epoch_lr")
    fig, ax = plt.subplots(figsize=(6, 3.6))
    epochs = np.arange(len(losses))
    ax.semilogy(epochs, losses, marker="o", ms=3, lw=1.2, color="#d65f5f", label="loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    if lrs:
        ax2 = ax.twinx()
        ax2.semilogy(epochs, lrs, lw=1.0, ls="--", color="#4878cf", label="lr")
        ax2.set_ylabel("learning rate")
    fig.tight_layout()
    _save(fig, path)


def save_similarity_bars(report, path, metric: str = "mean_corr") -> None:
    """One bar per analyzed layer, colored by layer class.

    ``metric`` is "mean_corr" or "cka"; undefined entries are drawn at zero
    with a hatch. The 0.7 high-correlation line is shown for Pearson.
    """
    layers = report.layers
    values = [getattr(l, metric) for l in layers]
    colors = [_TAXONOMY_COLORS.get(l.taxonomy, "#888888") for l in layers]
    fig, ax = plt.subplots(figsize=(max(6.0, 0.22 * len(layers)), 3.8))
    xs = np.arange(len(layers))
    heights = [0.0 if v is None else v for v in values]
    bars = ax.bar(xs, heights, color=colors, width=0.85)
    for bar, v in zip(bars, values):
        if v is None:
            bar.set_hatch("//")
            bar.set_facecolor("none")
            bar.set_edgecolor("#888888")
    if metric == "mean_corr":
        ax.axhline(report.threshold, color="red", lw=1.0, ls=":", label=f"{report.threshold} threshold")
        ax.set_ylim(-1.05, 1.05)
        ax.set_ylabel("mean filter correlation R")
    else:
        ax.set_ylim(0.0, 1.05)
        ax.set_ylabel("CKA")
    ax.set_xticks(xs[:: max(1, len(xs) // 40)])
    ax.set_xticklabels([layers[i].name for i in xs[:: max(1, len(xs) // 40)]], rotation=90, fontsize=4)
    handles = [
        plt.Rectangle((0, 0), 1, 1, color=c, label=t) for t, c in _TAXONOMY_COLORS.items()
    ]
    ax.legend(handles=handles, fontsize=6, ncol=4, loc="lower right")
    fig.tight_layout()
    _save(fig, path)


def save_class_psnr_bars(per_class: dict, path, class_names=None) -> None:
    """Grouped degraded-vs-restored PSNR bars per degradation class.

    ``per_class`` maps class id -> (psnr_in, psnr_out).
    """
    classes = sorted(per_class)
    names = [class_names[c] if class_names else str(c) for c in classes]
    pin = [per_class[c][0] for c in classes]
    pout = [per_class[c][1] for c in classes]
    xs = np.arange(len(classes))
    fig, ax = plt.subplots(figsize=(6, 3.6))
    ax.bar(xs - 0.2, pin, width=0.4, color="#999999", label="degraded")
    ax.bar(xs + 0.2, pout, width=0.4, color="#4878cf", label="restored")
    ax.set_xticks(xs)
    ax.set_xticklabels(names, rotation=20, fontsize=7)
    ax.set_ylabel("PSNR (dB)")
    ax.grid(axis="y", alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path)
