"""Figure rendering for CLI runs.

Every CLI report path drops PNG figures next to its CSV outputs: training
curves beside history.csv, error maps beside metrics.csv, sweep curves beside
sweep.csv. Figures are a convenience view; the CSVs are the machine-readable
interface.
"""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "save_training_curves",
    "save_field_maps",
    "save_sweep",
    "save_invariance",
]

_DPI = 140


def save_training_curves(history: list[dict], path: str) -> None:
    epochs = [r["epoch"] for r in history]
    loss = [r["train_loss"] for r in history]
    lr = [r["lr"] for r in history]
    ev = [(r["epoch"], r["eval_nrmse"]) for r in history if not math.isnan(r["eval_nrmse"])]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.4))
    ax = axes[0]
    ax.semilogy(epochs, loss, lw=1.2, label="train loss")
    if ev:
        ax.semilogy([e for e, _ in ev], [v for _, v in ev], lw=1.2, label="eval nRMSE")
    ax.set_xlabel("epoch")
    ax.legend(frameon=False, fontsize=8)
    ax.set_title("optimization", fontsize=10)
    axes[1].plot(epochs, lr, lw=1.2, color="tab:orange")
    axes[1].set_xlabel("epoch")
    axes[1].set_title("learning rate", fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def save_field_maps(pred: np.ndarray, target: np.ndarray, path: str, title: str = "") -> None:
    """Prediction / target / |error| heatmaps for one 2-D field."""
    err = np.abs(pred - target)
    fig, axes = plt.subplots(1, 3, figsize=(10.5, 3.2))
    lo = min(float(pred.min()), float(target.min()))
    hi = max(float(pred.max()), float(target.max()))
    for ax, (img, name, kw) in zip(
        axes,
        [
            (pred, "prediction", dict(vmin=lo, vmax=hi)),
            (target, "target", dict(vmin=lo, vmax=hi)),
            (err, "abs error", {}),
        ],
    ):
        im = ax.imshow(img, origin="lower", **kw)
        ax.set_title(name, fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
        fig.colorbar(im, ax=ax, fraction=0.046)
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def save_sweep(values, nrmses, xlabel: str, path: str, numeric_x: bool = True) -> None:
    fig, ax = plt.subplots(figsize=(4.6, 3.2))
    if numeric_x:
        ax.plot(values, nrmses, "o-", lw=1.2)
    else:
        ax.bar(range(len(values)), nrmses, width=0.6)
        ax.set_xticks(range(len(values)), [str(v) for v in values])
    ax.set_xlabel(xlabel)
    ax.set_ylabel("test nRMSE")
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def save_invariance(resolutions, rk, nrmses, path: str) -> None:
    fig, ax = plt.subplots(figsize=(4.6, 3.2))
    ax.plot(resolutions, rk, "s-", lw=1.2, label="max rel error")
    ax.plot(resolutions, nrmses, "o--", lw=1.2, label="mean nRMSE")
    ax.set_xlabel("grid resolution")
    ax.set_ylabel("relative error")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
