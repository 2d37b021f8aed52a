"""Figures written next to the delimited run outputs."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .training import History


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_history(history: History, path: str | Path) -> Path:
    """Train loss and validation MSE per epoch, best epoch marked."""
    plt = _pyplot()
    epochs = [r.epoch for r in history.epochs]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [r.train_loss for r in history.epochs], marker="o", label="train loss")
    ax.plot(epochs, [r.val_mse for r in history.epochs], marker="s", label="val MSE")
    if history.best_epoch:
        ax.axvline(history.best_epoch, color="grey", linestyle=":", label=f"best epoch {history.best_epoch}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("MSE (normalized)")
    ax.set_yscale("log")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_horizon_error(pred: np.ndarray, truth: np.ndarray, names, path: str | Path) -> Path:
    """MSE per forecast step, one line per variable."""
    plt = _pyplot()
    err = ((pred - truth) ** 2).mean(axis=0)  # M, N
    steps = np.arange(1, err.shape[0] + 1)
    fig, ax = plt.subplots(figsize=(6, 4))
    for n, name in enumerate(names):
        ax.plot(steps, err[:, n], label=str(name))
    ax.plot(steps, err.mean(axis=1), color="black", linewidth=2, label="all")
    ax.set_xlabel("forecast step")
    ax.set_ylabel("MSE")
    ax.legend(frameon=False, fontsize="small", ncol=2)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
