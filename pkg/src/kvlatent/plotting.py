"""Figure rendering for the CLI report paths (decay curves, loss logs).

Uses the Agg backend and writes PNGs with pinned metadata so identical
inputs produce byte-identical files.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["plot_series", "plot_loss_log"]

_SAVE_KW = dict(dpi=120, metadata={"Software": "kvlatent"})


def plot_series(curves: list[tuple[str, np.ndarray, np.ndarray]], path: str,
                title: str = "positional similarity decay") -> None:
    """One line per (label, positions, values) triple."""
    fig, ax = plt.subplots(figsize=(7.5, 4.5))
    for label, pos, vals in curves:
        ax.plot(pos, vals, linewidth=0.9, label=label)
    ax.axhline(0.0, color="black", linewidth=0.6, alpha=0.5)
    ax.set_xlabel("token distance")
    ax.set_ylabel("normalized similarity")
    ax.set_title(title)
    if len(curves) > 1 or (curves and curves[0][0]):
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def plot_loss_log(log: list[tuple[int, float, float]], path: str,
                  title: str = "training loss") -> None:
    steps = [s for s, _, _ in log]
    losses = [l for _, l, _ in log]
    fig, ax = plt.subplots(figsize=(7.5, 4.5))
    ax.plot(steps, losses, linewidth=0.9)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
