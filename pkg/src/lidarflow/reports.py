"""Figure rendering for the report paths of the CLI."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .training import TrainLog


def save_pr_figure(path, curves: dict) -> None:
    """Precision-recall curves, one line per labeled method."""
    fig, ax = plt.subplots(figsize=(5, 4))
    for label, curve in curves.items():
        recalls = [r for _, _, r in curve.points]
        precisions = [p for _, p, _ in curve.points]
        ax.plot(recalls, precisions, label=label)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_training_figure(path, log: TrainLog) -> None:
    """Loss, learning rate, and blur size over epochs."""
    epochs = [r.epoch for r in log.rows]
    fig, (ax_loss, ax_sched) = plt.subplots(2, 1, figsize=(6, 5), sharex=True)
    ax_loss.plot(epochs, [r.loss for r in log.rows], color="tab:blue")
    ax_loss.set_ylabel("loss")
    ax_loss.set_yscale("log")
    ax_loss.grid(alpha=0.3)
    if log.evals:
        ax_f1 = ax_loss.twinx()
        ax_f1.plot(*zip(*log.evals), color="tab:green", marker="o", linestyle="--")
        ax_f1.set_ylabel("val F1", color="tab:green")
    ax_sched.plot(epochs, [r.lr for r in log.rows], color="tab:orange", label="lr")
    ax_sched.set_ylabel("lr", color="tab:orange")
    ax_sched.set_yscale("log")
    ax_f = ax_sched.twinx()
    ax_f.step(epochs, [r.filter_size for r in log.rows], color="tab:red", where="post", label="f")
    ax_f.set_ylabel("blur size f", color="tab:red")
    ax_sched.set_xlabel("epoch")
    ax_sched.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
