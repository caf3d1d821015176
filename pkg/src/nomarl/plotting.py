"""Figures written next to the CSV/JSON reports."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_MPL_NEW = tuple(int(p) for p in matplotlib.__version__.split(".")[:2]) >= (3, 10)

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "figure.dpi": 120,
}


def _save(fig, path, meta=None):
    fig.tight_layout()
    fig.savefig(path, metadata={"Description": meta} if meta else None)
    plt.close(fig)


def plot_training(history, path, meta=None):
    """Evaluation reward and episode runtime t_stop against training episode."""
    with plt.rc_context(RC):
        fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(5.5, 4.5), sharex=True)
        ep = [r.episode for r in history]
        evals = [(r.episode, r.eval_reward) for r in history if r.eval_reward is not None]
        ax1.plot(ep, [r.train_reward for r in history], color="0.7", lw=0.8, label="train")
        if evals:
            e, v = zip(*evals)
            ax1.plot(e, v, "o-", ms=3, color="C0", label="eval (mean)")
        ax1.set_ylabel("reward")
        ax1.legend(loc="lower right")
        ax2.plot(ep, [r.t_stop for r in history], ".", ms=3, color="C1")
        ax2.set_xlabel("training episode")
        ax2.set_ylabel("$t_{stop}$")
        _save(fig, path, meta)


def plot_boxplot(results, path, meta=None):
    """Horizontal box plot of per-realization test rewards; triangles mark means."""
    names = list(results)
    data = [np.asarray(results[n], dtype=float) for n in names]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5.5, 0.6 + 0.5 * len(names)))
        orient = {"orientation": "horizontal"} if _MPL_NEW else {"vert": False}
        ax.boxplot(data, showmeans=True, **orient,
                   meanprops={"marker": "^", "markerfacecolor": "green", "markeredgecolor": "green"},
                   flierprops={"marker": "o", "markerfacecolor": "none"})
        ax.set_yticks(range(1, len(names) + 1), names)
        ax.set_xlabel("test reward")
        _save(fig, path, meta)


def plot_trace(rows, path, meta=None):
    t = np.array([r["t"] for r in rows])
    reward = np.array([r["reward"] for r in rows])
    buffered = np.array([r["buffered_bits"] for r in rows])
    with plt.rc_context(RC):
        fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(5.5, 4.5), sharex=True)
        ax1.plot(t, np.cumsum(reward), color="C3")
        ax1.set_ylabel("cumulative reward")
        for k in range(buffered.shape[1]):
            ax2.plot(t, buffered[:, k], lw=0.7)
        ax2.set_xlabel("time step")
        ax2.set_ylabel("buffered bits per UE")
        _save(fig, path, meta)
