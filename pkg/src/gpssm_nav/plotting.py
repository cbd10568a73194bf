"""Static figures for reports, rendered with the non-interactive Agg backend."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_STYLE = {"wifi-only": ("tab:orange", ":"), "pdr-only": ("tab:purple", "--"),
          "lgssm": ("tab:green", "-.")}


def _style(name):
    return _STYLE.get(name, ("tab:blue", "-"))


def plot_trajectories(path, estimates, truth, aps=None, bounds=None):
    """One panel per method: truth, estimate and the AP layout."""
    names = list(estimates)
    n = max(len(names), 1)
    cols = min(n, 3)
    rows = int(np.ceil(n / cols))
    fig, axes = plt.subplots(rows, cols, figsize=(4.2 * cols, 4.2 * rows), squeeze=False)
    truth = np.asarray(truth)
    for ax, name in zip(axes.ravel(), names):
        est = np.asarray(estimates[name])
        color, ls = _style(name)
        if aps:
            P = np.array([aps[k].position[:2] for k in sorted(aps)])
            ax.scatter(P[:, 0], P[:, 1], marker="^", s=18, c="0.5", label="APs")
        ax.plot(truth[:, 0], truth[:, 1], "k-", lw=1.5, label="truth")
        ax.plot(est[:, 0], est[:, 1], color=color, ls=ls, lw=1.2, label=name)
        ax.plot(*truth[0], "ko", ms=4)
        if bounds is not None:
            ax.set_xlim(bounds[0], bounds[1])
            ax.set_ylim(bounds[2], bounds[3])
        ax.set_aspect("equal")
        ax.set_title(name)
        ax.set_xlabel("east (m)")
        ax.set_ylabel("north (m)")
        ax.legend(fontsize=7, loc="upper right")
    for ax in axes.ravel()[len(names):]:
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_mae(path, mae):
    names = list(mae)
    fig, ax = plt.subplots(figsize=(1.2 * len(names) + 2, 3.4))
    ax.bar(names, [mae[k] for k in names], color=[_style(k)[0] for k in names])
    for i, k in enumerate(names):
        ax.text(i, mae[k], f"{mae[k]:.2f}", ha="center", va="bottom", fontsize=8)
    ax.set_ylabel("MAE (m)")
    ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_traces(path, traces):
    """Training curves: EM log-likelihood and GPSSM surrogate per round."""
    fig, ax = plt.subplots(figsize=(5.5, 3.4))
    for name, tr in traces.items():
        if len(tr):
            ax.plot(np.arange(len(tr)), tr, label=name)
    ax.set_xlabel("iteration")
    ax.set_ylabel("objective")
    ax.set_yscale("symlog")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
