"""Static figures written next to the CSV/JSON outputs of the CLI reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# Fixed metadata keeps PNG bytes identical across reruns.
_PNG_META = {"Software": None}

STYLE = {
    "figure.figsize": (6.0, 4.0),
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "lines.linewidth": 1.4,
    "axes.grid": True,
    "grid.alpha": 0.3,
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)


def plot_scaling(study, path, title: str = ""):
    """Log-log estimates with one-SE bars and the fitted slope per metric."""
    from .nash import METRICS, metric_size

    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for metric in METRICS:
            sizes = np.array([metric_size(metric, nl, nf) for nl, nf in study.populations], float)
            est = np.array([e for e, _ in study.estimates[metric]])
            se = np.array([s for _, s in study.estimates[metric]])
            if np.any(est <= 0):
                continue
            slope, slope_se = study.slopes[metric]
            ax.errorbar(sizes, est, yerr=se, marker="o", capsize=2,
                        label=f"{metric}  slope {slope:.2f} ± {slope_se:.2f}")
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel("population size N")
        ax.set_ylabel("estimate")
        if title:
            ax.set_title(title)
        ax.legend(loc="best")
        _save(fig, path)


def plot_matrix_paths(paths: dict, path, entries=None, title: str = ""):
    """Selected entries of matrix-valued time paths, one panel per path."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(paths), squeeze=False, figsize=(4.0 * len(paths), 3.4))
        for ax, (name, mp) in zip(axes[0], paths.items()):
            t = mp.grid.points
            vals = mp.values
            idx = entries or [(i, i) for i in range(vals.shape[1])]
            for i, j in idx:
                ax.plot(t, vals[:, i, j], label=f"{name}[{i},{j}]")
            ax.set_xlabel("t")
            ax.set_title(name)
            ax.legend(loc="best")
        if title:
            fig.suptitle(title)
        _save(fig, path)


def plot_mean_field(mf, path):
    """Mean trajectories of the four stacked state blocks."""
    labels = ("E[X0]", "mX", "mx", "E[K]")
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        t = mf.grid.points
        for j, label in enumerate(labels):
            block = mf.block(j).values
            for c in range(block.shape[1]):
                suffix = f"[{c}]" if block.shape[1] > 1 else ""
                ax.plot(t, block[:, c], label=label + suffix)
        ax.set_xlabel("t")
        ax.legend(loc="best")
        _save(fig, path)
