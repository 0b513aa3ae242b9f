"""Figures for the report stage. PNG output carries no timestamps or version
strings, so reruns produce identical files."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path, tag=None):
    meta = {"Software": None}
    if tag:
        meta["Description"] = f"config_hash={tag}"
    fig.savefig(path, dpi=100, metadata=meta)
    plt.close(fig)


def plot_profiles(thresholds, curves: dict, path, xlabel="normalised score", tag=None):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name in sorted(curves):
        ax.step(thresholds, curves[name], where="post", label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("fraction of runs above")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(frameon=False)
    fig.tight_layout()
    _save(fig, path, tag)


def plot_intervals(rows, path, label="IQM", tag=None):
    """Horizontal interval plot; each row needs name, point, lo, hi."""
    fig, ax = plt.subplots(figsize=(5, 0.5 + 0.45 * len(rows)))
    y = np.arange(len(rows))
    pts = np.array([r["point"] for r in rows])
    lo = np.array([r["lo"] for r in rows])
    hi = np.array([r["hi"] for r in rows])
    ax.errorbar(pts, y, xerr=[pts - lo, hi - pts], fmt="o", capsize=3)
    ax.set_yticks(y)
    ax.set_yticklabels([r["name"] for r in rows])
    ax.set_xlabel(label)
    fig.tight_layout()
    _save(fig, path, tag)


def plot_rank_errors(names, errors, path, tag=None):
    fig, ax = plt.subplots(figsize=(5, 3))
    vals = [np.nan if e is None else e for e in errors]
    ax.bar(np.arange(len(names)), vals)
    ax.set_xticks(np.arange(len(names)))
    ax.set_xticklabels(names, rotation=45, ha="right", fontsize=7)
    ax.set_ylabel("RankError")
    fig.tight_layout()
    _save(fig, path, tag)
