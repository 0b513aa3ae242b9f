"""Aggregate score statistics: normalised scores, IQM, stratified bootstrap
intervals and performance profiles. Plot data only; rendering lives in
``plotting``."""

from __future__ import annotations

import csv
import io
import math
import warnings

import numpy as np
from scipy import stats as sps

BLOCK = 1000  # replicates per seeded block; fixes the stream regardless of worker count


class BootstrapWarning(UserWarning):
    pass


def normalized_score(j, j_random, j_expert):
    if j_expert == j_random:
        raise ValueError("expert and random returns coincide; score is undefined")
    return 100.0 * (j - j_random) / (j_expert - j_random)


def _iqm_weights(n):
    lo, hi = n / 4.0, 3.0 * n / 4.0
    edges = np.arange(n + 1, dtype=float)
    return np.clip(np.minimum(edges[1:], hi) - np.maximum(edges[:-1], lo), 0.0, None)


def iqm(samples) -> float:
    """Mean of the middle half, with boundary samples weighted fractionally."""
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    if x.size == 0:
        raise ValueError("iqm of an empty sample")
    w = _iqm_weights(x.size)
    return float(w @ x / w.sum())


def iqm_rows(x):
    """Row-wise IQM of a 2-D array."""
    x = np.sort(x, axis=-1)
    w = _iqm_weights(x.shape[-1])
    return x @ w / w.sum()


def aggregate_iqm(data) -> float:
    """Trim within each task, then average the per-task IQMs."""
    tasks = [np.asarray(t, dtype=float) for t in data]
    if not tasks or any(t.size == 0 for t in tasks):
        raise ValueError("every task needs at least one score")
    return float(np.mean([iqm(t) for t in tasks]))


def _block(tasks, size, seed_seq):
    rng = np.random.default_rng(seed_seq)
    total = np.zeros(size)
    for t in tasks:
        idx = rng.integers(0, t.size, size=(size, t.size))
        total += iqm_rows(t[idx])
    return total / len(tasks)


def bootstrap_replicates(data, n_boot, seed, workers=1) -> np.ndarray:
    """Aggregate IQM of ``n_boot`` stratified resamples (per-task, with replacement)."""
    tasks = [np.asarray(t, dtype=float).ravel() for t in data]
    if not tasks or any(t.size == 0 for t in tasks):
        raise ValueError("every task needs at least one score")
    n_blocks = math.ceil(n_boot / BLOCK)
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    seeds = root.spawn(n_blocks)
    sizes = [min(BLOCK, n_boot - i * BLOCK) for i in range(n_blocks)]
    if workers > 1 and n_blocks > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_block, [tasks] * n_blocks, sizes, seeds))
    else:
        parts = [_block(tasks, n, s) for n, s in zip(sizes, seeds)]
    return np.concatenate(parts)


def stratified_bootstrap_iqm_ci(data, n_boot=2000, level=0.95, seed=0, workers=1):
    """(point, lo, hi): aggregate IQM with a percentile bootstrap interval."""
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    if n_boot < 100:
        warnings.warn(f"n_boot={n_boot} is too few replicates for stable percentile endpoints",
                      BootstrapWarning, stacklevel=2)
    if n_boot < 1:
        raise ValueError("n_boot must be positive")
    point = aggregate_iqm(data)
    reps = bootstrap_replicates(data, n_boot, seed, workers)
    tail = 100.0 * (1.0 - level) / 2.0
    lo, hi = np.percentile(reps, [tail, 100.0 - tail])
    return point, float(lo), float(hi)


def performance_profile(scores, thresholds) -> np.ndarray:
    """Fraction of scores strictly above each threshold."""
    s = np.sort(np.asarray(scores, dtype=float).ravel())
    tau = np.asarray(thresholds, dtype=float)
    if s.size == 0:
        return np.zeros(tau.shape)
    return 1.0 - np.searchsorted(s, tau, side="right") / s.size


def mean_normal_ci(values, level=0.95):
    """(mean, lo, hi) under the normal approximation of the sample mean."""
    x = np.asarray(values, dtype=float)
    if x.size == 0:
        raise ValueError("no values")
    m = float(x.mean())
    if x.size == 1:
        return m, m, m
    half = sps.norm.ppf(0.5 + level / 2.0) * x.std(ddof=1) / math.sqrt(x.size)
    return m, m - half, m + half


def profile_csv(thresholds, curves: dict) -> str:
    """One row per threshold, one column per named curve."""
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    names = sorted(curves)
    w.writerow(["threshold"] + names)
    for i, t in enumerate(thresholds):
        w.writerow([repr(float(t))] + [repr(float(curves[n][i])) for n in names])
    return out.getvalue()


def summary_csv(rows) -> str:
    """``rows`` are dicts sharing the same keys."""
    rows = list(rows)
    out = io.StringIO()
    if not rows:
        return ""
    keys = list(rows[0])
    w = csv.DictWriter(out, fieldnames=keys, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return out.getvalue()
