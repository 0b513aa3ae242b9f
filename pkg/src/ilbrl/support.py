"""Soft support reward for continuous features.

A point earns 1 - sqrt(dist / d_max), where dist is the Euclidean distance to
its nearest expert point and d_max is the largest such distance in the
dataset. Expert points earn exactly 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree


@dataclass(frozen=True)
class FeatureDataset:
    points: np.ndarray
    expert_mask: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        mask = np.array(self.expert_mask, dtype=bool).reshape(-1)
        if pts.ndim != 2 or mask.size != pts.shape[0]:
            raise ValueError("need an (n, d) point array and one expert flag per point")
        pts.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "expert_mask", mask)

    @property
    def dim(self):
        return self.points.shape[1]

    @property
    def experts(self):
        return self.points[self.expert_mask]


def _pairwise_min(x, experts):
    # same arithmetic on every path so the fast one agrees bit for bit
    diff = x[:, None, :] - experts[None, :, :]
    return np.sqrt((diff * diff).sum(axis=2)).min(axis=1)


def nearest_expert_distances(points, experts, method="brute", chunk=2048):
    """Euclidean distance from every point to its nearest expert.

    ``method="kdtree"`` finds candidate neighbours with a KD-tree and then
    recomputes the distances to every expert inside a slightly widened ball
    with the brute-force formula, so both methods return identical floats.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    experts = np.atleast_2d(np.asarray(experts, dtype=float))
    if experts.shape[0] == 0:
        raise ValueError("no expert points")
    if method == "brute":
        return np.concatenate([_pairwise_min(points[i:i + chunk], experts)
                               for i in range(0, points.shape[0], chunk)]) if points.shape[0] else np.zeros(0)
    if method != "kdtree":
        raise ValueError(f"unknown method {method!r}")
    tree = cKDTree(experts)
    approx, _ = tree.query(points)
    out = np.empty(points.shape[0])
    for i, (p, r) in enumerate(zip(points, approx)):
        ball = tree.query_ball_point(p, r * (1 + 1e-9) + 1e-12)
        out[i] = _pairwise_min(p[None, :], experts[ball])[0]
    return out


def compute_dmax(d: FeatureDataset, method="brute") -> float:
    if not d.expert_mask.any():
        raise ValueError("dataset has no expert points")
    return float(nearest_expert_distances(d.points, d.experts, method).max())


def _reward_from_distance(dist, d_max):
    dist = np.asarray(dist, dtype=float)
    if d_max < 0:
        raise ValueError("d_max must be non-negative")
    if d_max == 0:
        return (dist == 0).astype(float)
    return np.clip(1.0 - np.sqrt(dist) / np.sqrt(d_max), 0.0, 1.0)


def soft_support_reward(x, experts, d_max) -> float:
    """Best normalised closeness of ``x`` to any expert point, clamped to [0, 1]."""
    experts = np.asarray(experts, dtype=float)
    if experts.size == 0:
        raise ValueError("no expert points")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    experts = experts.reshape(-1, x.size)
    dist = nearest_expert_distances(x[None, :], experts)[0]
    return float(_reward_from_distance(dist, d_max))


def label_dataset(d: FeatureDataset, method="brute") -> np.ndarray:
    """Soft support reward of every point, aligned with ``d.points``."""
    if not d.expert_mask.any():
        raise ValueError("dataset has no expert points")
    dist = nearest_expert_distances(d.points, d.experts, method)
    dist[d.expert_mask] = 0.0
    return _reward_from_distance(dist, float(dist.max()))


def random_feature_dataset(n, dim, expert_fraction, seed) -> FeatureDataset:
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(n, dim))
    mask = rng.random(n) < expert_fraction
    mask[rng.integers(n)] = True
    return FeatureDataset(pts, mask)


# -- file format: "# features dim=<d>" then "<flag>\t<x1>\t...\t<xd>" per point

def dumps_features(d: FeatureDataset) -> str:
    lines = [f"# features dim={d.dim}"]
    for flag, p in zip(d.expert_mask, d.points):
        lines.append("\t".join(["1" if flag else "0"] + [repr(float(v)) for v in p]))
    return "\n".join(lines) + "\n"


def loads_features(text: str) -> FeatureDataset:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("# features dim="):
        raise ValueError("missing '# features dim=<d>' header")
    dim = int(lines[0].split("=", 1)[1])
    flags, pts = [], []
    for ln in lines[1:]:
        parts = ln.split("\t")
        if len(parts) != dim + 1:
            raise ValueError(f"expected {dim} coordinates, got {len(parts) - 1}")
        flags.append(parts[0] == "1")
        pts.append([float(v) for v in parts[1:]])
    return FeatureDataset(np.array(pts, dtype=float).reshape(-1, dim), np.array(flags, dtype=bool))


def dumps_rewards(rewards) -> str:
    return "".join(f"{float(r)!r}\n" for r in rewards)
