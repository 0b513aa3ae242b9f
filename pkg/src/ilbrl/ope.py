"""Fully offline hyperparameter tuning.

Tabular expected SARSA with two estimators and slowly tracking target tables
is tuned on policies of known value by RankError, then used to pick the
candidate hyperparameter whose policies look best from held-out initial states.
"""

from __future__ import annotations

import itertools
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from typing import Optional

import numpy as np

from .data import TransitionDataset, mix_sources
from .mdp import (DeterministicPolicy, StochasticPolicy, TabularMdp, ValueTable, average_reward,
                  policy_value_discounted)


@dataclass(frozen=True)
class OpeConfig:
    learning_rate: float = 0.05
    target_update: float = 0.1
    expert_data_fraction: Optional[float] = None
    passes: int = 50
    divergence_threshold: Optional[float] = None
    batch_size: int = 32
    lr_decay: float = 0.0
    convergence_tol: float = 1e-4

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 < self.target_update <= 1:
            raise ValueError("target_update must lie in (0, 1]")
        if self.expert_data_fraction is not None and not 0 <= self.expert_data_fraction <= 1:
            raise ValueError("expert_data_fraction must lie in [0, 1]")
        if self.passes < 1 or self.batch_size < 1:
            raise ValueError("passes and batch_size must be positive")
        if self.lr_decay < 0:
            raise ValueError("lr_decay must be non-negative")

    def to_dict(self):
        return asdict(self)


@dataclass
class OpeResult:
    value: ValueTable
    diverged: bool
    seed: int
    policy: DeterministicPolicy
    converged_pass: Optional[int] = None

    def initial_value(self, held_out: TransitionDataset) -> float:
        return initial_state_value(self.value.q, self.policy, held_out)

    def to_dict(self, held_out=None):
        out = {"diverged": self.diverged, "seed": self.seed, "converged_pass": self.converged_pass,
               "policy": [int(a) for a in self.policy.action_of]}
        if held_out is not None and not self.diverged:
            out["initial_value"] = self.initial_value(held_out)
        return out


def as_deterministic(policy) -> DeterministicPolicy:
    """Stochastic policies are evaluated through their most probable action."""
    if isinstance(policy, StochasticPolicy):
        return policy.argmax_policy()
    if isinstance(policy, DeterministicPolicy):
        return policy
    return DeterministicPolicy(policy)


def default_threshold(d: TransitionDataset, discount) -> float:
    scale = float(np.abs(d.reward).max()) if len(d) else 0.0
    return 10.0 * (scale if scale > 0 else 1.0) / (1.0 - discount)


def esarsa_evaluate(d: TransitionDataset, policy, cfg: OpeConfig, seed, discount) -> OpeResult:
    """Evaluate ``policy`` on ``d`` with double tabular expected SARSA.

    Each minibatch applies the gradient of the summed squared TD error, so a
    pair seen k times in a batch moves by lr * k times its mean TD error.
    Both estimators regress onto r + gamma * mean of the two target tables at
    (s', pi(s')); targets then track the estimators with rate tau.
    """
    policy = as_deterministic(policy)
    if cfg.expert_data_fraction is not None:
        d = mix_sources(d, cfg.expert_data_fraction)
    S, A = d.num_states, d.num_actions
    if policy.num_states != S:
        raise ValueError("policy and dataset disagree on the number of states")
    threshold = cfg.divergence_threshold or default_threshold(d, discount)
    rng = np.random.default_rng(seed)

    flat = d.state * A + d.action
    nxt = d.next_state * A + policy.action_of[d.next_state]
    cont = discount * (~d.terminal)
    r = d.reward
    n = len(d)
    q = np.zeros((2, S * A))
    tgt = np.zeros((2, S * A))
    tau = cfg.target_update
    bs = cfg.batch_size
    converged = None
    diverged = False
    prev = q.mean(axis=0)
    for p in range(cfg.passes):
        lr = cfg.learning_rate / (1.0 + cfg.lr_decay * p)
        perms = (rng.permutation(n), rng.permutation(n))
        for start in range(0, n, bs):
            for i in (0, 1):
                idx = perms[i][start:start + bs]
                y = r[idx] + cont[idx] * 0.5 * (tgt[0, nxt[idx]] + tgt[1, nxt[idx]])
                td = y - q[i, flat[idx]]
                q[i] += lr * np.bincount(flat[idx], weights=td, minlength=S * A)
            tgt += tau * (q - tgt)
            if not np.isfinite(q).all() or np.abs(q).max() > threshold:
                diverged = True
                break
        if diverged:
            break
        cur = q.mean(axis=0)
        if converged is None and np.abs(cur - prev).max() < cfg.convergence_tol:
            converged = p + 1
        prev = cur
    table = ValueTable(q.mean(axis=0).reshape(S, A), iterations=p + 1,
                       extra={"estimators": q.reshape(2, S, A).copy()})
    return OpeResult(table, diverged, int(seed), policy, converged)


def initial_state_value(q, policy, held_out: TransitionDataset) -> float:
    """Mean of Q(s, pi(s)) over the held-out initial states."""
    if not len(held_out):
        raise ValueError("held-out set is empty")
    q = q.q if isinstance(q, ValueTable) else np.asarray(q)
    s = held_out.state
    return float(q[s, as_deterministic(policy).action_of[s]].mean())


def certainty_equivalence_value(d: TransitionDataset, policy, discount) -> np.ndarray:
    """Q of ``policy`` under the empirical model of ``d``; unseen pairs are pinned at 0."""
    policy = as_deterministic(policy)
    S, A = d.num_states, d.num_actions
    n = S * A
    flat = d.state * A + d.action
    counts = np.bincount(flat, minlength=n).astype(float)
    seen = counts > 0
    R = np.bincount(flat, weights=d.reward, minlength=n)
    M = np.zeros((n, n))
    nxt = d.next_state * A + policy.action_of[d.next_state]
    np.add.at(M, (flat, nxt), (~d.terminal).astype(float))
    R[seen] /= counts[seen]
    M[seen] /= counts[seen, None]
    q = np.linalg.solve(np.eye(n) - discount * M, R)
    return q.reshape(S, A)


def monte_carlo_value(mdp: TabularMdp, policy, start_states, rollouts, horizon, seed) -> float:
    """Sample-based discounted return from the given start states."""
    policy = as_deterministic(policy)
    rng = np.random.default_rng(seed)
    cdf = np.cumsum(mdp.transition, axis=2)
    cdf[..., -1] = 1.0
    starts = np.repeat(np.asarray(start_states), rollouts)
    s = starts.copy()
    total = np.zeros(s.size)
    disc = 1.0
    for _ in range(horizon):
        a = policy.action_of[s]
        total += disc * mdp.reward[s, a]
        u = rng.random(s.size)
        s = (u[:, None] >= cdf[s, a]).sum(axis=1)
        disc *= mdp.discount
    return float(total.mean())


# -- RankError -----------------------------------------------------------------

def _ranks(values):
    """1-based ranks, highest value first; ties go to the lower index."""
    order = np.lexsort((np.arange(len(values)), -np.asarray(values, dtype=float)))
    ranks = np.empty(len(values), dtype=np.int64)
    ranks[order] = np.arange(1, len(values) + 1)
    return ranks


def _entry_value(entry, held_out):
    runs = entry if isinstance(entry, (list, tuple)) else [entry]
    ok = [r.initial_value(held_out) for r in runs if not r.diverged]
    return float(np.mean(ok)) if ok else None


def learned_values(learned, held_out):
    """Per entry: mean over convergent seeds of the held-out initial value, or None."""
    return [_entry_value(e, held_out) for e in learned]


def rank_error_from_values(values, truths) -> int:
    """RankError where ``None`` marks a diverged entry.

    Each diverged entry contributes K. The rest keep their learned order and
    take the ranks from 1..K that minimise the total.
    """
    K = len(truths)
    if K < 2 or len(values) != K:
        raise ValueError("need at least two entries with one truth each")
    true_rank = _ranks(truths)
    alive = [k for k, v in enumerate(values) if v is not None]
    penalty = K * (K - len(alive))
    if not alive:
        return penalty
    order = [alive[j] for j in _ranks([values[k] for k in alive]).argsort()]
    best = min(
        sum(abs(r - true_rank[k]) for r, k in zip(chosen, order))
        for chosen in itertools.combinations(range(1, K + 1), len(alive))
    )
    return int(penalty + best)


def rank_error(learned, truths, held_out: TransitionDataset) -> int:
    return rank_error_from_values(learned_values(learned, held_out), truths)


def value_distance(values, truths) -> float:
    return float(sum(abs(v - t) for v, t in zip(values, truths) if v is not None))


# -- protocol ------------------------------------------------------------------

def _cell(args):
    d, policy, cfg, seed, discount = args
    return esarsa_evaluate(d, policy, cfg, seed, discount)


def evaluate_cells(cells, workers=1):
    """Run (dataset, policy, config, seed, discount) cells; results keep cell order."""
    cells = list(cells)
    if workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_cell, cells, chunksize=max(1, len(cells) // (4 * workers))))
    return [_cell(c) for c in cells]


@dataclass
class GridScore:
    config: OpeConfig
    rank_error: Optional[int]
    distance: float
    values: list
    converged_pass: Optional[int]

    def to_dict(self):
        return {"config": self.config.to_dict(), "rank_error": self.rank_error, "distance": self.distance,
                "values": self.values, "converged_pass": self.converged_pass}


def score_ope_grid(d_pe, d_f, known_policies, known_values, grid, eval_seeds, discount, workers=1):
    """RankError and value distance of every config on the known policies."""
    K = len(known_policies)
    if K < 2 or len(known_values) != K:
        raise ValueError("need at least two known policies with one value each")
    policies = [as_deterministic(p) for p in known_policies]
    cells = [(d_pe, pi, cfg, s, discount) for cfg in grid for pi in policies for s in eval_seeds]
    results = evaluate_cells(cells, workers)
    E = len(eval_seeds)
    scores = []
    for g, cfg in enumerate(grid):
        block = results[g * K * E:(g + 1) * K * E]
        per_policy = [block[k * E:(k + 1) * E] for k in range(K)]
        values = learned_values(per_policy, d_f)
        passes = [r.converged_pass for r in block if not r.diverged and r.converged_pass is not None]
        all_div = all(v is None for v in values)
        scores.append(GridScore(
            config=cfg,
            rank_error=None if all_div else rank_error_from_values(values, known_values),
            distance=value_distance(values, known_values),
            values=values,
            converged_pass=max(passes) if passes else None,
        ))
    return scores


def pick_config(scores) -> OpeConfig:
    """argmin RankError, then smallest value distance, then grid order.

    The chosen config runs for the number of passes its known-policy
    evaluations needed to converge.
    """
    live = [(s.rank_error, s.distance, i) for i, s in enumerate(scores) if s.rank_error is not None]
    if not live:
        raise RuntimeError("every OPE config diverged on every known policy")
    best = scores[min(live)[2]]
    if best.converged_pass is not None:
        return replace(best.config, passes=best.converged_pass)
    return best.config


def tune_ope(d_pe, d_f, known_policies, known_values, grid, eval_seeds, discount, workers=1) -> OpeConfig:
    return pick_config(score_ope_grid(d_pe, d_f, known_policies, known_values, grid, eval_seeds,
                                      discount, workers))


@dataclass
class Selection:
    best: int
    policies: list
    scores: list
    cell_values: dict

    def to_dict(self):
        return {"best": self.best, "scores": self.scores,
                "policies": [[int(a) for a in p.action_of] for p in self.policies],
                "cells": {f"{n},{s},{e}": v for (n, s, e), v in sorted(self.cell_values.items())}}


def select_policy(candidates, d_pe, d_f, cfg: OpeConfig, eval_seeds, discount, workers=1) -> Selection:
    """Pick the hyperparameter whose policies have the highest mean OPE value.

    ``candidates[n][s]`` is the policy trained with hyperparameter n and
    policy seed s. Diverged evaluations are left out of the means, and a
    hyperparameter with none left is never chosen.
    """
    keys = [(n, s) for n, row in enumerate(candidates) for s in range(len(row))]
    cells = [(d_pe, as_deterministic(candidates[n][s]), cfg, e, discount) for n, s in keys for e in eval_seeds]
    results = evaluate_cells(cells, workers)
    E = len(eval_seeds)
    cell_values = {}
    per_hp = [[] for _ in candidates]
    for j, (n, s) in enumerate(keys):
        for e_i, res in enumerate(results[j * E:(j + 1) * E]):
            v = None if res.diverged else res.initial_value(d_f)
            cell_values[(n, s, e_i)] = v
            if v is not None:
                per_hp[n].append(v)
    scores = [float(np.mean(v)) if v else None for v in per_hp]
    live = [(-sc, n) for n, sc in enumerate(scores) if sc is not None]
    if not live:
        raise RuntimeError("no candidate has a convergent evaluation")
    best = min(live)[1]
    return Selection(best, [as_deterministic(p) for p in candidates[best]], scores, cell_values)


def mean_known_value(mdp: TabularMdp, policy, held_out: TransitionDataset) -> float:
    """Exact discounted value averaged over the held-out initial states."""
    v = policy_value_discounted(mdp, as_deterministic(policy)).extra["v"]
    return float(v[held_out.state].mean())



def choose_known_policies(mdp: TabularMdp, k, min_gap, held_out: TransitionDataset, seed, pool=4096):
    """``k`` deterministic policies whose average rewards differ pairwise by at least ``min_gap``.

    Candidates are all policies when there are at most ``pool`` of them,
    otherwise a seeded random sample. Starting from the best, each pick is the
    best remaining policy at least ``min_gap`` below the previous one whose
    held-out discounted value also ranks below it, so both notions of quality
    agree. Returns (policies, discounted values, average rewards).
    """
    S, A = mdp.num_states, mdp.num_actions
    if A ** S <= pool:
        grid = np.array(list(itertools.product(range(A), repeat=S)))
    else:
        rng = np.random.default_rng(seed)
        grid = rng.integers(0, A, size=(pool, S))
    pols = [DeterministicPolicy(row) for row in grid]
    mu = np.array([average_reward(mdp, p) for p in pols])
    disc = np.array([mean_known_value(mdp, p, held_out) for p in pols])
    order = np.lexsort((np.arange(len(pols)), -mu))
    chosen = [int(order[0])]
    for j in order[1:]:
        last = chosen[-1]
        if mu[j] <= mu[last] - min_gap and disc[j] < disc[last]:
            chosen.append(int(j))
            if len(chosen) == k:
                break
    if len(chosen) < k:
        raise RuntimeError(f"could not find {k} policies separated by {min_gap} in average reward")
    return [pols[j] for j in chosen], [float(disc[j]) for j in chosen], [float(mu[j]) for j in chosen]
