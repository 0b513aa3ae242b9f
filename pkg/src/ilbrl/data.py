"""Transition datasets: generation, algebra, splitting and persistence.

Datasets are stored column-wise in numpy arrays. ``next_action`` is -1 where
no successor record exists in the episode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .mdp import DeterministicPolicy, TabularMdp, policy_matrix

EXPERT, EXPLORATORY = 0, 1
SOURCE_NAMES = {EXPERT: "expert", EXPLORATORY: "exploratory"}
SOURCE_CODES = {v: k for k, v in SOURCE_NAMES.items()}
NO_ACTION = -1

_COLUMNS = ("episode", "step", "state", "action", "reward", "next_state",
            "next_action", "terminal", "timeout", "source")
_INT_COLUMNS = ("episode", "step", "state", "action", "next_state", "next_action", "source")
_BOOL_COLUMNS = ("terminal", "timeout")


class CoverageError(RuntimeError):
    """Some state-action bucket could not be filled within the step budget."""

    def __init__(self, message, steps, missing):
        super().__init__(message)
        self.steps = steps
        self.missing = missing


class TransitionRecord(NamedTuple):
    episode: int
    step: int
    state: int
    action: int
    reward: float
    next_state: int
    next_action: int
    terminal: bool
    timeout: bool
    source: int


@dataclass(frozen=True)
class TransitionDataset:
    num_states: int
    num_actions: int
    episode: np.ndarray
    step: np.ndarray
    state: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    next_state: np.ndarray
    next_action: np.ndarray
    terminal: np.ndarray
    timeout: np.ndarray
    source: np.ndarray

    def __post_init__(self):
        n = None
        for name in _COLUMNS:
            dtype = float if name == "reward" else (bool if name in _BOOL_COLUMNS else np.int64)
            col = np.array(getattr(self, name), dtype=dtype).reshape(-1)
            col.setflags(write=False)
            object.__setattr__(self, name, col)
            if n is None:
                n = col.size
            elif col.size != n:
                raise ValueError(f"column {name} has {col.size} entries, expected {n}")
        S, A = self.num_states, self.num_actions
        if n:
            if self.state.min() < 0 or self.state.max() >= S or self.next_state.min() < 0 or self.next_state.max() >= S:
                raise ValueError("state index outside [0, S)")
            if self.action.min() < 0 or self.action.max() >= A:
                raise ValueError("action index outside [0, A)")
            if self.next_action.min() < NO_ACTION or self.next_action.max() >= A:
                raise ValueError("next action index outside [0, A)")

    @classmethod
    def empty(cls, num_states, num_actions):
        return cls(num_states, num_actions, *([[]] * len(_COLUMNS)))

    def __len__(self):
        return int(self.state.size)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i):
        return TransitionRecord(*(getattr(self, c)[i].item() for c in _COLUMNS))

    @property
    def source_label(self):
        kinds = set(np.unique(self.source).tolist())
        if kinds == {EXPERT}:
            return "expert"
        if kinds == {EXPLORATORY}:
            return "exploratory"
        return "mixed" if kinds else "empty"

    def columns(self):
        return {c: getattr(self, c) for c in _COLUMNS}

    def take(self, index):
        index = np.asarray(index)
        return TransitionDataset(self.num_states, self.num_actions,
                                 **{c: getattr(self, c)[index] for c in _COLUMNS})

    def initial_records(self):
        return self.take(np.flatnonzero(self.step == 0))

    def from_source(self, source):
        code = SOURCE_CODES[source] if isinstance(source, str) else source
        return self.take(np.flatnonzero(self.source == code))

    def pairs(self):
        """Distinct (s, a) pairs as a boolean S x A table."""
        seen = np.zeros((self.num_states, self.num_actions), dtype=bool)
        seen[self.state, self.action] = True
        return seen

    def pair_counts(self):
        counts = np.zeros((self.num_states, self.num_actions), dtype=np.int64)
        np.add.at(counts, (self.state, self.action), 1)
        return counts

    def with_rewards(self, reward_table):
        cols = self.columns()
        cols["reward"] = np.asarray(reward_table, dtype=float)[self.state, self.action]
        return TransitionDataset(self.num_states, self.num_actions, **cols)

    def episodes(self):
        return np.unique(self.episode)


def concatenate(datasets):
    datasets = list(datasets)
    S, A = datasets[0].num_states, datasets[0].num_actions
    for d in datasets:
        if (d.num_states, d.num_actions) != (S, A):
            raise ValueError(f"dimension mismatch: {(d.num_states, d.num_actions)} vs {(S, A)}")
    return TransitionDataset(S, A, **{c: np.concatenate([getattr(d, c) for d in datasets]) for c in _COLUMNS})


def merge(d_expert: TransitionDataset, d_explore: TransitionDataset) -> TransitionDataset:
    """D_U = D_E followed by D_X; D_X episode ids are shifted past those of D_E."""
    if (d_expert.num_states, d_expert.num_actions) != (d_explore.num_states, d_explore.num_actions):
        raise ValueError("datasets were generated on MDPs of different dimensions")
    offset = int(d_expert.episode.max()) + 1 if len(d_expert) else 0
    cols = d_explore.columns()
    cols["episode"] = cols["episode"] + offset
    shifted = TransitionDataset(d_explore.num_states, d_explore.num_actions, **cols)
    return concatenate([d_expert, shifted])


def _sampler(cdf, u):
    return int(np.searchsorted(cdf, u, side="right"))


def rollout(mdp: TabularMdp, policy, num_steps, seed, horizon=None, source=EXPERT) -> TransitionDataset:
    """Sample ``num_steps`` transitions, restarting from P0 every ``horizon`` steps.

    The last record of a truncated episode carries ``timeout=True`` and no
    next action.
    """
    if num_steps < 1:
        raise ValueError("num_steps must be at least 1")
    source = SOURCE_CODES[source] if isinstance(source, str) else source
    rng = np.random.default_rng(seed)
    S, A = mdp.num_states, mdp.num_actions
    P_cdf = np.cumsum(mdp.transition, axis=2)
    P_cdf[..., -1] = 1.0
    p0_cdf = np.cumsum(mdp.initial)
    p0_cdf[-1] = 1.0
    deterministic = isinstance(policy, DeterministicPolicy)
    if deterministic:
        act = policy.action_of
    else:
        pi_cdf = np.cumsum(policy.probs(A), axis=1)
        pi_cdf[:, -1] = 1.0
    horizon = horizon or num_steps

    u = rng.random((num_steps, 3))
    episode = np.empty(num_steps, np.int64)
    step = np.empty(num_steps, np.int64)
    states = np.empty(num_steps, np.int64)
    actions = np.empty(num_steps, np.int64)
    nxt = np.empty(num_steps, np.int64)
    ep, t = 0, 0
    s = _sampler(p0_cdf, u[0, 0])
    for i in range(num_steps):
        if t == horizon:
            ep, t = ep + 1, 0
            s = _sampler(p0_cdf, u[i, 0])
        a = int(act[s]) if deterministic else _sampler(pi_cdf[s], u[i, 1])
        s2 = _sampler(P_cdf[s, a], u[i, 2])
        episode[i], step[i], states[i], actions[i], nxt[i] = ep, t, s, a, s2
        s, t = s2, t + 1

    last = np.ones(num_steps, dtype=bool)
    last[:-1] = episode[1:] != episode[:-1]
    next_action = np.full(num_steps, NO_ACTION, np.int64)
    next_action[:-1] = np.where(last[:-1], NO_ACTION, actions[1:])
    timeout = last.copy()
    timeout[-1] = step[-1] + 1 == horizon
    return TransitionDataset(
        S, A, episode=episode, step=step, state=states, action=actions,
        reward=mdp.reward[states, actions], next_state=nxt, next_action=next_action,
        terminal=np.zeros(num_steps, bool), timeout=timeout,
        source=np.full(num_steps, source, np.int64),
    )


# -- parallel sampling ---------------------------------------------------------

@dataclass(frozen=True)
class ParallelSamples:
    """``buckets[s, a, k]`` is the k-th sampled successor of (s, a)."""

    buckets: np.ndarray
    thinning_period: int = 1
    raw_steps: int = 0

    @property
    def count(self):
        return self.buckets.shape[2]

    def phase(self, i, m):
        if (i + 1) * m > self.count:
            raise ValueError(f"phase {i} needs samples up to {(i + 1) * m}, only {self.count} per pair")
        return self.buckets[:, :, i * m:(i + 1) * m]

    def empirical_transition(self):
        S = self.buckets.shape[0]
        counts = np.zeros(self.buckets.shape[:2] + (S,))
        s_idx, a_idx, _ = np.indices(self.buckets.shape)
        np.add.at(counts, (s_idx.ravel(), a_idx.ravel(), self.buckets.ravel()), 1)
        return counts / self.count


def thinning_period(t_mix, p_min):
    """T = ceil(t_mix * log(2 / p_min) / log 2)."""
    return max(1, math.ceil(t_mix * math.log(2.0 / p_min) / math.log(2.0) - 1e-12))


def ideal_parallel_samples(mdp: TabularMdp, count, seed) -> ParallelSamples:
    """Draw ``count`` independent successors per pair straight from P."""
    rng = np.random.default_rng(seed)
    S, A = mdp.num_states, mdp.num_actions
    cdf = np.cumsum(mdp.transition, axis=2)
    cdf[..., -1] = 1.0
    u = rng.random((S, A, count))
    buckets = (u[..., None] >= cdf[:, :, None, :]).sum(axis=3)
    return ParallelSamples(buckets.astype(np.int64))


def simulate_parallel_sampler(mdp: TabularMdp, explore, per_pair_count, p_min, t_mix, delta2, seed,
                              safety=3.0, max_steps=None) -> ParallelSamples:
    """Fill every (s, a) bucket from a single thinned exploratory rollout.

    A sample (s_t, a_t, s_{t+1}) is kept every T steps after a burn-in of T
    steps. Between kept samples the chain is advanced with P_pi^(T-1), which
    is distributionally identical to stepping it T-1 times. The default step
    budget is ``safety`` times the coverage bound per requested sample.
    """
    from .bounds import lemma4_min_explore_samples

    if not p_min > 0:
        raise ValueError("exploratory policy must cover every pair (p_min > 0)")
    rng = np.random.default_rng(seed)
    S, A = mdp.num_states, mdp.num_actions
    T = thinning_period(t_mix, p_min)
    if max_steps is None:
        max_steps = safety * lemma4_min_explore_samples(t_mix, p_min, S, A, delta2) * per_pair_count
    max_samples = int(max_steps // T)

    P_pi = policy_matrix(mdp, explore)
    jump = np.cumsum(np.linalg.matrix_power(P_pi, T - 1), axis=1)
    jump[:, -1] = 1.0
    start = np.cumsum(mdp.initial @ np.linalg.matrix_power(P_pi, T))
    start[-1] = 1.0
    pi_cdf = np.cumsum(explore.probs(A), axis=1)
    pi_cdf[:, -1] = 1.0
    P_cdf = np.cumsum(mdp.transition, axis=2)
    P_cdf[..., -1] = 1.0

    buckets = np.zeros((S, A, per_pair_count), np.int64)
    filled = np.zeros((S, A), np.int64)
    remaining = S * A
    s = _sampler(start, rng.random())
    taken = 0
    block = 4096
    while taken < max_samples and remaining:
        u = rng.random((min(block, max_samples - taken), 3))
        for ua, us, uj in u:
            a = _sampler(pi_cdf[s], ua)
            s2 = _sampler(P_cdf[s, a], us)
            taken += 1
            k = filled[s, a]
            if k < per_pair_count:
                buckets[s, a, k] = s2
                filled[s, a] = k + 1
                if k + 1 == per_pair_count:
                    remaining -= 1
                    if not remaining:
                        break
            s = _sampler(jump[s2], uj) if T > 1 else s2
    steps = taken * T
    if remaining:
        missing = [(int(i), int(j)) for i, j in zip(*np.nonzero(filled < per_pair_count))]
        raise CoverageError(
            f"{len(missing)} state-action buckets unfilled after {steps} steps (budget {max_steps:.0f})",
            steps, missing,
        )
    return ParallelSamples(buckets, thinning_period=T, raw_steps=steps)


def parallel_samples_from_dataset(d: TransitionDataset, count=None) -> ParallelSamples:
    """Bucket recorded successors per (s, a) in record order.

    Successive visits to the same pair yield independent draws from P(s, a)
    by the Markov property. ``count`` defaults to the smallest bucket size.
    """
    counts = d.pair_counts()
    if count is None:
        count = int(counts.min())
    if count < 1 or (counts < count).any():
        missing = [(int(i), int(j)) for i, j in zip(*np.nonzero(counts < max(count, 1)))]
        raise CoverageError(f"{len(missing)} state-action pairs have fewer than {max(count, 1)} samples",
                            len(d), missing)
    S, A = d.num_states, d.num_actions
    flat = d.state * A + d.action
    order = np.argsort(flat, kind="stable")
    sorted_next = d.next_state[order]
    starts = np.concatenate([[0], np.cumsum(counts.ravel())[:-1]])
    idx = starts[:, None] + np.arange(count)[None, :]
    return ParallelSamples(sorted_next[idx].reshape(S, A, count))


# -- splitting and mixing ------------------------------------------------------

def split_dataset(d: TransitionDataset, train_frac, ope_frac):
    """Training and held-out splits: (D_T, D_V_PE, D_V_F), the last restricted to initial states."""
    if not (0 < train_frac < 1 and 0 < ope_frac < 1):
        raise ValueError("split fractions must lie strictly between 0 and 1")
    n = len(d)
    i = int(train_frac * n)
    d_train = d.take(np.arange(0, i))
    d_val = d.take(np.arange(i, n))
    l = int(ope_frac * len(d_val))
    d_pe = d_val.take(np.arange(0, l))
    rest = d_val.take(np.arange(l, len(d_val)))
    d_final = rest.initial_records()
    for name, part in (("training", d_train), ("policy-evaluation", d_pe), ("final-validation", d_final)):
        if not len(part):
            raise ValueError(f"{name} split is empty")
    return d_train, d_pe, d_final


def shuffle_episodes(d: TransitionDataset, seed) -> TransitionDataset:
    """Permute whole episodes, keeping records within an episode contiguous and ordered."""
    rng = np.random.default_rng(seed)
    eps = d.episodes()
    new_order = rng.permutation(eps.size)
    rank = np.empty(eps.size, np.int64)
    rank[new_order] = np.arange(eps.size)
    key = rank[np.searchsorted(eps, d.episode)]
    idx = np.lexsort((np.arange(len(d)), key))
    return d.take(idx)


def mix_sources(d: TransitionDataset, expert_fraction) -> TransitionDataset:
    """Largest prefix-based subset of ``d`` whose expert share is ``expert_fraction``."""
    if not 0 <= expert_fraction <= 1:
        raise ValueError("expert_fraction must lie in [0, 1]")
    e_idx = np.flatnonzero(d.source == EXPERT)
    x_idx = np.flatnonzero(d.source != EXPERT)
    if expert_fraction == 0:
        n_e, n_x = 0, x_idx.size
    elif expert_fraction == 1:
        n_e, n_x = e_idx.size, 0
    else:
        total = min(e_idx.size / expert_fraction, x_idx.size / (1 - expert_fraction))
        n_e = int(round(expert_fraction * total))
        n_x = int(round((1 - expert_fraction) * total))
        n_e, n_x = min(n_e, e_idx.size), min(n_x, x_idx.size)
    keep = np.sort(np.concatenate([e_idx[:n_e], x_idx[:n_x]]))
    if not keep.size:
        raise ValueError(f"no records available for expert fraction {expert_fraction}")
    return d.take(keep)


# -- persistence ---------------------------------------------------------------

def _fmt(name, value):
    if name == "reward":
        return repr(float(value))
    if name in _BOOL_COLUMNS:
        return "1" if value else "0"
    if name == "next_action" and value == NO_ACTION:
        return "-"
    if name == "source":
        return SOURCE_NAMES[int(value)]
    return str(int(value))


def dumps_dataset(d: TransitionDataset, provenance=None) -> str:
    lines = [f"# transition-dataset v1 states={d.num_states} actions={d.num_actions} source={d.source_label}"]
    if provenance:
        lines.append("# " + " ".join(f"{k}={v}" for k, v in provenance.items()))
    lines.append("\t".join(_COLUMNS))
    cols = [getattr(d, c).tolist() for c in _COLUMNS]
    for row in zip(*cols):
        lines.append("\t".join(_fmt(c, v) for c, v in zip(_COLUMNS, row)))
    return "\n".join(lines) + "\n"


def loads_dataset(text: str) -> TransitionDataset:
    lines = text.splitlines()
    meta = dict(kv.split("=", 1) for kv in lines[0].lstrip("# ").split()[2:])
    S, A = int(meta["states"]), int(meta["actions"])
    body = [ln for ln in lines[1:] if ln and not ln.startswith("#")]
    header = body[0].split("\t")
    if tuple(header) != _COLUMNS:
        raise ValueError(f"unexpected dataset columns {header}")
    data = {c: [] for c in _COLUMNS}
    for ln in body[1:]:
        for c, v in zip(_COLUMNS, ln.split("\t")):
            if c == "reward":
                data[c].append(float(v))
            elif c in _BOOL_COLUMNS:
                data[c].append(v == "1")
            elif c == "next_action" and v == "-":
                data[c].append(NO_ACTION)
            elif c == "source":
                data[c].append(SOURCE_CODES[v])
            else:
                data[c].append(int(v))
    return TransitionDataset(S, A, **data)


def save_dataset(d, path, provenance=None):
    with open(path, "w") as fh:
        fh.write(dumps_dataset(d, provenance))


def load_dataset(path) -> TransitionDataset:
    with open(path) as fh:
        return loads_dataset(fh.read())
