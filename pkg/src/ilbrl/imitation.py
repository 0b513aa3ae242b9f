"""Imitation by batch RL: label the union dataset with an expert-support
indicator and hand it to an offline solver once."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import ParallelSamples, TransitionDataset, merge, parallel_samples_from_dataset
from .mdp import (DeterministicPolicy, TabularMdp, average_reward, greedy_policy,
                  state_action_distribution, tv_distance, value_iteration)
from .phased_q import BoundParameters, phased_q_learn


@dataclass(frozen=True)
class IntrinsicReward:
    """0/1 table marking the state-action pairs seen in the expert data."""

    table: np.ndarray

    def __post_init__(self):
        t = np.array(self.table, dtype=float)
        if t.ndim != 2 or not np.isin(t, (0.0, 1.0)).all():
            raise ValueError("intrinsic reward must be a 2-D 0/1 table")
        t.setflags(write=False)
        object.__setattr__(self, "table", t)

    def __array__(self, dtype=None, copy=None):
        return self.table if dtype is None else self.table.astype(dtype)

    @property
    def support_size(self):
        return int(self.table.sum())


def _table(r_hat):
    return r_hat.table if isinstance(r_hat, IntrinsicReward) else np.asarray(r_hat, dtype=float)


def intrinsic_reward(d_expert: TransitionDataset, num_states, num_actions) -> IntrinsicReward:
    table = np.zeros((num_states, num_actions))
    if len(d_expert):
        s, a = d_expert.state, d_expert.action
        if s.min() < 0 or s.max() >= num_states or a.min() < 0 or a.max() >= num_actions:
            raise IndexError("expert data contains out-of-range state or action indices")
        table[s, a] = 1.0
    return IntrinsicReward(table)


# -- offline solvers -----------------------------------------------------------

@dataclass
class PhasedQSolver:
    """Phased Q-learning on successors bucketed from the dataset.

    With ``m=None`` the per-phase sample count is the smallest bucket size
    divided by ``ell``. A ``seed`` permutes each bucket before slicing.
    """

    gamma: float
    ell: int
    m: int | None = None
    seed: int | None = None

    @classmethod
    def from_parameters(cls, params: BoundParameters):
        return cls(gamma=params.gamma, ell=params.ell, m=params.m)

    def __call__(self, d_union: TransitionDataset, reward):
        need = None if self.m is None else self.m * self.ell
        samples = parallel_samples_from_dataset(d_union, need)
        if self.seed is not None:
            # reshuffle which successors land in which phase
            rng = np.random.default_rng(self.seed)
            samples = ParallelSamples(rng.permuted(samples.buckets, axis=2))
        return phased_q_learn(samples, reward, self.gamma, self.ell, m=self.m)


@dataclass
class ExactSolver:
    """Value iteration on the true transitions with the supplied reward."""

    mdp: TabularMdp
    gamma: float | None = None
    tol: float = 1e-10

    def __call__(self, d_union, reward):
        model = self.mdp.with_reward(reward)
        if self.gamma is not None:
            model = model.with_discount(self.gamma)
        q = value_iteration(model, tol=self.tol)
        return q, greedy_policy(q)


def run_ilbrl(d_expert: TransitionDataset, d_explore: TransitionDataset, params=None,
              solver=None) -> DeterministicPolicy:
    """Learn an imitating policy from expert and exploratory transitions."""
    if solver is None:
        if params is None:
            raise ValueError("need either planned parameters or an explicit solver")
        solver = PhasedQSolver.from_parameters(params)
    S, A = d_explore.num_states, d_explore.num_actions
    r_hat = intrinsic_reward(d_expert, S, A)
    d_union = merge(d_expert, d_explore).with_rewards(r_hat.table)
    _, policy = solver(d_union, r_hat.table)
    return policy


# -- metrics -------------------------------------------------------------------

def intrinsic_average_reward(mdp: TabularMdp, policy, r_hat) -> float:
    """Stationary mass the policy puts on expert-labelled pairs."""
    return average_reward(mdp, policy, reward=_table(r_hat))


def imitation_regret(mdp: TabularMdp, expert, imitator) -> float:
    return average_reward(mdp, expert) - average_reward(mdp, imitator)


def occupancy_tv(mdp: TabularMdp, expert, imitator) -> float:
    """TV between the stationary state-action distributions of two policies."""
    return tv_distance(state_action_distribution(mdp, expert), state_action_distribution(mdp, imitator))


@dataclass
class RunRecord:
    parameters: dict
    intrinsic_average_reward: float
    average_reward: float
    expert_average_reward: float
    regret: float
    tv: float
    seeds: dict = field(default_factory=dict)
    policy: list = field(default_factory=list)

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def evaluate_run(mdp, expert, imitator, d_expert, parameters=None, seeds=None) -> RunRecord:
    r_hat = intrinsic_reward(d_expert, mdp.num_states, mdp.num_actions)
    mu_e = average_reward(mdp, expert)
    mu = average_reward(mdp, imitator)
    return RunRecord(
        parameters=parameters.to_dict() if isinstance(parameters, BoundParameters) else dict(parameters or {}),
        intrinsic_average_reward=intrinsic_average_reward(mdp, imitator, r_hat),
        average_reward=mu,
        expert_average_reward=mu_e,
        regret=mu_e - mu,
        tv=occupancy_tv(mdp, expert, imitator),
        seeds=dict(seeds or {}),
        policy=[int(a) for a in imitator.action_of],
    )
