"""Phased Q-learning on parallel samples and the end-to-end sample-budget planner."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .bounds import (BoundPreconditionError, expert_dataset_size, lemma3_min_phase_samples,
                     lemma4_min_explore_samples)
from .data import ParallelSamples, thinning_period
from .mdp import ValueTable, greedy_policy


class ExactBootstrap:
    """Stand-in for parallel samples that returns the true expectation P V.

    With it, phased Q-learning is exactly value iteration.
    """

    def __init__(self, transition):
        self.transition = np.asarray(transition, dtype=float)

    def bootstrap(self, phase, m, v):
        return self.transition @ v


def _bootstrap(samples, phase, m, v):
    if isinstance(samples, ExactBootstrap):
        return samples.bootstrap(phase, m, v)
    return phased_bootstrap(samples.phase(phase, m), v)


def phased_bootstrap(successors, v):
    """(1/m) sum_k V(s'_k) for every pair; ``successors`` has shape (S, A, m)."""
    if successors.shape[2] == 0:
        raise ValueError("empty sample bucket")
    return v[successors].mean(axis=2)


def phased_q_update(q, successors, reward, gamma):
    """Q'(s,a) = r(s,a) + gamma * mean_k max_a' Q(s'_k, a')."""
    q = q.q if isinstance(q, ValueTable) else np.asarray(q, dtype=float)
    return np.asarray(reward, dtype=float) + gamma * phased_bootstrap(successors, q.max(axis=1))


def phased_q_learn(samples, reward, gamma, ell, m=None, oracle_transition=None):
    """Run ``ell`` phases from Q = 0, each on a fresh slice of ``m`` successors per pair.

    ``samples`` is a ParallelSamples or an ExactBootstrap. When the true
    transition tensor is supplied, the largest deviation of a sampled bootstrap
    from its exact expectation is recorded as ``concentration`` on the result.
    Returns (ValueTable, greedy DeterministicPolicy).
    """
    reward = np.asarray(reward, dtype=float)
    if ell < 0:
        raise ValueError("ell must be non-negative")
    if isinstance(samples, ParallelSamples):
        if m is None:
            m = samples.count // ell if ell else 0
        if ell and m < 1:
            raise ValueError(f"{samples.count} samples per pair cannot feed {ell} phases")
    q = np.zeros_like(reward)
    worst = 0.0
    for i in range(ell):
        v = q.max(axis=1)
        boot = _bootstrap(samples, i, m, v)
        if oracle_transition is not None:
            worst = max(worst, float(np.abs(boot - oracle_transition @ v).max()))
        q = reward + gamma * boot
    table = ValueTable(q, iterations=ell, concentration=worst if oracle_transition is not None else None)
    return table, greedy_policy(q)


# -- planner -------------------------------------------------------------------

@dataclass(frozen=True)
class BoundParameters:
    epsilon: float
    delta: float
    delta1: float
    delta2: float
    delta3: float
    alpha: float
    beta: float
    lambda2: float
    gamma: float
    eta: float
    eta_prime: float
    nu: float
    ell: int
    m: int
    thinning_period: int
    coverage_samples: int
    coverage_steps: int
    expert_count: int
    explore_count: int
    num_states: int
    num_actions: int
    t_expert: int
    t_explore: int
    p_min: float

    def to_dict(self):
        return asdict(self)


FORMULAS = {
    "delta1": "delta / 4  (phased Q-learning failure budget)",
    "delta2": "delta / 4  (parallel-sampler coverage failure budget)",
    "delta3": "delta / 2  (expert intrinsic-reward failure budget)",
    "alpha": "4 (1 + 4 t_E) / epsilon",
    "beta": "kappa(Sigma) * ||r||_2",
    "gamma": "(2 alpha beta - 1) / (2 alpha beta - |lambda2|)",
    "eta": "1 / (alpha (1 - gamma))",
    "nu": "1 / alpha",
    "ell": "ceil(log_gamma((1 - gamma) / (4 alpha)))",
    "eta_prime": "(eta (1 - gamma)^2 / 2 - gamma^ell) / gamma",
    "m": "ceil(log(2 ell S A / delta1) 2 gamma^2 / ((1 - gamma)^2 (eta (1 - gamma)^2 - 2 gamma^ell)^2))",
    "thinning_period": "ceil(t_X log(2 / p_min) / log 2)",
    "coverage_samples": "ceil(2 / p_min log(S A / delta2))",
    "coverage_steps": "ceil(2 t_X / (log 2 p_min) log(2 / p_min) log(S A / delta2))",
    "expert_count": "max(ceil(128 S t_E (1 + 4 t_E)^2 / eps^2), ceil(72 t_E (1 + 4 t_E)^2 log(4 / delta) / eps^2))",
    "explore_count": "coverage_steps * m * ell",
}


def plan_parameters(epsilon, delta, num_states, num_actions, t_expert, t_explore, p_min, beta,
                    lambda2) -> BoundParameters:
    """Instantiate every constant needed for regret (or TV) below ``epsilon`` w.p. 1 - delta."""
    if not 0 < epsilon <= 1 or not 0 < delta < 1:
        raise ValueError("epsilon must lie in (0, 1] and delta in (0, 1)")
    if not 0 <= lambda2 < 1:
        raise ValueError("|lambda2| must lie in [0, 1)")
    if not beta > 0:
        raise ValueError("beta must be positive")
    if not 0 < p_min <= 1:
        raise ValueError("p_min must lie in (0, 1]")
    S, A = int(num_states), int(num_actions)
    d1, d2, d3 = delta / 4, delta / 4, delta / 2
    c = 1 + 4 * t_expert
    alpha = 4 * c / epsilon
    two_ab = 2 * alpha * beta
    if two_ab < 1:
        raise BoundPreconditionError("need 2 alpha beta >= 1 for gamma to lie in [0, 1)")
    gamma = (two_ab - 1) / (two_ab - lambda2)
    one_minus = (1 - lambda2) / (two_ab - lambda2)
    if not 0 < gamma < 1:
        raise BoundPreconditionError(f"planned discount {gamma} outside (0, 1)")
    log_gamma = math.log(gamma)
    eta = 1 / (alpha * one_minus)
    nu = 1 / alpha
    ell = math.ceil(math.log(one_minus / (4 * alpha)) / log_gamma)
    log_gamma_ell = ell * log_gamma
    if not math.isfinite(log_gamma_ell):
        raise BoundPreconditionError("gamma^ell is not representable")
    gamma_ell = math.exp(log_gamma_ell)
    slack = eta * one_minus ** 2 - 2 * gamma_ell
    if not slack > 0:
        raise BoundPreconditionError("planned ell violates eta (1 - gamma)^2 > 2 gamma^ell")
    eta_prime = (eta * one_minus ** 2 / 2 - gamma_ell) / gamma
    m = math.ceil(lemma3_min_phase_samples(eta, gamma, ell, S, A, d1) / ell)
    T = thinning_period(t_explore, p_min)
    n_cov = math.ceil(2 / p_min * math.log(S * A / d2))
    steps = math.ceil(lemma4_min_explore_samples(t_explore, p_min, S, A, d2))
    expert = expert_dataset_size(epsilon, delta, S, t_expert)
    return BoundParameters(
        epsilon=epsilon, delta=delta, delta1=d1, delta2=d2, delta3=d3, alpha=alpha, beta=beta,
        lambda2=lambda2, gamma=gamma, eta=eta, eta_prime=eta_prime, nu=nu, ell=ell, m=m,
        thinning_period=T, coverage_samples=n_cov, coverage_steps=steps, expert_count=expert,
        explore_count=steps * m * ell, num_states=S, num_actions=A, t_expert=t_expert,
        t_explore=t_explore, p_min=p_min,
    )


def dumps_ledger(params: BoundParameters) -> str:
    entries = []
    for name, value in params.to_dict().items():
        entries.append({"name": name, "value": value, "formula": FORMULAS.get(name, "input")})
    return json.dumps({"parameters": entries}, indent=2, sort_keys=True) + "\n"


def loads_ledger(text: str) -> BoundParameters:
    entries = json.loads(text)["parameters"]
    return BoundParameters(**{e["name"]: e["value"] for e in entries})
