"""Closed-form sample-complexity bounds and Monte-Carlo checks against them.

All logarithms are natural; the ``log 2`` factors in the coverage bound are
kept literally.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

BOUND_IDS = ("L1", "L2", "L4", "L6", "L7")


class BoundPreconditionError(ValueError):
    pass


def lemma1_value_gap_bound(eta_prime, gamma, ell):
    """Pointwise |Q_hat_ell - Q*| bound: (eta' gamma + gamma^ell) / (1 - gamma)."""
    _check_gamma(gamma)
    return (eta_prime * gamma + _pow(gamma, ell)) / (1.0 - gamma)


def lemma2_regret_bound(eta_prime, gamma, ell):
    return 2.0 / (1.0 - gamma) * lemma1_value_gap_bound(eta_prime, gamma, ell)


def lemma3_min_phase_samples(eta, gamma, ell, num_states, num_actions, delta1):
    """Lower bound on m * ell for discounted regret below ``eta`` w.p. 1 - delta'."""
    _check_gamma(gamma)
    slack = eta * (1.0 - gamma) ** 2 - 2.0 * _pow(gamma, ell)
    if not slack > 0:
        raise BoundPreconditionError(
            "need eta (1 - gamma)^2 > 2 gamma^ell; raise ell per "
            "ell >= (log eta + 2 log(1 - gamma) - log 2) / log gamma"
        )
    return (math.log(2.0 * ell * num_states * num_actions / delta1)
            * 2.0 * gamma ** 2 * ell / ((1.0 - gamma) ** 2 * slack ** 2))


def lemma4_min_explore_samples(t_explore, p_min, num_states, num_actions, delta2):
    """Exploratory transitions needed to cover every pair once w.p. 1 - delta''."""
    if not 0 < p_min <= 1:
        raise ValueError("p_min must lie in (0, 1]")
    return (2.0 * t_explore / (math.log(2.0) * p_min) * math.log(2.0 / p_min)
            * math.log(num_states * num_actions / delta2))


def lemma5_average_gap(epsilon, gamma, lambda2, beta):
    """Additive loss when moving from epsilon-optimal discounted to average reward."""
    return beta * (1.0 - gamma) / (1.0 - gamma * lambda2) + (1.0 - gamma) * epsilon


def lemma6_intrinsic_floor(expert_count, num_states, t_expert, nu):
    """(floor, failure probability) for the intrinsic average reward."""
    if not nu > 0:
        raise ValueError("nu must be positive")
    floor = 1.0 - nu - math.sqrt(8.0 * num_states * t_expert / expert_count)
    fail = 2.0 * math.exp(-(nu ** 2) * expert_count / (4.5 * t_expert))
    return floor, fail


def lemma7_extrinsic_floor(eps_prime, mu_expert, t_expert):
    if not 0 <= eps_prime <= 1:
        raise ValueError("eps_prime must lie in [0, 1]")
    return (1.0 - eps_prime) * mu_expert - 4.0 * t_expert * eps_prime


def expert_dataset_size(epsilon, delta, num_states, t_expert) -> int:
    """Expert transitions for TV below ``epsilon`` w.p. 1 - delta: the larger of
    the coverage term and the concentration term."""
    if not epsilon > 0 or not 0 < delta < 1:
        raise ValueError("need epsilon > 0 and delta in (0, 1)")
    c = 1 + 4 * t_expert
    return max(
        math.ceil(128 * num_states * t_expert * c ** 2 / epsilon ** 2),
        math.ceil(72 * t_expert * c ** 2 * math.log(4 / delta) / epsilon ** 2),
    )


def is_vacuous(bound_id, value, gamma=None):
    """Whether a bound carries no information at reward scale."""
    if bound_id in ("L1",):
        return value >= 1.0 / (1.0 - gamma)
    if bound_id in ("L2",):
        return value >= 1.0 / (1.0 - gamma)
    if bound_id in ("L6", "L7"):
        return value <= 0.0
    return False


def _check_gamma(gamma):
    if not 0 <= gamma < 1:
        raise ValueError(f"gamma must lie in [0, 1), got {gamma}")


def _pow(gamma, ell):
    if gamma == 0:
        return 0.0 if ell > 0 else 1.0
    return math.exp(ell * math.log(gamma))


# -- empirical verification ----------------------------------------------------

@dataclass
class VerifierConfig:
    bound: str
    trials: int = 100
    seed: int = 0
    num_states: int = 5
    num_actions: int = 2
    discount: float = 0.9
    # when set, every trial reuses the MDP drawn from this seed
    mdp_seed: int | None = None
    # L1 / L2
    m: int = 200
    ell: int = 40
    eta_prime: float = 0.25
    # L4
    delta2: float = 0.1
    # L6 / L7
    expert_count: int = 2000
    nu: float = 0.1
    policies_per_trial: int = 5

    def __post_init__(self):
        if self.bound not in BOUND_IDS:
            raise ValueError(f"bound must be one of {BOUND_IDS}, got {self.bound!r}")


@dataclass
class VerificationReport:
    bound: str
    trials: int
    eligible: int
    violations: int
    margin_min: float
    margin_mean: float
    margin_max: float
    stated_probability: float | None = None
    allowed_frequency: float | None = None
    passed: bool = True
    details: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def trial_seeds(seed, trials):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(trials)]


def binomial_allowance(p, n):
    """p + 3 sigma for a Binomial(n, p) frequency."""
    return p + 3.0 * math.sqrt(max(p * (1 - p), 0.0) / n)


def _trial(cfg: VerifierConfig, seed):
    from . import imitation, mdp as mdp_mod, phased_q
    from .data import CoverageError, ideal_parallel_samples, rollout, simulate_parallel_sampler

    rng = np.random.default_rng(seed)
    m = mdp_mod.random_mdp(cfg.num_states, cfg.num_actions,
                           rng if cfg.mdp_seed is None else cfg.mdp_seed, discount=cfg.discount)

    if cfg.bound in ("L1", "L2"):
        samples = ideal_parallel_samples(m, cfg.m * cfg.ell, rng)
        q_hat, pi = phased_q.phased_q_learn(samples, m.reward, m.discount, cfg.ell,
                                            oracle_transition=m.transition)
        q_star = mdp_mod.value_iteration(m, tol=1e-12).q
        measured = q_hat.concentration
        eligible = measured <= cfg.eta_prime
        if cfg.bound == "L1":
            lhs = float(np.abs(q_hat.q - q_star).max())
            rhs = lemma1_value_gap_bound(cfg.eta_prime, m.discount, cfg.ell)
        else:
            v_star = q_star.max(axis=1)
            v_bar = mdp_mod.policy_value_discounted(m, pi).extra["v"]
            lhs = float(m.initial @ (v_star - v_bar))
            rhs = lemma2_regret_bound(cfg.eta_prime, m.discount, cfg.ell)
        return {"eligible": bool(eligible), "lhs": lhs, "rhs": rhs, "concentration": measured}

    if cfg.bound == "L4":
        explore = mdp_mod.StochasticPolicy.uniform(m.num_states, m.num_actions)
        P = mdp_mod.policy_matrix(m, explore)
        rho = mdp_mod.steady_state(P)
        t = mdp_mod.mixing_time(P, rho)
        p_min = float((rho[:, None] * explore.probs(m.num_actions)).min())
        budget = lemma4_min_explore_samples(t, p_min, m.num_states, m.num_actions, cfg.delta2)
        try:
            out = simulate_parallel_sampler(m, explore, 1, p_min, t, cfg.delta2, rng, max_steps=budget)
            failed, used = False, out.raw_steps
        except CoverageError as err:
            failed, used = True, err.steps
        return {"eligible": True, "failed": failed, "lhs": used, "rhs": budget, "p_min": p_min, "t_mix": t}

    # L6 / L7 share the expert-data draw
    expert = mdp_mod.greedy_policy(mdp_mod.value_iteration(m, tol=1e-10))
    P_e = mdp_mod.policy_matrix(m, expert)
    rho_e = mdp_mod.steady_state(P_e)
    t_e = mdp_mod.mixing_time(P_e, rho_e)
    d_e = rollout(m, expert, cfg.expert_count, rng)
    r_hat = imitation.intrinsic_reward(d_e, m.num_states, m.num_actions)
    if cfg.bound == "L6":
        mu_int = imitation.intrinsic_average_reward(m, expert, r_hat)
        floor, fail = lemma6_intrinsic_floor(cfg.expert_count, m.num_states, t_e, cfg.nu)
        return {"eligible": True, "failed": mu_int < floor, "lhs": mu_int, "rhs": floor,
                "stated": fail, "t_expert": t_e}
    mu_e = mdp_mod.average_reward(m, expert)
    worst = np.inf
    rows = []
    candidates = [expert] + [mdp_mod.DeterministicPolicy(rng.integers(0, m.num_actions, m.num_states))
                             for _ in range(cfg.policies_per_trial)]
    # a policy that only departs from the expert on one state keeps eps' small
    flip = np.array(expert.action_of)
    s = rng.integers(m.num_states)
    flip[s] = (flip[s] + 1) % m.num_actions
    candidates.append(mdp_mod.DeterministicPolicy(flip))
    for pi in candidates:
        eps_prime = 1.0 - imitation.intrinsic_average_reward(m, pi, r_hat)
        eps_prime = min(max(eps_prime, 0.0), 1.0)
        floor = lemma7_extrinsic_floor(eps_prime, mu_e, t_e)
        mu = mdp_mod.average_reward(m, pi)
        rows.append((mu, floor))
        worst = min(worst, mu - floor)
    return {"eligible": True, "failed": bool(worst < -1e-12), "lhs": min(r[0] for r in rows),
            "rhs": max(r[1] for r in rows), "margin": worst}


def verify_bound(cfg: VerifierConfig, workers=1) -> VerificationReport:
    """Run ``cfg.trials`` seeded trials measuring both sides of a bound."""
    seeds = trial_seeds(cfg.seed, cfg.trials)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_trial, [cfg] * len(seeds), seeds))
    else:
        rows = [_trial(cfg, s) for s in seeds]

    if cfg.bound in ("L1", "L2"):
        used = [r for r in rows if r["eligible"]]
        margins = [r["rhs"] - r["lhs"] for r in used]
        violations = sum(m < -1e-12 for m in margins)
        rep = VerificationReport(cfg.bound, cfg.trials, len(used), violations, *_stats(margins))
        rep.passed = violations == 0
        rep.details = {"max_concentration": max(r["concentration"] for r in rows),
                       "eta_prime": cfg.eta_prime}
        return rep

    if cfg.bound == "L7":
        margins = [r["margin"] for r in rows]
        violations = sum(r["failed"] for r in rows)
        rep = VerificationReport(cfg.bound, cfg.trials, cfg.trials, violations, *_stats(margins))
        rep.passed = violations == 0
        return rep

    margins = [r["rhs"] - r["lhs"] if cfg.bound == "L4" else r["lhs"] - r["rhs"] for r in rows]
    violations = sum(r["failed"] for r in rows)
    # per-trial MDPs differ, so the expected violation rate is the mean stated probability
    stated = cfg.delta2 if cfg.bound == "L4" else float(np.mean([r["stated"] for r in rows]))
    allowed = binomial_allowance(min(stated, 1.0), cfg.trials)
    rep = VerificationReport(cfg.bound, cfg.trials, cfg.trials, violations, *_stats(margins),
                             stated_probability=stated, allowed_frequency=allowed)
    rep.passed = violations / cfg.trials <= allowed
    if cfg.bound == "L6":
        rep.details = {"t_expert_max": max(r["t_expert"] for r in rows)}
    else:
        rep.details = {"p_min_min": min(r["p_min"] for r in rows)}
    return rep


def _stats(values):
    if not values:
        return math.nan, math.nan, math.nan
    a = np.asarray(values, dtype=float)
    return float(a.min()), float(a.mean()), float(a.max())
