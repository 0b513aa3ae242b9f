import math

import mpmath
import numpy as np
import pytest

from ilbrl import data as D
from ilbrl import mdp as M
from ilbrl.bounds import BoundPreconditionError
from ilbrl.phased_q import (ExactBootstrap, dumps_ledger, loads_ledger, phased_q_learn, phased_q_update,
                            plan_parameters)

mpmath.mp.dps = 50


class TestUpdate:
    def test_zero_table_gives_reward(self):
        r = np.array([[0.3, 0.9], [0.1, 0.0]])
        succ = np.zeros((2, 2, 3), dtype=np.int64)
        assert np.array_equal(phased_q_update(np.zeros((2, 2)), succ, r, 0.9), r)

    def test_worked_example(self):
        # two successors whose max-values are 0.2 and 0.6
        q = np.array([[0.0, 0.0], [0.2, 0.1], [0.5, 0.6]])
        succ = np.zeros((3, 2, 2), dtype=np.int64)
        succ[0, 0] = [1, 2]
        r = np.zeros((3, 2))
        r[0, 0] = 1.0
        assert phased_q_update(q, succ, r, 0.5)[0, 0] == pytest.approx(1.2)

    def test_deterministic_mdp_single_sample_is_bellman(self):
        rng = np.random.default_rng(0)
        nxt = rng.integers(0, 4, (4, 2))
        P = np.zeros((4, 2, 4))
        P[np.arange(4)[:, None], np.arange(2)[None, :], nxt] = 1.0
        m = M.TabularMdp(P, rng.random((4, 2)), np.full(4, 0.25), 0.8)
        q = rng.random((4, 2))
        out = phased_q_update(q, nxt[:, :, None], m.reward, m.discount)
        assert np.array_equal(out, M.bellman_backup(m, q))

    def test_empty_bucket(self):
        with pytest.raises(ValueError):
            phased_q_update(np.zeros((1, 1)), np.zeros((1, 1, 0), dtype=np.int64), np.zeros((1, 1)), 0.5)


class TestLearn:
    def test_zero_reward(self):
        m = M.random_mdp(3, 2, 0)
        samples = D.ideal_parallel_samples(m, 20, 0)
        q, pi = phased_q_learn(samples, np.zeros((3, 2)), 0.9, 10)
        assert np.all(q.q == 0)
        assert pi.action_of.tolist() == [0, 0, 0]

    def test_exact_mode_is_value_iteration(self):
        m = M.random_mdp(6, 3, 1, discount=0.9)
        q = np.zeros((6, 3))
        for _ in range(25):
            q = M.bellman_backup(m, q)
        out, _ = phased_q_learn(ExactBootstrap(m.transition), m.reward, m.discount, 25)
        assert np.array_equal(out.q, q)

    def test_fresh_slice_per_phase(self):
        m = M.random_mdp(2, 1, 0)
        samples = D.ideal_parallel_samples(m, 6, 0)
        with pytest.raises(ValueError):
            phased_q_learn(samples, m.reward, 0.5, 4, m=2)

    def test_values_in_range(self):
        m = M.random_mdp(5, 3, 2, discount=0.8)
        q, _ = phased_q_learn(D.ideal_parallel_samples(m, 300, 0), m.reward, 0.8, 30)
        assert q.q.min() >= 0 and q.q.max() <= 1 / (1 - 0.8)

    def test_concentration_measured_against_oracle(self):
        m = M.random_mdp(4, 2, 3, discount=0.8)
        q, _ = phased_q_learn(D.ideal_parallel_samples(m, 400, 1), m.reward, 0.8, 20,
                              oracle_transition=m.transition)
        assert 0 < q.concentration < 1

    @staticmethod
    def _runs(n):
        for seed in range(n):
            rng = np.random.default_rng(seed)
            m = M.random_mdp(5, 2, rng, discount=0.8)
            _, pi = phased_q_learn(D.ideal_parallel_samples(m, 200 * 30, rng), m.reward, 0.8, 30, m=200)
            yield m, pi, M.value_iteration(m, tol=1e-12)

    @pytest.mark.xfail(strict=True, reason="exact match rate on Dirichlet(1) MDPs is about 94% "
                                           "(939/1000 seeds); misses are near-ties")
    def test_matches_optimal_policy_on_95_of_100_seeds(self):
        hits = sum(pi == M.greedy_policy(q) for _, pi, q in self._runs(100))
        assert hits >= 95

    def test_mismatches_are_near_ties(self):
        hits = 0
        for m, pi, q in self._runs(100):
            hits += pi == M.greedy_policy(q)
            loss = q.q.max(axis=1) - q.q[np.arange(5), pi.action_of]
            assert loss.max() < 0.1
        assert hits >= 90


def expert_count_oracle(S, t, eps, delta):
    c = 1 + 4 * mpmath.mpf(t)
    first = mpmath.ceil(128 * S * t * c ** 2 / mpmath.mpf(eps) ** 2)
    second = mpmath.ceil(72 * t * c ** 2 * mpmath.log(4 / mpmath.mpf(delta)) / mpmath.mpf(eps) ** 2)
    return int(max(first, second)), float(72 * t * c ** 2 * mpmath.log(4 / mpmath.mpf(delta)) / eps ** 2)


class TestPlanner:
    def test_discount_choice(self):
        p = plan_parameters(1.0, 0.5, 2, 2, 1, 1, 0.1, 1.0, 0.0)
        assert p.alpha == 20
        assert p.gamma == pytest.approx(39 / 40, rel=1e-15)

    def test_expert_count(self):
        p = plan_parameters(1.0, 0.5, 2, 2, 1, 1, 0.1, 1.0, 0.0)
        want, second = expert_count_oracle(2, 1, 1.0, 0.5)
        assert p.expert_count == want == 6400
        assert round(second) == 3743

    def test_doubling_epsilon_quarters_expert_count(self):
        a = plan_parameters(0.5, 0.5, 2, 2, 1, 1, 0.1, 1.0, 0.0)
        b = plan_parameters(1.0, 0.5, 2, 2, 1, 1, 0.1, 1.0, 0.0)
        assert a.expert_count == 4 * b.expert_count
        c = plan_parameters(1.0, 0.5, 2, 2, 1, 1, 0.1, 2.0, 0.0)
        assert plan_parameters(0.5, 0.5, 2, 2, 1, 1, 0.1, 2.0, 0.0).expert_count // 4 == c.expert_count
        assert b.expert_count // 4 == 1600

    def test_invariant_and_failure_split(self):
        p = plan_parameters(0.8, 0.2, 4, 2, 2, 3, 0.05, 1.5, 0.3)
        assert p.eta * (1 - p.gamma) ** 2 > 2 * p.gamma ** p.ell
        assert p.delta1 == p.delta2 == 0.05 and p.delta3 == 0.1
        assert p.nu == pytest.approx(1 / p.alpha)
        assert p.eta * (1 - p.gamma) == pytest.approx(1 / p.alpha)
        assert p.thinning_period == D.thinning_period(3, 0.05)
        for name in ("ell", "m", "thinning_period", "coverage_samples", "expert_count", "explore_count"):
            value = getattr(p, name)
            assert isinstance(value, int) and value > 0, name

    def test_ell_is_log_gamma_ceiling(self):
        p = plan_parameters(1.0, 0.5, 2, 2, 1, 1, 0.1, 1.0, 0.0)
        g = mpmath.mpf(39) / 40
        assert p.ell == int(mpmath.ceil(mpmath.log((1 - g) / (4 * 20)) / mpmath.log(g)))

    def test_eta_prime(self):
        p = plan_parameters(1.0, 0.5, 2, 2, 1, 1, 0.1, 1.0, 0.0)
        want = (p.eta * (1 - p.gamma) ** 2 / 2 - p.gamma ** p.ell) / p.gamma
        assert p.eta_prime == pytest.approx(want, rel=1e-9)
        assert p.eta_prime > 0

    def test_gamma_near_one_stays_finite(self):
        p = plan_parameters(0.01, 0.1, 10, 4, 5, 5, 0.001, 50.0, 0.99)
        assert 0 < p.gamma < 1 and p.ell > 0 and math.isfinite(p.explore_count)

    @pytest.mark.parametrize("kwargs", [
        dict(epsilon=0.0), dict(delta=1.0), dict(lambda2=1.0), dict(beta=0.0), dict(p_min=0.0),
    ])
    def test_bad_inputs(self, kwargs):
        args = dict(epsilon=1.0, delta=0.5, num_states=2, num_actions=2, t_expert=1, t_explore=1,
                    p_min=0.1, beta=1.0, lambda2=0.0)
        args.update(kwargs)
        with pytest.raises(ValueError):
            plan_parameters(**args)

    def test_infeasible_discount(self):
        with pytest.raises(BoundPreconditionError):
            plan_parameters(1.0, 0.5, 2, 2, 1, 1, 0.1, 0.01, 0.0)

    def test_monotone_budgets(self):
        counts = ("ell", "m", "expert_count", "coverage_steps", "explore_count")

        def plan(eps=0.5, t=1, S=3, A=2):
            return plan_parameters(eps, 0.2, S, A, t, 2, 0.05, 1.0, 0.2)

        def non_decreasing(seq):
            for name in counts:
                vals = [getattr(p, name) for p in seq]
                assert all(a <= b for a, b in zip(vals, vals[1:])), (name, vals)

        non_decreasing([plan(eps=e) for e in (1.0, 0.8, 0.5, 0.3, 0.2)])
        non_decreasing([plan(t=t) for t in (1, 2, 3, 5)])
        non_decreasing([plan(S=s) for s in (2, 3, 5, 8)])
        non_decreasing([plan(A=a) for a in (2, 3, 4)])

    def test_ledger_round_trip(self):
        p = plan_parameters(0.7, 0.3, 3, 2, 2, 2, 0.05, 1.2, 0.4)
        text = dumps_ledger(p)
        assert loads_ledger(text) == p
        assert "ceil(log_gamma" in text
