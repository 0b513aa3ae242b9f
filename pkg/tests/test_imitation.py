import json

import numpy as np
import pytest

from ilbrl import data as D
from ilbrl import imitation as I
from ilbrl import mdp as M
from ilbrl.bounds import lemma6_intrinsic_floor, lemma7_extrinsic_floor


def expert_data(m, expert, visits, seed, chunk=2000):
    # grow the rollout until every expert pair is seen often enough
    n = chunk
    while True:
        d = D.rollout(m, expert, n, seed)
        if d.pair_counts()[np.arange(m.num_states), expert.action_of].min() >= visits:
            return d
        n *= 2


def slippery_chain():
    # action 0 steps right, action 1 steps left; 10% of moves land uniformly at random
    S = 4
    P = np.full((S, 2, S), 0.1 / S)
    for s in range(S):
        P[s, 0, min(s + 1, S - 1)] += 0.9
        P[s, 1, max(s - 1, 0)] += 0.9
    R = np.zeros((S, 2))
    R[2, 0] = R[3, 1] = 1.0
    return M.TabularMdp(P, R, np.full(S, 1 / S), 0.9)


def two_state():
    # action a moves to state a with probability 0.8; reward only in state 0
    P = np.zeros((2, 2, 2))
    for s in range(2):
        P[s, 0] = [0.8, 0.2]
        P[s, 1] = [0.2, 0.8]
    R = np.array([[1.0, 1.0], [0.0, 0.0]])
    return M.TabularMdp(P, R, np.array([0.5, 0.5]), 0.9)


class TestIntrinsicReward:
    def setup_method(self):
        self.m = M.random_mdp(4, 3, 0)
        self.de = D.rollout(self.m, M.DeterministicPolicy([0, 1, 2, 0]), 500, seed=1)

    def test_present_pairs(self):
        r = I.intrinsic_reward(self.de, 4, 3)
        assert np.array_equal(r.table, self.de.pairs().astype(float))
        assert r.table[1, 1] == 1.0

    def test_absent_pairs(self):
        r = I.intrinsic_reward(self.de, 4, 3)
        assert r.table[1, 0] == 0.0 and r.support_size == 4

    def test_empty(self):
        assert not np.asarray(I.intrinsic_reward(D.TransitionDataset.empty(4, 3), 4, 3)).any()

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            I.intrinsic_reward(self.de, 2, 3)

    def test_table_is_binary(self):
        with pytest.raises(ValueError):
            I.IntrinsicReward(np.full((2, 2), 0.5))


class TestRun:
    def test_empty_expert_data_gives_tie_policy(self):
        m = M.random_mdp(5, 3, 2)
        dx = D.rollout(m, M.StochasticPolicy.uniform(5, 3), 3000, seed=0, source="exploratory")
        for solver in (I.ExactSolver(m), I.PhasedQSolver(0.9, 10)):
            pi = I.run_ilbrl(D.TransitionDataset.empty(5, 3), dx, solver=solver)
            assert pi.action_of.tolist() == [0] * 5

    def test_recovers_covered_expert(self):
        for seed in range(10):
            m = M.random_mdp(6, 3, seed)
            expert = M.greedy_policy(M.value_iteration(m))
            de = expert_data(m, expert, 5, seed)
            dx = D.rollout(m, M.StochasticPolicy.uniform(6, 3), 20_000, seed=seed + 100, source="exploratory")
            assert I.run_ilbrl(de, dx, solver=I.ExactSolver(m)) == expert
            assert I.run_ilbrl(de, dx, solver=I.PhasedQSolver(0.9, 40)) == expert

    def test_chain_occupancy_matches(self):
        m = slippery_chain()
        expert = M.DeterministicPolicy([0, 0, 0, 1])
        de = expert_data(m, expert, 20, 0, chunk=500)
        dx = D.rollout(m, M.StochasticPolicy.uniform(4, 2), 2000, seed=1, source="exploratory")
        pi = I.run_ilbrl(de, dx, solver=I.ExactSolver(m))
        assert I.occupancy_tv(m, expert, pi) == 0.0

    def test_needs_solver_or_parameters(self):
        d = D.TransitionDataset.empty(2, 2)
        with pytest.raises(ValueError):
            I.run_ilbrl(d, d)

    def test_solver_seed_is_reproducible(self):
        m = M.random_mdp(4, 2, 3)
        de = expert_data(m, M.greedy_policy(M.value_iteration(m)), 5, 0, chunk=200)
        dx = D.rollout(m, M.StochasticPolicy.uniform(4, 2), 4000, seed=2, source="exploratory")
        a = I.run_ilbrl(de, dx, solver=I.PhasedQSolver(0.9, 20, seed=7))
        assert a == I.run_ilbrl(de, dx, solver=I.PhasedQSolver(0.9, 20, seed=7))


class TestMetrics:
    def test_inside_support(self):
        m = M.random_mdp(3, 2, 0)
        pi = M.DeterministicPolicy([1, 0, 1])
        r = np.zeros((3, 2))
        r[[0, 1, 2], [1, 0, 1]] = 1
        assert I.intrinsic_average_reward(m, pi, r) == pytest.approx(1.0)
        assert I.intrinsic_average_reward(m, M.DeterministicPolicy([0, 1, 0]), r) == 0.0

    def test_partial_mass(self):
        P = np.array([[[0.7, 0.3]], [[0.7, 0.3]]])
        m = M.TabularMdp(P, np.zeros((2, 1)), np.array([1.0, 0.0]), 0.9)
        r = I.IntrinsicReward(np.array([[1.0], [0.0]]))
        assert I.intrinsic_average_reward(m, M.DeterministicPolicy([0, 0]), r) == pytest.approx(0.7)

    def test_regret(self):
        m = two_state()
        best, worst = M.DeterministicPolicy([0, 0]), M.DeterministicPolicy([1, 1])
        assert I.imitation_regret(m, best, best) == 0.0
        assert I.imitation_regret(m, best, worst) == pytest.approx(0.8 - 0.2)

    def test_periodic_chain_is_rejected(self):
        P = np.zeros((2, 1, 2))
        P[0, 0, 1] = P[1, 0, 0] = 1.0
        m = M.TabularMdp(P, np.zeros((2, 1)), np.array([1.0, 0.0]), 0.9)
        with pytest.raises(M.ErgodicityError):
            I.imitation_regret(m, M.DeterministicPolicy([0, 0]), M.DeterministicPolicy([0, 0]))

    def test_regret_bounded_by_occupancy_tv(self):
        # rewards in [0, 1], so the true reward is a valid witness function
        for seed in range(30):
            rng = np.random.default_rng(seed)
            m = M.random_mdp(5, 3, rng)
            a, b = (M.DeterministicPolicy(rng.integers(0, 3, 5)) for _ in range(2))
            assert abs(I.imitation_regret(m, a, b)) <= I.occupancy_tv(m, a, b) + 1e-12

    def test_regret_bounded_by_support_loss(self):
        for seed in range(40):
            rng = np.random.default_rng(seed)
            m = M.random_mdp(5, 2, rng)
            expert = M.greedy_policy(M.value_iteration(m))
            P_e = M.policy_matrix(m, expert)
            t_e = M.mixing_time(P_e)
            r_hat = I.intrinsic_reward(D.rollout(m, expert, int(rng.integers(5, 200)), rng), 5, 2)
            for _ in range(5):
                pi = M.DeterministicPolicy(rng.integers(0, 2, 5))
                eps = 1 - I.intrinsic_average_reward(m, pi, r_hat)
                mu_e, mu = M.average_reward(m, expert), M.average_reward(m, pi)
                assert mu >= lemma7_extrinsic_floor(eps, mu_e, t_e) - 1e-12
                assert mu_e - mu <= eps * (1 + 4 * t_e) + 1e-12

    def test_run_record(self):
        m = two_state()
        de = D.rollout(m, M.DeterministicPolicy([0, 0]), 50, seed=0)
        rec = I.evaluate_run(m, M.DeterministicPolicy([0, 0]), M.DeterministicPolicy([0, 1]), de,
                             seeds={"data": 0})
        out = json.loads(rec.to_json())
        assert out["seeds"] == {"data": 0}
        assert out["regret"] == pytest.approx(out["expert_average_reward"] - out["average_reward"])
        assert 0 <= out["intrinsic_average_reward"] <= 1 and 0 <= out["tv"] <= 1


class TestScaling:
    def test_median_tv_non_increasing_in_expert_data(self):
        grid = [5, 20, 80, 320, None]
        tvs = {g: [] for g in grid}
        for seed in range(50):
            ss = np.random.SeedSequence(500 + seed).spawn(2)
            m = M.random_mdp(8, 3, ss[0])
            expert = M.greedy_policy(M.value_iteration(m))
            de = expert_data(m, expert, 50, ss[1])
            dx = D.TransitionDataset.empty(8, 3)
            for g in grid:
                sub = de if g is None else de.take(np.arange(g))
                tvs[g].append(I.occupancy_tv(m, expert, I.run_ilbrl(sub, dx, solver=I.ExactSolver(m))))
        med = [np.median(tvs[g]) for g in grid]
        assert all(a >= b for a, b in zip(med, med[1:])), med
        assert np.mean(np.array(tvs[None]) <= 0.05) >= 0.9

    def test_expert_meets_intrinsic_floor(self):
        m = M.random_mdp(4, 2, 11)
        expert = M.greedy_policy(M.value_iteration(m))
        t_e = M.mixing_time(M.policy_matrix(m, expert))
        n = 400
        floor, fail = lemma6_intrinsic_floor(n, 4, t_e, 0.1)
        misses = 0
        for seed in range(200):
            r_hat = I.intrinsic_reward(D.rollout(m, expert, n, seed), 4, 2)
            misses += I.intrinsic_average_reward(m, expert, r_hat) < floor
        p = min(fail, 1.0)
        assert misses / 200 <= p + 3 * np.sqrt(p * (1 - p) / 200)
