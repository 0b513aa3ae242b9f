"""Finite MDPs and the Markov chains induced by policies on them."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from scipy.sparse.csgraph import connected_components

SUM_TOL = 1e-12
EIGEN_GAP = 1e-8
MIX_THRESHOLD = 0.25


class ErgodicityError(ValueError):
    """The chain induced by a policy is not irreducible and aperiodic."""


class ConvergenceError(RuntimeError):
    def __init__(self, message, residual):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


class MixingTimeError(RuntimeError):
    def __init__(self, cap, distance):
        super().__init__(f"chain not mixed after {cap} steps (max TV {distance:.4f})")
        self.cap = cap
        self.distance = distance


class DistinctEigenvalueError(ValueError):
    """P_pi has repeated eigenvalues, so its eigenvector matrix is not well defined."""


def _frozen(x):
    a = np.array(x, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TabularMdp:
    """A finite discounted MDP.

    ``transition[s, a, s']`` is P(s' | s, a), ``reward[s, a]`` lies in [0, 1]
    and ``initial`` is the start-state distribution.
    """

    transition: np.ndarray
    reward: np.ndarray
    initial: np.ndarray
    discount: float

    def __post_init__(self):
        P = _frozen(self.transition)
        R = _frozen(self.reward)
        p0 = _frozen(self.initial)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", R)
        object.__setattr__(self, "initial", p0)
        object.__setattr__(self, "discount", float(self.discount))

        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValueError(f"transition must have shape (S, A, S), got {P.shape}")
        S, A, _ = P.shape
        if S < 1 or A < 1:
            raise ValueError("need at least one state and one action")
        if R.shape != (S, A):
            raise ValueError(f"reward must have shape {(S, A)}, got {R.shape}")
        if p0.shape != (S,):
            raise ValueError(f"initial must have shape {(S,)}, got {p0.shape}")
        if (P < 0).any() or np.abs(P.sum(axis=2) - 1).max() > SUM_TOL:
            raise ValueError("every transition row must be a probability vector")
        if (R < 0).any() or (R > 1).any():
            raise ValueError("rewards must lie in [0, 1]")
        if (p0 < 0).any() or abs(p0.sum() - 1) > SUM_TOL:
            raise ValueError("initial distribution must sum to 1")
        if not 0 <= self.discount < 1:
            raise ValueError(f"discount must lie in [0, 1), got {self.discount}")

    @property
    def num_states(self):
        return self.transition.shape[0]

    @property
    def num_actions(self):
        return self.transition.shape[1]

    def with_reward(self, reward):
        return TabularMdp(self.transition, reward, self.initial, self.discount)

    def with_discount(self, discount):
        return TabularMdp(self.transition, self.reward, self.initial, discount)


@dataclass(frozen=True)
class DeterministicPolicy:
    action_of: np.ndarray

    def __post_init__(self):
        a = np.array(self.action_of, dtype=np.int64)
        if a.ndim != 1 or (a < 0).any():
            raise ValueError("action_of must be a 1-D array of non-negative action indices")
        a.setflags(write=False)
        object.__setattr__(self, "action_of", a)

    @property
    def num_states(self):
        return self.action_of.shape[0]

    def __call__(self, s):
        return int(self.action_of[s])

    def probs(self, num_actions):
        out = np.zeros((self.num_states, num_actions))
        out[np.arange(self.num_states), self.action_of] = 1.0
        return out

    def __eq__(self, other):
        return isinstance(other, DeterministicPolicy) and np.array_equal(self.action_of, other.action_of)

    def __hash__(self):
        return hash(self.action_of.tobytes())


@dataclass(frozen=True)
class StochasticPolicy:
    table: np.ndarray

    def __post_init__(self):
        t = _frozen(self.table)
        if t.ndim != 2 or (t < 0).any() or np.abs(t.sum(axis=1) - 1).max() > SUM_TOL:
            raise ValueError("policy table rows must be probability vectors")
        object.__setattr__(self, "table", t)

    @property
    def num_states(self):
        return self.table.shape[0]

    def probs(self, num_actions):
        if self.table.shape[1] != num_actions:
            raise ValueError("policy and MDP disagree on the number of actions")
        return np.array(self.table)

    def argmax_policy(self):
        """Most probable action per state (lowest index on ties)."""
        return DeterministicPolicy(np.argmax(self.table, axis=1))

    @classmethod
    def uniform(cls, num_states, num_actions):
        return cls(np.full((num_states, num_actions), 1.0 / num_actions))


Policy = Union[DeterministicPolicy, StochasticPolicy]


@dataclass
class ValueTable:
    """State-action values plus solver diagnostics."""

    q: np.ndarray
    iterations: int = 0
    residual: float = 0.0
    concentration: Optional[float] = None
    extra: dict = field(default_factory=dict)

    def state_values(self, policy=None):
        if policy is None:
            return self.q.max(axis=1)
        if isinstance(policy, DeterministicPolicy):
            return self.q[np.arange(self.q.shape[0]), policy.action_of]
        return (self.q * policy.probs(self.q.shape[1])).sum(axis=1)


def check_policy(mdp: TabularMdp, policy: Policy):
    if policy.num_states != mdp.num_states:
        raise ValueError(f"policy covers {policy.num_states} states, MDP has {mdp.num_states}")
    if isinstance(policy, DeterministicPolicy) and (policy.action_of >= mdp.num_actions).any():
        raise ValueError("policy selects an action outside the MDP's action set")


def policy_matrix(mdp: TabularMdp, policy: Policy) -> np.ndarray:
    """Transition matrix P_pi of the chain induced on states."""
    check_policy(mdp, policy)
    pi = policy.probs(mdp.num_actions)
    return np.einsum("sa,sat->st", pi, mdp.transition)


def policy_reward(mdp: TabularMdp, policy: Policy, reward=None) -> np.ndarray:
    R = mdp.reward if reward is None else np.asarray(reward, dtype=float)
    return (policy.probs(mdp.num_actions) * R).sum(axis=1)


def bellman_backup(mdp: TabularMdp, q, reward=None):
    """One application of the Bellman optimality operator."""
    R = mdp.reward if reward is None else reward
    return R + mdp.discount * (mdp.transition @ q.max(axis=1))


def value_iteration(mdp: TabularMdp, tol=1e-10, max_iters=100_000, reward=None) -> ValueTable:
    """Optimal Q by value iteration from Q = 0.

    Stops once the sup-norm Bellman residual is at most ``tol``, so the
    greedy policy is ``tol / (1 - gamma)``-optimal.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    S, A = mdp.num_states, mdp.num_actions
    q = np.zeros((S, A))
    residual = np.inf
    for it in range(1, max_iters + 1):
        q_next = bellman_backup(mdp, q, reward)
        residual = float(np.abs(q_next - q).max())
        q = q_next
        if residual <= tol:
            # residual is measured on the last step; q already satisfies it
            final = float(np.abs(bellman_backup(mdp, q, reward) - q).max())
            return ValueTable(q, iterations=it, residual=final)
    raise ConvergenceError(f"value iteration did not converge in {max_iters} iterations", residual)


def policy_value_discounted(mdp: TabularMdp, policy: Policy, reward=None) -> ValueTable:
    """Exact discounted values of a policy, V = r_pi + gamma P_pi V."""
    P = policy_matrix(mdp, policy)
    r = policy_reward(mdp, policy, reward)
    S = mdp.num_states
    v = np.linalg.solve(np.eye(S) - mdp.discount * P, r)
    R = mdp.reward if reward is None else np.asarray(reward, dtype=float)
    q = R + mdp.discount * (mdp.transition @ v)
    residual = float(np.abs(r + mdp.discount * P @ v - v).max())
    if residual > 1e-10:
        raise RuntimeError(f"policy evaluation residual {residual:.3e} exceeds 1e-10")
    return ValueTable(q, residual=residual, extra={"v": v})


def greedy_policy(q) -> DeterministicPolicy:
    """Per-state argmax; ``np.argmax`` already breaks ties towards index 0."""
    q = q.q if isinstance(q, ValueTable) else np.asarray(q)
    return DeterministicPolicy(np.argmax(q, axis=1))


def tv_distance(p1, p2) -> float:
    p1 = np.asarray(p1, dtype=float)
    p2 = np.asarray(p2, dtype=float)
    if p1.shape != p2.shape:
        raise ValueError(f"distribution shapes differ: {p1.shape} vs {p2.shape}")
    return float(0.5 * np.abs(p1 - p2).sum())


def is_ergodic(chain) -> bool:
    """Irreducible and aperiodic, i.e. some power of the chain is strictly positive."""
    P = np.asarray(chain)
    n = P.shape[0]
    n_comp, _ = connected_components(P > 0, directed=True, connection="strong")
    if n_comp != 1:
        return False
    # Wielandt: a primitive n x n matrix has M^k > 0 for k = (n-1)^2 + 1
    k = (n - 1) ** 2 + 1
    M = (P > 0).astype(float)
    acc = np.eye(n)
    while k:
        if k & 1:
            acc = ((acc @ M) > 0).astype(float)
        M = ((M @ M) > 0).astype(float)
        k >>= 1
    return bool((acc > 0).all())


def steady_state(chain, check=True) -> np.ndarray:
    """Stationary distribution of an ergodic chain via a least-squares solve of
    (I - P^T) rho = 0 with sum(rho) = 1."""
    P = np.asarray(chain, dtype=float)
    n = P.shape[0]
    if P.shape != (n, n):
        raise ValueError("chain must be square")
    if check and not is_ergodic(P):
        raise ErgodicityError("chain is reducible or periodic")
    if n > 500:
        rho = _power_steady_state(P)
    else:
        M = np.vstack([np.eye(n) - P.T, np.ones((1, n))])
        b = np.zeros(n + 1)
        b[-1] = 1.0
        rho = np.linalg.lstsq(M, b, rcond=None)[0]
    rho = np.clip(rho, 0.0, None)
    rho = rho / rho.sum()
    if check and (rho <= 0).any():
        raise ErgodicityError("zero stationary mass on some state")
    return rho


def _power_steady_state(P, tol=1e-13, max_iters=1_000_000):
    rho = np.full(P.shape[0], 1.0 / P.shape[0])
    for _ in range(max_iters):
        nxt = rho @ P
        if np.abs(nxt - rho).max() < tol:
            return nxt
        rho = nxt
    raise ErgodicityError("power iteration did not converge; chain may be periodic")


def mixing_time(chain, rho=None, cap=100_000) -> int:
    """Smallest t with max_s TV(e_s^T P^t, rho) <= 1/4, by exact matrix powers."""
    P = np.asarray(chain, dtype=float)
    if rho is None:
        rho = steady_state(P)
    Pt = np.array(P)
    dist = np.inf
    for t in range(1, cap + 1):
        dist = 0.5 * np.abs(Pt - rho).sum(axis=1).max()
        if dist <= MIX_THRESHOLD:
            return t
        Pt = Pt @ P
    raise MixingTimeError(cap, dist)


def worst_case_tv(chain, rho, t) -> float:
    """max_s TV(e_s^T P^t, rho)."""
    Pt = np.linalg.matrix_power(np.asarray(chain, dtype=float), t)
    return float(0.5 * np.abs(Pt - rho).sum(axis=1).max())


def state_action_distribution(mdp: TabularMdp, policy: Policy, rho=None) -> np.ndarray:
    if rho is None:
        rho = steady_state(policy_matrix(mdp, policy))
    return rho[:, None] * policy.probs(mdp.num_actions)


def average_reward(mdp: TabularMdp, policy: Policy, reward=None) -> float:
    """Long-run per-step reward under the stationary distribution of the policy's chain."""
    rho = steady_state(policy_matrix(mdp, policy))
    return float(rho @ policy_reward(mdp, policy, reward))


def second_eigenvalue_modulus(chain) -> float:
    lam = np.linalg.eigvals(np.asarray(chain, dtype=float))
    mags = np.sort(np.abs(lam))[::-1]
    return float(mags[1]) if mags.size > 1 else 0.0


@dataclass(frozen=True)
class ChainAnalysis:
    stationary: np.ndarray
    state_action: np.ndarray
    mixing_time: int
    lambda2: float
    eigenvectors: np.ndarray
    kappa: float
    beta: float
    p_min: float


def chain_analysis(mdp: TabularMdp, policy: Policy, cap=100_000) -> ChainAnalysis:
    """Spectral and mixing summary of the chain a policy induces.

    ``kappa`` is the 2-norm condition number of the right-eigenvector matrix
    and ``beta = kappa * ||r_pi||_2``. Raises DistinctEigenvalueError when two
    eigenvalues are closer than 1e-8.
    """
    P = policy_matrix(mdp, policy)
    rho = steady_state(P)
    t = mixing_time(P, rho, cap=cap)
    lam, vecs = np.linalg.eig(P)
    order = np.argsort(-np.abs(lam), kind="stable")
    lam, vecs = lam[order], vecs[:, order]
    S = lam.size
    if S > 1:
        gaps = np.abs(lam[:, None] - lam[None, :]) + np.diag(np.full(S, np.inf))
        if gaps.min() < EIGEN_GAP:
            raise DistinctEigenvalueError(
                f"P_pi has repeated eigenvalues (min gap {gaps.min():.2e})"
            )
    sv = np.linalg.svd(vecs, compute_uv=False)
    kappa = float(sv[0] / sv[-1])
    r = policy_reward(mdp, policy)
    sa = state_action_distribution(mdp, policy, rho)
    return ChainAnalysis(
        stationary=rho,
        state_action=sa,
        mixing_time=t,
        lambda2=float(np.abs(lam[1])) if S > 1 else 0.0,
        eigenvectors=vecs,
        kappa=kappa,
        beta=kappa * float(np.linalg.norm(r)),
        p_min=float(sa.min()),
    )


def random_mdp(num_states, num_actions, rng, discount=0.9, concentration=1.0) -> TabularMdp:
    """Dense Dirichlet transitions (hence ergodic under every policy), uniform rewards."""
    rng = np.random.default_rng(rng)
    P = rng.dirichlet(np.full(num_states, concentration), size=(num_states, num_actions))
    R = rng.random((num_states, num_actions))
    p0 = rng.dirichlet(np.ones(num_states))
    # Dirichlet draws can sum to 1 +- a few ulp; renormalise to keep the 1e-12 invariant loose
    P = P / P.sum(axis=2, keepdims=True)
    return TabularMdp(P, R, p0 / p0.sum(), discount)


# -- text serialisation ---------------------------------------------------------

_HEADER = "tabular-mdp v1"


def dumps_mdp(mdp: TabularMdp) -> str:
    def row(values):
        return " ".join(repr(float(v)) for v in np.ravel(values))

    return "\n".join([
        f"# {_HEADER}",
        f"states {mdp.num_states}",
        f"actions {mdp.num_actions}",
        f"discount {mdp.discount!r}",
        f"initial {row(mdp.initial)}",
        f"reward {row(mdp.reward)}",
        f"transition {row(mdp.transition)}",
        "",
    ])


def loads_mdp(text: str) -> TabularMdp:
    fields = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, rest = line.partition(" ")
        fields[key] = rest.split()
    missing = {"states", "actions", "discount", "initial", "reward", "transition"} - fields.keys()
    if missing:
        raise ValueError(f"MDP file is missing fields: {sorted(missing)}")
    S = int(fields["states"][0])
    A = int(fields["actions"][0])
    floats = {k: np.array([float(x) for x in fields[k]]) for k in ("initial", "reward", "transition")}
    return TabularMdp(
        floats["transition"].reshape(S, A, S),
        floats["reward"].reshape(S, A),
        floats["initial"],
        float(fields["discount"][0]),
    )


def save_mdp(mdp: TabularMdp, path):
    with open(path, "w") as fh:
        fh.write(dumps_mdp(mdp))


def load_mdp(path) -> TabularMdp:
    with open(path) as fh:
        return loads_mdp(fh.read())
