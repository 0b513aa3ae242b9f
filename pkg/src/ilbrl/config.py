"""Declarative experiment configuration (TOML) with field-level validation."""

from __future__ import annotations

import hashlib
import json
import sys
import zlib
from dataclasses import asdict, dataclass, field, fields

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

STAGES = ("generate-data", "label-rewards", "train", "evaluate-offline", "select", "report", "verify-bounds",
          "plan-parameters")


class ConfigError(ValueError):
    def __init__(self, section, name, constraint):
        super().__init__(f"config field [{section}].{name}: {constraint}")
        self.section = section
        self.name = name
        self.constraint = constraint


@dataclass
class PipelineSection:
    seed: int = 0
    stages: list = field(default_factory=lambda: ["generate-data", "label-rewards", "train",
                                                  "evaluate-offline", "select", "report"])


@dataclass
class MdpSection:
    states: int = 6
    actions: int = 3
    discount: float = 0.9
    concentration: float = 1.0


@dataclass
class DataSection:
    expert_episodes: int = 40
    explore_episodes: int = 300
    horizon: int = 20
    train_fraction: float = 0.5
    ope_fraction: float = 0.8


@dataclass
class SolverSection:
    kind: str = "phased-q"
    gammas: list = field(default_factory=lambda: [0.5, 0.9])
    ell: int = 30
    m: int = 0
    policy_seeds: int = 3


@dataclass
class OpeSection:
    learning_rates: list = field(default_factory=lambda: [0.02, 0.1])
    target_updates: list = field(default_factory=lambda: [0.1])
    expert_fractions: list = field(default_factory=list)
    passes: int = 60
    batch_size: int = 32
    lr_decay: float = 0.05
    convergence_tol: float = 1e-4
    known_policies: int = 3
    min_gap: float = 0.1
    eval_seeds: int = 2


@dataclass
class SelectionSection:
    eval_seeds: int = 2


@dataclass
class StatsSection:
    n_boot: int = 2000
    level: float = 0.95
    thresholds: int = 41


@dataclass
class BoundsSection:
    bound: str = "L1"
    trials: int = 100
    num_states: int = 5
    num_actions: int = 2
    discount: float = 0.9
    mdp_seed: int = -1
    m: int = 200
    ell: int = 40
    eta_prime: float = 0.25
    delta2: float = 0.1
    expert_count: int = 2000
    nu: float = 0.1
    policies_per_trial: int = 5


@dataclass
class PlanSection:
    epsilon: float = 1.0
    delta: float = 0.5
    states: int = 2
    actions: int = 2
    t_expert: int = 1
    t_explore: int = 1
    p_min: float = 0.1
    beta: float = 1.0
    lambda2: float = 0.0


SECTIONS = {
    "pipeline": PipelineSection, "mdp": MdpSection, "data": DataSection, "solver": SolverSection,
    "ope": OpeSection, "selection": SelectionSection, "stats": StatsSection, "bounds": BoundsSection,
    "plan": PlanSection,
}


@dataclass
class Config:
    pipeline: PipelineSection = field(default_factory=PipelineSection)
    mdp: MdpSection = field(default_factory=MdpSection)
    data: DataSection = field(default_factory=DataSection)
    solver: SolverSection = field(default_factory=SolverSection)
    ope: OpeSection = field(default_factory=OpeSection)
    selection: SelectionSection = field(default_factory=SelectionSection)
    stats: StatsSection = field(default_factory=StatsSection)
    bounds: BoundsSection = field(default_factory=BoundsSection)
    plan: PlanSection = field(default_factory=PlanSection)

    def to_dict(self):
        return asdict(self)

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _coerce(section, name, default, value):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise ConfigError(section, name, f"expected {type(default).__name__}, got {value!r}")
    return value


def _check(cond, section, name, constraint):
    if not cond:
        raise ConfigError(section, name, constraint)


def validate(cfg: Config):
    p = cfg.pipeline
    for s in p.stages:
        _check(s in STAGES, "pipeline", "stages", f"unknown stage {s!r}; choose from {', '.join(STAGES)}")
    m = cfg.mdp
    _check(m.states >= 2, "mdp", "states", "must be at least 2")
    _check(m.actions >= 2, "mdp", "actions", "must be at least 2")
    _check(0 <= m.discount < 1, "mdp", "discount", "must lie in [0, 1)")
    _check(m.concentration > 0, "mdp", "concentration", "must be positive")
    d = cfg.data
    _check(d.expert_episodes >= 1, "data", "expert_episodes", "must be at least 1")
    _check(d.explore_episodes >= 1, "data", "explore_episodes", "must be at least 1")
    _check(d.horizon >= 1, "data", "horizon", "must be at least 1")
    _check(0 < d.train_fraction < 1, "data", "train_fraction", "must lie in (0, 1)")
    _check(0 < d.ope_fraction < 1, "data", "ope_fraction", "must lie in (0, 1)")
    s = cfg.solver
    _check(s.kind in ("phased-q", "exact"), "solver", "kind", "must be 'phased-q' or 'exact'")
    _check(len(s.gammas) >= 1 and all(isinstance(g, (int, float)) and 0 <= g < 1 for g in s.gammas),
           "solver", "gammas", "must be a non-empty list of values in [0, 1)")
    _check(s.ell >= 1, "solver", "ell", "must be at least 1")
    _check(s.m >= 0, "solver", "m", "must be non-negative (0 = use all samples)")
    _check(s.policy_seeds >= 1, "solver", "policy_seeds", "must be at least 1")
    o = cfg.ope
    _check(len(o.learning_rates) >= 1 and all(isinstance(v, (int, float)) and v > 0 for v in o.learning_rates),
           "ope", "learning_rates", "must be a non-empty list of positive values")
    _check(len(o.target_updates) >= 1 and all(isinstance(v, (int, float)) and 0 < v <= 1 for v in o.target_updates),
           "ope", "target_updates", "must be a non-empty list of values in (0, 1]")
    _check(all(isinstance(v, (int, float)) and 0 <= v <= 1 for v in o.expert_fractions),
           "ope", "expert_fractions", "values must lie in [0, 1]")
    _check(o.passes >= 1, "ope", "passes", "must be at least 1")
    _check(o.batch_size >= 1, "ope", "batch_size", "must be at least 1")
    _check(o.lr_decay >= 0, "ope", "lr_decay", "must be non-negative")
    _check(o.convergence_tol > 0, "ope", "convergence_tol", "must be positive")
    _check(o.known_policies >= 2, "ope", "known_policies", "must be at least 2")
    _check(o.min_gap >= 0, "ope", "min_gap", "must be non-negative")
    _check(o.eval_seeds >= 1, "ope", "eval_seeds", "must be at least 1")
    _check(cfg.selection.eval_seeds >= 1, "selection", "eval_seeds", "must be at least 1")
    st = cfg.stats
    _check(st.n_boot >= 1, "stats", "n_boot", "must be at least 1")
    _check(0 < st.level < 1, "stats", "level", "must lie in (0, 1)")
    _check(st.thresholds >= 2, "stats", "thresholds", "must be at least 2")
    b = cfg.bounds
    _check(b.bound in ("L1", "L2", "L4", "L6", "L7"), "bounds", "bound", "must be one of L1, L2, L4, L6, L7")
    _check(b.trials >= 1, "bounds", "trials", "must be at least 1")
    _check(0 <= b.discount < 1, "bounds", "discount", "must lie in [0, 1)")
    _check(b.nu > 0, "bounds", "nu", "must be positive")
    _check(0 < b.delta2 < 1, "bounds", "delta2", "must lie in (0, 1)")
    pl = cfg.plan
    _check(0 < pl.epsilon <= 1, "plan", "epsilon", "must lie in (0, 1]")
    _check(0 < pl.delta < 1, "plan", "delta", "must lie in (0, 1)")
    _check(0 < pl.p_min <= 1, "plan", "p_min", "must lie in (0, 1]")
    _check(0 <= pl.lambda2 < 1, "plan", "lambda2", "must lie in [0, 1)")
    _check(pl.beta > 0, "plan", "beta", "must be positive")
    return cfg


def from_dict(raw: dict) -> Config:
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        name = sorted(unknown)[0]
        raise ConfigError(name, "*", f"unknown section; expected one of {', '.join(SECTIONS)}")
    parts = {}
    for sec, cls in SECTIONS.items():
        values = dict(raw.get(sec, {}))
        if not isinstance(values, dict):
            raise ConfigError(sec, "*", "must be a table")
        defaults = cls()
        known = {f.name for f in fields(cls)}
        for key in values:
            if key not in known:
                raise ConfigError(sec, key, f"unknown field; expected one of {', '.join(sorted(known))}")
        kwargs = {k: _coerce(sec, k, getattr(defaults, k), v) for k, v in values.items()}
        parts[sec] = cls(**kwargs)
    return validate(Config(**parts))


def loads(text: str) -> Config:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as err:
        raise ConfigError("*", "*", f"not valid TOML: {err}") from err
    return from_dict(raw)


def load(path) -> Config:
    with open(path, "rb") as fh:
        text = fh.read().decode()
    return loads(text)


def derive_seed(master, stage, *cell) -> int:
    """master -> stage -> cell seed; stages are keyed by the CRC32 of their name."""
    key = (zlib.crc32(stage.encode()),) + tuple(int(c) for c in cell)
    return int(np.random.SeedSequence(int(master), spawn_key=key).generate_state(1)[0])
