"""Config-driven experiment runner.

Stages read and write plain files in the output directory, so each one can be
rerun on its own against earlier artifacts. Seeds are derived as
master -> stage -> cell (see ``config.derive_seed``); cells run in a process
pool and are merged by index, so results do not depend on ``--workers``.
"""

from __future__ import annotations

import argparse
import itertools
import json
import os
import sys
import traceback
from dataclasses import asdict, replace

import numpy as np

from . import __version__, config as config_mod
from . import data, imitation, mdp as mdp_mod, ope, phased_q, stats
from .bounds import VerifierConfig, verify_bound

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2


class StageError(RuntimeError):
    pass


def _versions():
    import matplotlib
    import scipy

    return {"ilbrl": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "matplotlib": matplotlib.__version__}


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


class Run:
    """Shared state for one invocation: config, seed, output directory, workers."""

    def __init__(self, cfg: config_mod.Config, out, workers=1):
        self.cfg = cfg
        self.seed = cfg.pipeline.seed
        self.out = out
        self.workers = max(1, int(workers))
        self.provenance = {"config_hash": cfg.hash(), "seed": self.seed, "versions": _versions()}
        os.makedirs(out, exist_ok=True)

    def path(self, name):
        return os.path.join(self.out, name)

    def need(self, name):
        p = self.path(name)
        if not os.path.exists(p):
            raise StageError(f"missing input artifact {name}; run the stage that produces it first")
        return p

    def seed_for(self, stage, *cell):
        return config_mod.derive_seed(self.seed, stage, *cell)

    def write_json(self, name, payload):
        body = dict(_jsonable(payload))
        body["provenance"] = self.provenance
        with open(self.path(name), "w") as fh:
            fh.write(json.dumps(body, indent=2, sort_keys=True) + "\n")

    def read_json(self, name):
        with open(self.need(name)) as fh:
            return json.load(fh)

    def write_text(self, name, text, comment="#"):
        header = f"{comment} config_hash={self.provenance['config_hash']} seed={self.seed}\n"
        with open(self.path(name), "w") as fh:
            fh.write(header + text)

    def read_text(self, name):
        with open(self.need(name)) as fh:
            return "".join(ln for ln in fh if not ln.startswith("# config_hash="))

    def write_dataset(self, name, d):
        prov = {"config_hash": self.provenance["config_hash"], "seed": self.seed}
        data.save_dataset(d, self.path(name), provenance=prov)

    def read_dataset(self, name):
        return data.load_dataset(self.need(name))

    def read_mdp(self):
        return mdp_mod.loads_mdp(self.read_text("mdp.txt"))


# -- stages --------------------------------------------------------------------

def stage_generate(run: Run):
    c = run.cfg
    m = mdp_mod.random_mdp(c.mdp.states, c.mdp.actions, run.seed_for("mdp"), discount=c.mdp.discount,
                           concentration=c.mdp.concentration)
    expert = mdp_mod.greedy_policy(mdp_mod.value_iteration(m))
    uniform = mdp_mod.StochasticPolicy.uniform(m.num_states, m.num_actions)
    h = c.data.horizon
    d_e = data.rollout(m, expert, c.data.expert_episodes * h, run.seed_for("generate-data", 0), horizon=h,
                       source=data.EXPERT)
    d_x = data.rollout(m, uniform, c.data.explore_episodes * h, run.seed_for("generate-data", 1), horizon=h,
                       source=data.EXPLORATORY)
    d = data.shuffle_episodes(data.merge(d_e, d_x), run.seed_for("generate-data", 2))
    d_train, d_pe, d_final = data.split_dataset(d, c.data.train_fraction, c.data.ope_fraction)
    run.write_text("mdp.txt", mdp_mod.dumps_mdp(m))
    run.write_dataset("dataset.tsv", d)
    run.write_dataset("train.tsv", d_train)
    run.write_dataset("ope.tsv", d_pe)
    run.write_dataset("final.tsv", d_final)


def stage_label(run: Run):
    d_train = run.read_dataset("train.tsv")
    r_hat = imitation.intrinsic_reward(d_train.from_source("expert"), d_train.num_states, d_train.num_actions)
    rows = "\n".join("\t".join(repr(float(v)) for v in row) for row in r_hat.table) + "\n"
    run.write_text("intrinsic_reward.tsv", rows)
    run.write_dataset("labelled.tsv", d_train.with_rewards(r_hat.table))


def label_features(run: Run, path):
    from . import support

    with open(path) as fh:
        feats = support.loads_features(fh.read())
    rewards = support.label_dataset(feats)
    run.write_text("feature_rewards.txt", support.dumps_rewards(rewards))


def _train_cell(args):
    labelled, m, kind, gamma, ell, per_phase, seed = args
    reward = np.zeros((labelled.num_states, labelled.num_actions))
    reward[labelled.state, labelled.action] = labelled.reward
    if kind == "exact":
        solver = imitation.ExactSolver(m, gamma=gamma)
    else:
        solver = imitation.PhasedQSolver(gamma=gamma, ell=ell, m=per_phase or None, seed=seed)
    _, policy = solver(labelled, reward)
    return [int(a) for a in policy.action_of]


def _map(fn, cells, workers):
    if workers > 1 and len(cells) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, cells))
    return [fn(c) for c in cells]


def stage_train(run: Run):
    s = run.cfg.solver
    labelled = run.read_dataset("labelled.tsv")
    m = run.read_mdp()
    cells = [(labelled, m, s.kind, g, s.ell, s.m, run.seed_for("train", n, k))
             for n, g in enumerate(s.gammas) for k in range(s.policy_seeds)]
    flat = _map(_train_cell, cells, run.workers)
    K = s.policy_seeds
    candidates = [flat[n * K:(n + 1) * K] for n in range(len(s.gammas))]
    run.write_json("policies.json", {"hyperparameters": [{"gamma": g} for g in s.gammas],
                                     "candidates": candidates})


def _load_candidates(run):
    raw = run.read_json("policies.json")
    return raw["hyperparameters"], [[mdp_mod.DeterministicPolicy(p) for p in row] for row in raw["candidates"]]


def stage_evaluate(run: Run):
    o = run.cfg.ope
    m = run.read_mdp()
    d_pe = run.read_dataset("ope.tsv")
    d_f = run.read_dataset("final.tsv")
    known, truths, mus = ope.choose_known_policies(m, o.known_policies, o.min_gap, d_f,
                                                   run.seed_for("evaluate-offline", 0))
    fractions = o.expert_fractions or [None]
    grid = [ope.OpeConfig(learning_rate=lr, target_update=tau, expert_data_fraction=f, passes=o.passes,
                          batch_size=o.batch_size, lr_decay=o.lr_decay, convergence_tol=o.convergence_tol)
            for lr, tau, f in itertools.product(o.learning_rates, o.target_updates, fractions)]
    seeds = [run.seed_for("evaluate-offline", 1, i) for i in range(o.eval_seeds)]
    scores = ope.score_ope_grid(d_pe, d_f, known, truths, grid, seeds, m.discount, run.workers)
    phi = ope.pick_config(scores)
    run.write_json("ope_manifest.json", {
        "splits": {"ope": len(d_pe), "final": len(d_f)},
        "grid": [g.to_dict() for g in grid],
        "eval_seeds": seeds,
        "known_policies": [[int(a) for a in p.action_of] for p in known],
        "known_values": truths,
        "known_average_rewards": mus,
    })
    run.write_json("ope_scores.json", {"scores": [s.to_dict() for s in scores]})
    run.write_json("phi_star.json", {"config": phi.to_dict()})


def stage_select(run: Run):
    m = run.read_mdp()
    hps, candidates = _load_candidates(run)
    phi = ope.OpeConfig(**run.read_json("phi_star.json")["config"])
    d_pe = run.read_dataset("ope.tsv")
    d_f = run.read_dataset("final.tsv")
    seeds = [run.seed_for("select", i) for i in range(run.cfg.selection.eval_seeds)]
    sel = ope.select_policy(candidates, d_pe, d_f, phi, seeds, m.discount, run.workers)
    run.write_json("selection.json", {"phi_star": phi.to_dict(), "hyperparameter": hps[sel.best],
                                      "eval_seeds": seeds, **sel.to_dict()})


def stage_report(run: Run):
    from . import plotting

    st = run.cfg.stats
    m = run.read_mdp()
    hps, candidates = _load_candidates(run)
    j_expert = mdp_mod.average_reward(m, mdp_mod.greedy_policy(mdp_mod.value_iteration(m)))
    j_random = mdp_mod.average_reward(m, mdp_mod.StochasticPolicy.uniform(m.num_states, m.num_actions))
    names = [",".join(f"{k}={v}" for k, v in hp.items()) for hp in hps]
    scores = {name: [stats.normalized_score(mdp_mod.average_reward(m, p), j_random, j_expert) for p in row]
              for name, row in zip(names, candidates)}
    rows = []
    for n, name in enumerate(names):
        point, lo, hi = stats.stratified_bootstrap_iqm_ci([scores[name]], st.n_boot, st.level,
                                                          run.seed_for("report", n), run.workers)
        mean, mlo, mhi = stats.mean_normal_ci(scores[name], st.level)
        rows.append({"name": name, "point": point, "lo": lo, "hi": hi, "mean": mean, "mean_lo": mlo,
                     "mean_hi": mhi, "runs": len(scores[name])})
    everything = np.concatenate([np.asarray(v) for v in scores.values()])
    lo_t = min(0.0, float(everything.min()))
    hi_t = max(100.0, float(everything.max()))
    thresholds = np.linspace(lo_t, hi_t, st.thresholds)
    curves = {name: stats.performance_profile(v, thresholds) for name, v in scores.items()}
    run.write_text("summary.csv", stats.summary_csv(rows))
    run.write_text("profiles.csv", stats.profile_csv(thresholds, curves))
    tag = run.provenance["config_hash"]
    plotting.plot_profiles(thresholds, curves, run.path("profiles.png"), tag=tag)
    plotting.plot_intervals(rows, run.path("intervals.png"), tag=tag)
    payload = {"summary": rows, "expert_average_reward": j_expert, "random_average_reward": j_random}
    if os.path.exists(run.path("ope_scores.json")):
        sc = run.read_json("ope_scores.json")["scores"]
        errors = [s["rank_error"] for s in sc]
        labels = [f"lr={s['config']['learning_rate']},tau={s['config']['target_update']}" for s in sc]
        plotting.plot_rank_errors(labels, errors, run.path("rank_errors.png"), tag=tag)
        payload["rank_errors"] = errors
    if os.path.exists(run.path("selection.json")):
        payload["selected"] = run.read_json("selection.json")["hyperparameter"]
    run.write_json("report.json", payload)


def stage_verify(run: Run):
    b = run.cfg.bounds
    fields = asdict(b)
    fields["mdp_seed"] = None if b.mdp_seed < 0 else b.mdp_seed
    vc = VerifierConfig(seed=run.seed_for("verify-bounds"), **fields)
    rep = verify_bound(vc, workers=run.workers)
    run.write_json(f"bounds_{b.bound}.json", rep.to_dict())


def stage_plan(run: Run):
    p = run.cfg.plan
    params = phased_q.plan_parameters(p.epsilon, p.delta, p.states, p.actions, p.t_expert, p.t_explore,
                                      p.p_min, p.beta, p.lambda2)
    run.write_json("parameters.json", json.loads(phased_q.dumps_ledger(params)))


STAGE_FUNCS = {
    "generate-data": stage_generate,
    "label-rewards": stage_label,
    "train": stage_train,
    "evaluate-offline": stage_evaluate,
    "select": stage_select,
    "report": stage_report,
    "verify-bounds": stage_verify,
    "plan-parameters": stage_plan,
}


def run_pipeline(cfg: config_mod.Config, out, workers=1, stages=None) -> int:
    """Run ``stages`` (default: those declared in the config) and return an exit status."""
    run = Run(cfg, out, workers)
    stages = list(stages or cfg.pipeline.stages)
    done = []
    for name in stages:
        try:
            STAGE_FUNCS[name](run)
        except Exception as err:  # recorded, then reported through the exit status
            run.write_json("failure.json", {"stage": name, "error": type(err).__name__, "message": str(err),
                                            "completed_stages": done})
            print(f"stage {name} failed: {type(err).__name__}: {err}", file=sys.stderr)
            if os.environ.get("ILBRL_TRACEBACK"):
                traceback.print_exc()
            return EXIT_FAILED
        done.append(name)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="ilbrl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", metavar="PATH", help="TOML config; defaults apply when omitted")
        p.add_argument("--seed", type=int, help="master seed (overrides [pipeline].seed)")
        p.add_argument("--out", metavar="DIR", default="out", help="artifact directory (default: out)")
        p.add_argument("--workers", type=int, default=1, help="worker processes (default: 1)")

    p = sub.add_parser("run", help="run the stages declared in the config")
    common(p)
    p.add_argument("--stage", choices=config_mod.STAGES, help="run only this stage")
    for name in config_mod.STAGES:
        p = sub.add_parser(name, help=f"run the {name} stage on its own")
        common(p)
        if name == "label-rewards":
            p.add_argument("--features", metavar="FILE", help="label a feature file with the soft support reward")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config_mod.load(args.config) if args.config else config_mod.validate(config_mod.Config())
        if args.seed is not None:
            cfg = replace(cfg, pipeline=replace(cfg.pipeline, seed=args.seed))
    except (OSError, config_mod.ConfigError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    if args.workers < 1:
        print("error: --workers must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "label-rewards" and args.features:
        run = Run(cfg, args.out, args.workers)
        try:
            label_features(run, args.features)
        except (OSError, ValueError) as err:
            print(f"error: {err}", file=sys.stderr)
            return EXIT_FAILED
        return EXIT_OK
    if args.command == "run":
        stages = [args.stage] if args.stage else None
    else:
        stages = [args.command]
    return run_pipeline(cfg, args.out, args.workers, stages)


if __name__ == "__main__":
    raise SystemExit(main())
