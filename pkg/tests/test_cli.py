import json
import os

import pytest

from ilbrl import cli, config
from ilbrl import data as D

SMALL = """
[pipeline]
seed = 3

[mdp]
states = 5
actions = 2

[data]
expert_episodes = 20
explore_episodes = 150

[solver]
gammas = [0.5, 0.9]
ell = 20
policy_seeds = 2

[ope]
learning_rates = [0.05, 0.5]
passes = 30
known_policies = 2

[stats]
n_boot = 200

[bounds]
trials = 10
"""


def write_config(tmp_path, text=SMALL, name="cfg.toml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def tree(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in files:
            p = os.path.join(dirpath, f)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, root)] = fh.read()
    return out


@pytest.fixture(scope="module")
def pipeline_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("runs")
    cfg = write_config(base)
    runs = {}
    for tag, workers in (("a", 1), ("b", 1), ("c", 8)):
        out = base / tag
        assert cli.main(["run", "--config", cfg, "--out", str(out), "--workers", str(workers)]) == 0
        runs[tag] = tree(out)
    return runs, config.load(cfg).hash()


class TestConfig:
    def test_defaults_validate(self):
        cfg = config.validate(config.Config())
        assert cfg.pipeline.stages[0] == "generate-data"

    @pytest.mark.parametrize("text, field", [
        ("[mdp]\nstates = 1\n", "[mdp].states"),
        ("[mdp]\ndiscount = 1.0\n", "[mdp].discount"),
        ("[data]\ntrain_fraction = 0.0\n", "[data].train_fraction"),
        ("[ope]\nlearning_rates = []\n", "[ope].learning_rates"),
        ("[mdp]\ncolour = 3\n", "[mdp].colour"),
        ("[pipeline]\nstages = [\"dance\"]\n", "[pipeline].stages"),
    ])
    def test_invalid_field_named(self, text, field):
        with pytest.raises(config.ConfigError) as err:
            config.loads(text)
        assert field in str(err.value)

    def test_unknown_section(self):
        with pytest.raises(config.ConfigError):
            config.loads("[garden]\nx = 1\n")

    def test_hash_tracks_content(self):
        a = config.loads("[mdp]\nstates = 4\n")
        b = config.loads("[mdp]\nstates = 4\n\n# comment\n")
        c = config.loads("[mdp]\nstates = 5\n")
        assert a.hash() == b.hash() != c.hash()

    def test_seed_derivation(self):
        assert config.derive_seed(1, "train", 0, 1) == config.derive_seed(1, "train", 0, 1)
        seeds = {config.derive_seed(1, "train", i, j) for i in range(5) for j in range(5)}
        assert len(seeds) == 25
        assert config.derive_seed(1, "train", 0) != config.derive_seed(1, "select", 0)
        assert config.derive_seed(1, "train", 0) != config.derive_seed(2, "train", 0)


class TestPipeline:
    def test_expected_artifacts(self, pipeline_runs):
        runs, _ = pipeline_runs
        for name in ("mdp.txt", "dataset.tsv", "train.tsv", "ope.tsv", "final.tsv", "intrinsic_reward.tsv",
                     "labelled.tsv", "policies.json", "ope_manifest.json", "ope_scores.json", "phi_star.json",
                     "selection.json", "summary.csv", "profiles.csv", "report.json", "profiles.png",
                     "intervals.png", "rank_errors.png"):
            assert name in runs["a"], name

    def test_rerun_is_byte_identical(self, pipeline_runs):
        runs, _ = pipeline_runs
        assert runs["a"] == runs["b"]

    def test_workers_do_not_change_bytes(self, pipeline_runs):
        runs, _ = pipeline_runs
        assert runs["a"] == runs["c"]

    def test_every_file_names_config_hash(self, pipeline_runs):
        runs, h = pipeline_runs
        for name, blob in runs["a"].items():
            assert f"config_hash={h}".encode() in blob or f'"config_hash": "{h}"'.encode() in blob, name

    def test_selection_report(self, pipeline_runs):
        runs, _ = pipeline_runs
        sel = json.loads(runs["a"]["selection.json"])
        assert sel["hyperparameter"]["gamma"] in (0.5, 0.9)
        assert "phi_star" in sel and sel["cells"]

    def test_seed_flag_changes_data(self, tmp_path):
        cfg = write_config(tmp_path)
        cli.main(["generate-data", "--config", cfg, "--out", str(tmp_path / "x"), "--seed", "3"])
        cli.main(["generate-data", "--config", cfg, "--out", str(tmp_path / "y"), "--seed", "4"])
        a = (tmp_path / "x" / "dataset.tsv").read_bytes()
        assert a != (tmp_path / "y" / "dataset.tsv").read_bytes()


class TestStages:
    def test_generate_only(self, tmp_path):
        cfg = write_config(tmp_path)
        assert cli.main(["run", "--stage", "generate-data", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
        assert sorted(os.listdir(tmp_path / "o")) == ["dataset.tsv", "final.tsv", "mdp.txt", "ope.tsv", "train.tsv"]
        d = D.load_dataset(tmp_path / "o" / "dataset.tsv")
        assert d.source_label == "mixed"

    def test_standalone_stages_chain(self, tmp_path):
        cfg = write_config(tmp_path)
        out = str(tmp_path / "o")
        for stage in ("generate-data", "label-rewards", "train"):
            assert cli.main([stage, "--config", cfg, "--out", out]) == 0
        policies = json.loads((tmp_path / "o" / "policies.json").read_text())
        assert policies["provenance"]["seed"] == 3

    def test_missing_inputs_record_failure(self, tmp_path):
        cfg = write_config(tmp_path)
        assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == 1
        fail = json.loads((tmp_path / "o" / "failure.json").read_text())
        assert fail["stage"] == "train" and fail["completed_stages"] == []

    def test_mid_pipeline_failure(self, tmp_path):
        # far too few samples per pair for 500 phases
        cfg = write_config(tmp_path, SMALL.replace("ell = 20", "ell = 500"))
        assert cli.main(["run", "--config", cfg, "--out", str(tmp_path / "o")]) == 1
        fail = json.loads((tmp_path / "o" / "failure.json").read_text())
        assert fail["stage"] == "train"
        assert fail["completed_stages"] == ["generate-data", "label-rewards"]
        assert not (tmp_path / "o" / "policies.json").exists()

    def test_invalid_config_exit_code(self, tmp_path, capsys):
        cfg = write_config(tmp_path, "[mdp]\nstates = 0\n")
        assert cli.main(["run", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
        assert "[mdp].states" in capsys.readouterr().err
        assert not (tmp_path / "o").exists()

    def test_missing_config_file(self, tmp_path):
        assert cli.main(["run", "--config", str(tmp_path / "nope.toml"), "--out", str(tmp_path / "o")]) == 2

    def test_verify_bounds(self, tmp_path):
        cfg = write_config(tmp_path)
        assert cli.main(["verify-bounds", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
        rep = json.loads((tmp_path / "o" / "bounds_L1.json").read_text())
        assert rep["bound"] == "L1" and rep["trials"] == 10 and rep["violations"] == 0

    def test_plan_parameters(self, tmp_path):
        cfg = write_config(tmp_path)
        assert cli.main(["plan-parameters", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
        ledger = json.loads((tmp_path / "o" / "parameters.json").read_text())
        rows = {r["name"]: r for r in ledger["parameters"]}
        assert rows["expert_count"]["value"] == 6400
        assert rows["gamma"]["value"] == pytest.approx(0.975)
        assert all(r["formula"] for r in rows.values())

    def test_label_features(self, tmp_path):
        from ilbrl import support

        feats = tmp_path / "f.txt"
        d = support.random_feature_dataset(30, 2, 0.2, 0)
        feats.write_text(support.dumps_features(d))
        cfg = write_config(tmp_path)
        assert cli.main(["label-rewards", "--config", cfg, "--out", str(tmp_path / "o"),
                         "--features", str(feats)]) == 0
        lines = [ln for ln in (tmp_path / "o" / "feature_rewards.txt").read_text().splitlines()
                 if not ln.startswith("#")]
        assert [float(x) for x in lines] == support.label_dataset(d).tolist()

    def test_bad_workers(self, tmp_path):
        assert cli.main(["run", "--workers", "0", "--out", str(tmp_path / "o")]) == 2
