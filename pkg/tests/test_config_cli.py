import json

import pytest

from slatelab import cli
from slatelab.cli import EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_OK, EXIT_USAGE, main
from slatelab.config import ConfigError, RunConfig, load_config, stage_seed

TINY = {"seed": 3,
        "user": {"n_types": 2, "n_pairwise": 400, "comparisons_per_group": 10,
                 "em": {"n_types": 2, "main_steps": 30, "batch_size": 64, "target_period": 10, "n_restarts": 2}},
        "agent": {"n_trajectories": 40, "iql": {"steps": 20, "batch_size": 32}},
        "eval": {"n_episodes": 20, "n_test_groups": 10, "test_pairs_per_group": 4, "n_ranked_lists": 10,
                 "identifiability_samples": 50}}


def write(tmp_path, data, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(data))
    return p


def manifest(out):
    return {e["path"]: e for e in map(json.loads, (out / "manifest.jsonl").read_text().splitlines())}


class TestRunConfig:
    def test_defaults(self):
        cfg = RunConfig()
        ep = cfg.env.episode
        assert (ep.slate_size, ep.items_per_prompt, ep.n_candidates, ep.horizon, ep.n_categories) == (4, 4, 25, 5, 5)
        assert cfg.agent.iql.alpha == 0.7
        assert cfg.user.em.alpha_prior == 0.999
        assert cfg.world.max_words == 62

    def test_json_roundtrip(self, tmp_path):
        cfg = RunConfig.from_dict(TINY)
        back = load_config(write(tmp_path, json.loads(cfg.to_json())))
        assert back == cfg and back.hash() == cfg.hash()

    def test_invalid_nested_value_has_path(self):
        with pytest.raises(ConfigError) as exc:
            RunConfig.from_dict({"env": {"episode": {"slate_size": 6}}})
        assert exc.value.path == "env.episode"

    def test_unknown_field(self):
        with pytest.raises(ConfigError) as exc:
            RunConfig.from_dict({"agent": {"iql": {"stepz": 3}}})
        assert exc.value.path == "agent.iql.stepz"

    def test_bad_type(self):
        with pytest.raises(ConfigError, match="expected an integer"):
            RunConfig.from_dict({"seed": "seven"})
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"agent": {"iql": {"prefix_training": 1}}})

    def test_cross_section_checks(self):
        with pytest.raises(ConfigError, match="user.em.n_types"):
            RunConfig.from_dict({"user": {"n_types": 3}})
        with pytest.raises(ConfigError, match="n_categories"):
            RunConfig.from_dict({"world": {"n_categories": 4}})

    def test_bad_json(self, tmp_path):
        p = tmp_path / "x.json"
        p.write_text("{nope")
        with pytest.raises(ConfigError, match="not valid JSON"):
            load_config(p)

    def test_with_overrides(self):
        cfg = RunConfig().with_overrides({"env.reward_mode": "dense", "seed": 11})
        assert cfg.env.reward_mode == "dense" and cfg.seed == 11
        with pytest.raises(ConfigError):
            RunConfig().with_overrides({"env.nothing": 1})
        with pytest.raises(ConfigError):
            RunConfig().with_overrides({"nowhere.x": 1})

    def test_stage_seeds(self):
        assert stage_seed(7, "world") == stage_seed(7, "world")
        assert stage_seed(7, "world") != stage_seed(7, "data")
        assert stage_seed(7, "world") != stage_seed(8, "world")
        assert 0 <= stage_seed(123, "x") < 2 ** 32
        assert RunConfig(seed=7).seed_for("world") == stage_seed(7, "world")


class TestCli:
    def test_show_config(self, capsys):
        assert main(["show-config", "--seed", "9", "--reward-mode", "dense"]) == EXIT_OK
        d = json.loads(capsys.readouterr().out)
        assert d["seed"] == 9 and d["env"]["reward_mode"] == "dense"

    def test_k_types_override(self, capsys):
        assert main(["show-config", "--k-types", "3"]) == EXIT_OK
        d = json.loads(capsys.readouterr().out)
        assert d["user"]["n_types"] == 3 and d["user"]["em"]["n_types"] == 3

    def test_invalid_config_exit(self, tmp_path, capsys):
        p = write(tmp_path, {"env": {"episode": {"slate_size": 6}}})
        assert main(["show-config", "--config", str(p)]) == EXIT_CONFIG
        assert "env.episode" in capsys.readouterr().err

    def test_usage_errors(self, tmp_path):
        assert main(["no-such-command"]) == EXIT_USAGE
        assert main(["gen-world", "--bogus"]) == EXIT_USAGE
        assert main(["gen-world", "--jobs", "0", "--out", str(tmp_path)]) == EXIT_USAGE

    def test_dependency_missing(self, tmp_path, capsys):
        cfg = write(tmp_path, TINY)
        assert main(["train-agent", "--config", str(cfg), "--out", str(tmp_path / "run")]) == EXIT_DEPENDENCY
        assert "dependency missing" in capsys.readouterr().err

    def test_stale_world_rejected(self, tmp_path):
        cfg, out = write(tmp_path, TINY), str(tmp_path / "run")
        assert main(["gen-world", "--config", str(cfg), "--out", out]) == EXIT_OK
        assert main(["gen-data", "--config", str(cfg), "--out", out, "--seed", "4"]) == EXIT_DEPENDENCY

    def test_out_from_environment(self, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "env_out"))
        assert main(["gen-world", "--config", str(write(tmp_path, TINY))]) == EXIT_OK
        assert (tmp_path / "env_out" / cli.WORLD_FILE).exists()


@pytest.fixture(scope="module")
def pipeline_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    cfg = write(root, TINY)
    outs, codes = [], []
    for name, jobs in (("a", 1), ("b", 1), ("c", 4)):
        out = root / name
        codes.append(main(["pipeline", "--config", str(cfg), "--out", str(out), "--jobs", str(jobs)]))
        outs.append(out)
    return codes, outs


class TestPipeline:
    def test_exit_codes(self, pipeline_runs):
        assert pipeline_runs[0] == [EXIT_OK] * 3

    def test_manifest_complete(self, pipeline_runs):
        out = pipeline_runs[1][0]
        m = manifest(out)
        for rel in (cli.WORLD_FILE, cli.PAIRWISE_FILE, cli.USER_MODEL_FILE, cli.TRAJ_FILE, cli.AGENT_FILE,
                    cli.POLICY_REPORT_FILE, cli.IDENT_FILE, cli.USER_REPORT_FILE):
            assert rel in m and (out / rel).exists()
        cfg_hash = RunConfig.from_dict(TINY).hash()
        assert all(e["config_hash"] == cfg_hash and e["seed"] == 3 for e in m.values())

    def test_hashes_repeat_across_runs_and_jobs(self, pipeline_runs):
        a, b, c = (manifest(o) for o in pipeline_runs[1])
        assert a.keys() == b.keys() == c.keys()
        for rel in a:
            assert a[rel]["sha256"] == b[rel]["sha256"] == c[rel]["sha256"], rel

    def test_evaluate_reruns_alone(self, pipeline_runs, capsys):
        out = pipeline_runs[1][0]
        cfg = out.parent / "cfg.json"
        assert main(["evaluate", "--config", str(cfg), "--out", str(out), "--policy", "random"]) == EXIT_OK
        capsys.readouterr()
        rep = json.loads((out / cli.POLICY_REPORT_FILE).read_text())
        assert manifest(out)[cli.POLICY_REPORT_FILE]["command"] == "evaluate"
        assert "random" in json.dumps(rep)
