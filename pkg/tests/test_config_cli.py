import json

import pytest

from tirlab.cli import build_parser, config_from_args, crossing_step, main
from tirlab.config import ConfigError, build_config, config_keys, file_overrides, flag_name
from tirlab.trainer import read_metrics


def _cfg(*argv):
    return config_from_args(build_parser().parse_args(list(argv)))


@pytest.mark.parametrize("command", ["gen-sandbox", "train", "eval", "synth", "report"])
def test_help_lists_every_key(command, capsys):
    with pytest.raises(SystemExit):
        main([command, "--help"])
    text = " ".join(capsys.readouterr().out.split())
    for section, key, typ, default in config_keys():
        assert flag_name(key) in text
        assert f"{section}.{key} (default:" in text


def test_defaults():
    cfg = build_config()
    assert cfg.trainer.rollouts == 8 and cfg.trainer.max_turns == 4
    assert cfg.reward.gamma == 0.9 and cfg.reward.tool_bonus == 0.5
    assert cfg.budget.total_budget == 1960 and cfg.run.algo == "composite"


def test_precedence(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 4, "trainer": {"lr": 0.25, "steps": 9}, "reward": {"gamma": 0.8}}))
    cfg = _cfg("train", "--config", str(path), "--steps", "3")
    assert cfg.run.seed == 4 and cfg.trainer.lr == 0.25 and cfg.reward.gamma == 0.8
    assert cfg.trainer.steps == 3
    assert cfg.trainer.rollouts == 8


def test_bool_flags():
    assert _cfg("train", "--no-guess-mode").trainer.guess_mode is False
    assert _cfg("train").trainer.guess_mode is True


@pytest.mark.parametrize("data", [
    {"nonsense": 1},
    {"trainer": {"nonsense": 1}},
    {"run": {"nonsense": 1}},
    {"trainer": {"steps": "ten"}},
    {"trainer": {"steps": 2.5}},
    {"trainer": {"guess_mode": 1}},
    [],
])
def test_file_rejects_bad_keys(data):
    with pytest.raises(ConfigError):
        file_overrides(data)


def test_invalid_values_rejected():
    with pytest.raises(ConfigError):
        build_config({("trainer", "rollouts"): 1})
    with pytest.raises(ConfigError):
        build_config({("run", "algo"): "ppo"})


def test_bad_config_file_exit_code(tmp_path, capsys):
    path = tmp_path / "c.json"
    path.write_text('{"trainer": {"lr": ')
    assert main(["train", "--config", str(path)]) == 2
    assert "not valid JSON" in capsys.readouterr().err


# -- commands ---------------------------------------------------------------------


def test_gen_sandbox_deterministic(tmp_path):
    for tag in ("a", "b"):
        assert main(["gen-sandbox", "--count", "12", "--seed", "3", "--out-dir", str(tmp_path / tag)]) == 0
    for name in ("corpus.jsonl", "corpus_stats.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert len((tmp_path / "a" / "corpus.jsonl").read_text().splitlines()) == 12


def test_gen_sandbox_rejects_zero(tmp_path, capsys):
    assert main(["gen-sandbox", "--count", "0", "--out-dir", str(tmp_path)]) == 2
    assert "count" in capsys.readouterr().err


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["gen-sandbox", "--count", "16", "--seed", "2", "--out-dir", str(out)]) == 0
    return out


def test_train_writes_one_row_per_step(run_dir):
    args = ["--out-dir", str(run_dir), "--steps", "4", "--batch-size", "4"]
    assert main(["train", "--algo", "grpo", *args]) == 0
    header, rows = read_metrics(run_dir / "metrics_grpo_s0.csv")
    assert [int(r["step"]) for r in rows] == [0, 1, 2, 3]
    assert (run_dir / "policy_grpo_s0.tsv").is_file()


def test_train_without_corpus(tmp_path, capsys):
    assert main(["train", "--out-dir", str(tmp_path)]) == 1
    assert "corpus not found" in capsys.readouterr().err


def test_report(run_dir, tmp_path, capsys):
    args = ["--out-dir", str(run_dir), "--steps", "2", "--batch-size", "2", "--seed", "7"]
    assert main(["train", "--algo", "composite", *args]) == 0
    metrics = run_dir / "metrics_composite_s7.csv"
    out = tmp_path / "rep"
    assert main(["report", str(metrics), "--threshold", "2.0", "--out-dir", str(out)]) == 0
    lines = (out / "report_summary.tsv").read_text().splitlines()
    assert lines[1].split("\t")[:2] == ["metrics_composite_s7", "none"]
    assert (out / "series_valid_tool_reward.tsv").is_file()

    bad = tmp_path / "other.csv"
    bad.write_text("step,valid_tool_reward\n0,0.5\n")
    capsys.readouterr()
    assert main(["report", str(metrics), str(bad), "--out-dir", str(out)]) == 1
    assert "schema mismatch" in capsys.readouterr().err


def test_crossing_step():
    rows = [{"step": 0, "valid_tool_reward": 0.1}, {"step": 1, "valid_tool_reward": 0.45}]
    assert crossing_step(rows, 0.45) == 1 and crossing_step(rows, 0.5) is None


def test_eval_optimal(run_dir, capsys):
    assert main(["eval", "--policy", "optimal", "--out-dir", str(run_dir)]) == 0
    report = json.loads((run_dir / "eval_optimal.json").read_text())
    assert report["accuracy"] == 1.0
    assert "first-action routing" in capsys.readouterr().out


def test_eval_malformed_policy(run_dir, tmp_path, capsys):
    bad = tmp_path / "bad.tsv"
    bad.write_text("state\thead\tpreference\nnowhere\tanswer\t1.0\n")
    assert main(["eval", "--policy", str(bad), "--out-dir", str(run_dir)]) != 0
    assert "malformed policy" in capsys.readouterr().err
    assert main(["eval", "--out-dir", str(run_dir)]) == 1


def test_synth_mock_deterministic(run_dir, tmp_path):
    for tag in ("a", "b"):
        out = tmp_path / tag
        assert main(["synth", "--corpus", str(run_dir / "corpus.jsonl"), "--out-dir", str(out)]) == 0
    for name in ("exemplars.jsonl", "provenance.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_synth_remote_without_token(run_dir, tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("TIRLAB_API_TOKEN", raising=False)
    argv = ["synth", "--client", "remote", "--endpoint", "https://example.invalid", "--out-dir", str(tmp_path),
            "--corpus", str(run_dir / "corpus.jsonl")]
    assert main(argv) == 1
    assert "TIRLAB_API_TOKEN" in capsys.readouterr().err


def test_unknown_mock_script(run_dir, tmp_path):
    argv = ["synth", "--mock-script", "lazy", "--out-dir", str(tmp_path), "--corpus", str(run_dir / "corpus.jsonl")]
    assert main(argv) == 2
