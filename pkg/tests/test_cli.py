from __future__ import annotations

import json
from pathlib import Path

import httpx
import pytest

from edrk import cli
from edrk.pipeline import check_summary

TINY = {
    "seed": 2,
    "cohort": {"n_visits": 1200},
    "extraction": {"fixture_size": 30, "endpoint": {"url": "http://llm.invalid/v1/chat/completions", "model": "m"}},
    "models": {
        "logistic": {"l2": [0.01], "epochs": [100]},
        "gbt_xgb": {"n_trees": [15], "max_depth": [2], "learning_rate": [0.2], "l2_lambda": [1.0]},
    },
    "explain": {"n_narratives": 10},
}


@pytest.fixture
def no_network(monkeypatch):
    calls = []

    def refuse(self, request, **kwargs):
        calls.append(request.url)
        raise AssertionError(f"network call to {request.url}")

    monkeypatch.setattr(httpx.Client, "send", refuse)
    return calls


def write_config(tmp_path, **overrides) -> Path:
    path = tmp_path / "config.json"
    path.write_text(json.dumps({**TINY, **overrides}))
    return path


def run_dir_from(capsys) -> Path:
    return Path(capsys.readouterr().out.strip().splitlines()[-1])


def test_missing_config_file(tmp_path, capsys):
    assert cli.main(["run", "--config", str(tmp_path / "nope.json")]) == cli.EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_malformed_config(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["run", "--config", str(bad)]) == cli.EXIT_CONFIG
    assert cli.main(["run", "--config", str(write_config(tmp_path, colour="blue"))]) == cli.EXIT_CONFIG
    assert cli.main(["run", "--config", str(write_config(tmp_path, models={"forest": {"n": [1]}}))]) == cli.EXIT_CONFIG


def test_run_requires_config():
    with pytest.raises(SystemExit) as exc:
        cli.main(["run"])
    assert exc.value.code == 2


def test_offline_run_makes_no_network_calls(tmp_path, capsys, no_network):
    # the config names an endpoint; --offline must still keep every stage local
    cfg = write_config(tmp_path, extraction={**TINY["extraction"], "mode": "endpoint"})
    code = cli.main(["run", "--config", str(cfg), "--offline", "--out", str(tmp_path / "runs")])
    assert code == cli.EXIT_OK
    assert no_network == []
    run = run_dir_from(capsys)
    summary = json.loads((run / "summary.json").read_text())
    assert set(summary["variants"]) == {"without_llm", "with_llm"}
    for name in ("cohort/visits.csv", "extract/extracted.json", "harmonize/split.json", "assess/with_llm/assessment.md"):
        assert (run / name).exists()


def test_check_flag_matches_summary(tmp_path, capsys):
    code = cli.main(["run", "--config", str(write_config(tmp_path)), "--offline", "--check", "--out", str(tmp_path / "runs")])
    run = run_dir_from(capsys)
    problems = check_summary(json.loads((run / "summary.json").read_text()))
    assert code == (cli.EXIT_CHECK if problems else cli.EXIT_OK)


def test_stage_by_stage(tmp_path, capsys, no_network):
    cfg = write_config(tmp_path, variant="with_llm")
    assert cli.main(["generate", "--config", str(cfg), "--out", str(tmp_path / "runs")]) == cli.EXIT_OK
    run = run_dir_from(capsys)
    for stage in ("extract", "harmonize", "train", "explain", "assess"):
        assert cli.main([stage, "--run", str(run), "--offline"]) == cli.EXIT_OK, stage
    out = capsys.readouterr().out
    assert "with_llm: 10 narratives, error rate 0.00" in out
    assert (run / "explain" / "with_llm" / "manifest.json").exists()
    assert not (run / "train" / "without_llm").exists()


def test_stage_out_of_order_fails(tmp_path, capsys):
    cfg = write_config(tmp_path, variant="with_llm")
    cli.main(["generate", "--config", str(cfg), "--out", str(tmp_path / "runs")])
    run = run_dir_from(capsys)
    assert cli.main(["train", "--run", str(run)]) == cli.EXIT_STAGE
    assert "stage 'train' failed" in capsys.readouterr().err


def test_completed_run_is_refused(tmp_path, capsys):
    run = tmp_path / "done"
    run.mkdir()
    (run / "summary.json").write_text("{}")
    assert cli.main(["explain", "--run", str(run)]) == cli.EXIT_CONFIG
    assert "completed run" in capsys.readouterr().err


def test_missing_run_dir(tmp_path):
    assert cli.main(["assess", "--run", str(tmp_path / "ghost")]) == cli.EXIT_CONFIG


def test_seed_override_is_recorded(tmp_path, capsys):
    cfg = write_config(tmp_path)
    cli.main(["generate", "--config", str(cfg), "--seed", "41", "--out", str(tmp_path / "runs")])
    run = run_dir_from(capsys)
    assert json.loads((run / "config.json").read_text())["seed"] == 41
