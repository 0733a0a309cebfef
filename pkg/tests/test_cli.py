import json
import os

import pytest

from spire.cli import EXIT_OK, EXIT_USAGE, main


@pytest.fixture(autouse=True)
def runs_root(tmp_path, monkeypatch):
    monkeypatch.setenv("SPIRE_RUNS", str(tmp_path / "runs"))
    return tmp_path


def test_finetune_without_checkpoint_is_usage_error(capsys):
    assert main(["finetune", "--domain", "GridChain-1"]) == EXIT_USAGE
    assert "--bc" in capsys.readouterr().err


def test_unknown_flag_and_key_are_usage_errors(capsys):
    assert main(["collect", "--bogus"]) == EXIT_USAGE
    assert main(["collect", "--set", "num_demo=3"]) == EXIT_USAGE
    assert "num_demo" in capsys.readouterr().err


def test_unknown_domain_fails():
    assert main(["dump-plan", "--domain", "Towers-3"]) != EXIT_OK


def test_collect_train_evaluate_chain(tmp_path, capsys):
    rd = str(tmp_path / "r")
    assert main(["collect", "--domain", "GridChain-1", "--num-demos", "3", "--run-dir", rd]) == EXIT_OK
    assert os.path.exists(os.path.join(rd, "demos", "demos.jsonl"))
    echo = json.load(open(os.path.join(rd, "config.echo")))
    assert echo["config"]["num_demos"] == 3
    assert main(["train-bc", "--domain", "GridChain-1", "--run-dir", rd, "--epochs", "100"]) == EXIT_OK
    ckpt = os.path.join(rd, "checkpoints", "bc.json")
    assert main(["evaluate", "--domain", "GridChain-1", "--policy", ckpt, "--rollouts", "5", "--run-dir", rd]) == EXIT_OK
    out = capsys.readouterr().out
    assert "success" in out
    assert main(
        ["finetune", "--domain", "GridChain-1", "--bc", ckpt, "--frames", "300", "--run-dir", rd,
         "--set", "finetune.seed_frames=100", "--set", "finetune.eval_every=100", "--set", "finetune.eval_rollouts=3"]
    ) == EXIT_OK
    assert os.path.exists(os.path.join(rd, "curves.csv"))


def test_train_bc_without_demos_is_usage_error(tmp_path):
    assert main(["train-bc", "--run-dir", str(tmp_path / "empty")]) == EXIT_USAGE


def test_dump_plan_and_render(capsys):
    assert main(["dump-plan", "--domain", "GridChain-2"]) == EXIT_OK
    assert "[section 1]" in capsys.readouterr().out
    assert main(["render-ascii", "--domain", "GridChain-2", "--handoff"]) == EXIT_OK
    assert "@" in capsys.readouterr().out


def test_verify_passes(capsys):
    assert main(["verify"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "[FAIL]" not in out and out.count("[PASS]") >= 10


def test_verify_reports_failures(monkeypatch, capsys):
    from spire import verify

    monkeypatch.setattr(verify, "run_all", lambda summary_dir=None: [("broken", False, "forced")])
    assert main(["verify"]) == 1
    assert "[FAIL] broken" in capsys.readouterr().out
