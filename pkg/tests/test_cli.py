import csv
import json
import subprocess
import sys

import pytest

from safemarl.cli import main

TINY = {"algorithm": "macpo", "env_id": "corridor", "episode_length": 10, "batch_size": 20, "num_mini_batch": 2,
        "ppo_epochs": 1, "hidden": 8, "eval_episodes": 2, "iterations": 5, "checkpoint_interval": 5}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(TINY))
    return path


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_train_writes_log_manifest_and_checkpoint(tmp_path, config):
    out = tmp_path / "run"
    assert main(["train", "--config", str(config), "--out", str(out)]) == 0
    table = rows(out / "log.csv")
    assert len(table) == 1 + 5
    assert table[0][:3] == ["iteration", "algorithm", "env_steps"]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["schema"] == "safemarl.manifest" and manifest["config"]["iterations"] == 5
    assert (out / "checkpoints" / "iter_00005.json").exists()
    assert json.loads((out / "status.json").read_text())["aborted"] is False


def test_zero_iterations(tmp_path, config):
    out = tmp_path / "zero"
    assert main(["train", "--config", str(config), "--iterations", "0", "--out", str(out)]) == 0
    assert len(rows(out / "log.csv")) == 1


def test_manifest_replay_is_bit_identical(tmp_path, config):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["train", "--config", str(config), "--out", str(a)]) == 0
    assert main(["train", "--manifest", str(a / "manifest.json"), "--out", str(b)]) == 0
    assert (a / "log.csv").read_bytes() == (b / "log.csv").read_bytes()


def test_several_seeds_go_to_separate_directories(tmp_path, config, capsys):
    out = tmp_path / "multi"
    assert main(["train", "--config", str(config), "--seeds", "0", "1", "--iterations", "1", "--out", str(out)]) == 0
    assert (out / "seed_0" / "log.csv").exists() and (out / "seed_1" / "log.csv").exists()
    lines = [json.loads(x) for x in capsys.readouterr().out.splitlines()]
    assert [d["seed"] for d in lines] == [0, 1]


def test_missing_env_id_exits_2_naming_the_field(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"algorithm": "macpo"}))
    assert main(["train", "--config", str(path), "--out", str(tmp_path / "x")]) == 2
    assert "env_id" in capsys.readouterr().err


def test_invalid_values_exit_2(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({**TINY, "gamma": 1.5, "clip": 2}))
    assert main(["train", "--config", str(path)]) == 2
    err = capsys.readouterr().err
    assert "gamma" in err and "clip" in err


def test_eval_from_checkpoint(tmp_path, config, capsys):
    out = tmp_path / "run"
    main(["train", "--config", str(config), "--out", str(out)])
    capsys.readouterr()
    ck = out / "checkpoints" / "iter_00005.json"
    assert main(["eval", "--config", str(config), "--checkpoint", str(ck), "--episodes", "3"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["episodes"] == 3 and len(doc["costs"]) == 2


def test_solve_lqclp_from_file(tmp_path, capsys):
    prob = tmp_path / "p.json"
    prob.write_text(json.dumps({"H": [[1, 0], [0, 1]], "g": [1, 0], "b": [0, 1], "c": 0.0, "delta": 0.5}))
    assert main(["solve-lqclp", str(prob)]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["feasible"] and doc["x"] == pytest.approx([0.5 ** 0.5, 0.0])
    prob.write_text(json.dumps({"q": 1, "r": 0, "s": 1, "c": 5.0, "delta": 0.5}))
    assert main(["solve-lqclp", str(prob)]) == 0
    assert json.loads(capsys.readouterr().out)["feasible"] is False


def test_verify_and_fault_injection(tmp_path, capsys):
    out = tmp_path / "v"
    assert main(["verify", "--suite", "gae", "--count", "gae=5", "--out", str(out)]) == 0
    assert json.loads((out / "report.json").read_text())["ok"]
    assert main(["verify", "--suite", "decomposition", "--count", "decomposition=2",
                 "--inject-fault", "decomposition", "--out", str(out)]) == 1
    assert (out / "counterexample_decomposition.json").exists()
    assert main(["verify", "--suite", "nope"]) == 2


def test_plot_command(tmp_path, config, capsys):
    out = tmp_path / "run"
    main(["train", "--config", str(config), "--out", str(out)])
    capsys.readouterr()
    assert main(["plot", str(out / "log.csv"), "--bound", "1.0", "--out", str(tmp_path / "plots")]) == 0
    info = json.loads(capsys.readouterr().out)
    assert "bound_y" in info and (tmp_path / "plots" / "cost.svg").exists()


def test_output_root_from_environment(tmp_path, config, monkeypatch):
    monkeypatch.setenv("SAFEMARL_OUT", str(tmp_path / "root"))
    assert main(["train", "--config", str(config), "--iterations", "1"]) == 0
    assert (tmp_path / "root" / "macpo_corridor" / "log.csv").exists()


def test_console_script_entry_point():
    proc = subprocess.run([sys.executable, "-m", "safemarl.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "solve-lqclp" in proc.stdout
