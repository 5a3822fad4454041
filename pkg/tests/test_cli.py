import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from neuralmap.agents import AgentConfig
from neuralmap.cli import main
from neuralmap.heatmap import read_heatmap
from neuralmap.maze import load_maze_set
from neuralmap.trainer import REPORT_KEYS, EnvConfig, TrainConfig, config_to_dict

TINY = AgentConfig(kind="neural-map", map=dict(channels=8, height=7, width=7, hidden=16, conv_channels=2),
                   embed_dim=8, hidden=16, lstm_units=8, mqn_slots=4)


def run(capsys, *argv):
    try:
        code = main([str(a) for a in argv])
    except SystemExit as exc:
        code = exc.code
    out = capsys.readouterr()
    return code, out.out, out.err


def report_rows(text):
    lines = [l for l in text.splitlines() if l and not l.startswith("#")]
    return {r["bucket"]: r for r in csv.DictReader(lines)}


@pytest.fixture(scope="module")
def maze_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("mazes") / "test.jsonl"
    assert main(["gen-mazes", "--count", "6", "--sizes", "7,9", "--seed", "3", "--out", str(path)]) == 0
    return path


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory, maze_file):
    d = tmp_path_factory.mktemp("run")
    cfg = TrainConfig(n_envs=2, rollout_length=5, total_steps=40, eval_interval=40, eval_cap=10,
                      eval_train_mazes=2, agent=TINY, env=EnvConfig(sizes=(5,)))
    (d / "in.json").write_text(json.dumps(config_to_dict(cfg)))
    assert main(["train", "--config", str(d / "in.json"), "--test-set", str(maze_file),
                 "--out-dir", str(d / "out")]) == 0
    return d / "out"


# -------------------------------------------------------------- gen-mazes

def test_gen_mazes_empty(tmp_path, capsys):
    code, out, _ = run(capsys, "gen-mazes", "--count", 0, "--out", tmp_path / "e.jsonl")
    assert code == 0 and (tmp_path / "e.jsonl").read_text() == ""
    assert "total=0" in out


def test_gen_mazes_same_seed_same_bytes(tmp_path, capsys):
    for name in ("a", "b"):
        run(capsys, "gen-mazes", "--count", 20, "--seed", 11, "--out", tmp_path / f"{name}.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_gen_mazes_counts_printed(tmp_path, capsys):
    code, out, _ = run(capsys, "gen-mazes", "--count", 10, "--sizes", "7,13", "--out", tmp_path / "m.jsonl")
    rows = [l.split(",") for l in out.splitlines()[1:3]]
    assert code == 0 and sum(int(n) for _, n in rows) == 10
    assert "small=" in out and "large=" in out


def test_seed_env_override(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("NMAP_SEED", "11")
    run(capsys, "gen-mazes", "--count", 5, "--seed", 999, "--out", tmp_path / "a.jsonl")
    monkeypatch.delenv("NMAP_SEED")
    run(capsys, "gen-mazes", "--count", 5, "--seed", 11, "--out", tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


# ------------------------------------------------------------- exit codes

@pytest.mark.parametrize("argv", [
    ["frobnicate"],
    ["gen-mazes", "--count", "3"],
    ["gen-mazes", "--count", "3", "--sizes", "6,8", "--out", "x.jsonl"],
])
def test_usage_errors_exit_1(argv, capsys):
    assert run(capsys, *argv)[0] == 1


def test_train_refuses_without_test_set(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--agent", "random", "--steps", 10, "--out-dir", tmp_path / "r")
    assert code == 1 and "test set" in err
    assert not (tmp_path / "r").exists()


def test_train_rejects_unknown_config_key(tmp_path, capsys, maze_file):
    (tmp_path / "c.json").write_text('{"learning_rate": 0.1}')
    code, _, err = run(capsys, "train", "--config", tmp_path / "c.json", "--test-set", maze_file,
                       "--out-dir", tmp_path / "r")
    assert code == 1 and "learning_rate" in err


def test_module_entry_point_exit_code():
    res = subprocess.run([sys.executable, "-m", "neuralmap", "eval"], capture_output=True, text=True)
    assert res.returncode == 1


# ------------------------------------------------------------------ train

def test_train_random_smoke(tmp_path, capsys, maze_file):
    code, out, _ = run(capsys, "train", "--agent", "random", "--sizes", "5", "--steps", 20, "--n-envs", 2,
                       "--test-set", maze_file, "--out-dir", tmp_path / "r")
    assert code == 0
    assert set(report_rows(out)) == set(REPORT_KEYS)
    report = json.loads((tmp_path / "r" / "report.json").read_text())
    assert set(report) >= set(REPORT_KEYS)


def test_train_flags_override_config(tmp_path, capsys, maze_file):
    run(capsys, "train", "--agent", "random", "--steps", 0, "--entropy", 0, "--lr", 0.002, "--seed", 4,
        "--test-set", maze_file, "--out-dir", tmp_path / "r")
    cfg = json.loads((tmp_path / "r" / "config.json").read_text())
    assert cfg["entropy_coef"] == 0 and cfg["lr"] == 0.002 and cfg["seed"] == 4


def test_train_outputs(tiny_run):
    names = {p.name for p in tiny_run.iterdir()}
    assert {"config.json", "metrics.csv", "report.json", "learning_curve.png", "ckpt_0.nmck"} <= names


# ------------------------------------------------------------------- eval

def test_eval_random_reproducible(tmp_path, capsys, maze_file):
    argv = ["eval", "--agent", "random", "--maze-set", maze_file, "--train-sizes", "5", "--n-train", 4,
            "--cap", 30, "--seed", 2]
    run(capsys, *argv, "--out", tmp_path / "a.json")
    run(capsys, *argv, "--out", tmp_path / "b.json")
    assert (tmp_path / "a.json").read_text() == (tmp_path / "b.json").read_text()


def test_eval_oracle_and_cap(capsys, maze_file):
    code, out, _ = run(capsys, "eval", "--agent", "oracle", "--maze-set", maze_file, "--train-sizes", "5",
                       "--n-train", 4)
    rows = report_rows(out)
    assert code == 0 and float(rows["test_total"]["success_rate"]) == 1.0
    _, out, _ = run(capsys, "eval", "--agent", "oracle", "--maze-set", maze_file, "--train-sizes", "5",
                    "--n-train", 4, "--cap", 1)
    assert float(report_rows(out)["test_total"]["success_rate"]) == 0.0


def test_eval_checkpoint(capsys, maze_file, tiny_run):
    code, out, _ = run(capsys, "eval", "--checkpoint", tiny_run / "ckpt_0.nmck", "--maze-set", maze_file,
                       "--n-train", 2, "--cap", 10)
    assert code == 0 and report_rows(out)["test_total"]["count"] == "6"


def test_eval_shape_mismatch_names_parameters(tmp_path, capsys, maze_file, tiny_run):
    other = json.loads((tiny_run / "config.json").read_text())
    other["agent"]["map"]["hidden"] = 12
    (tmp_path / "other.json").write_text(json.dumps(other))
    code, _, err = run(capsys, "eval", "--checkpoint", tiny_run / "ckpt_0.nmck", "--config", tmp_path / "other.json",
                       "--maze-set", maze_file, "--n-train", 2, "--cap", 5)
    assert code == 2 and "map." in err


def test_eval_missing_checkpoint(tmp_path, capsys, maze_file):
    code, _, _ = run(capsys, "eval", "--checkpoint", tmp_path / "nope.nmck", "--maze-set", maze_file)
    assert code == 2


# ---------------------------------------------------------------- heatmap

def test_heatmap_rows(tmp_path, capsys, maze_file, tiny_run):
    maze = load_maze_set(maze_file)[0]
    code, out, _ = run(capsys, "heatmap", "--checkpoint", tiny_run / "ckpt_0.nmck", "--maze-set", maze_file,
                       "--maze-id", maze.id, "--cap", 40, "--out", tmp_path)
    assert code == 0
    poses, alpha = read_heatmap(tmp_path / f"heatmap_{maze.id}.csv")
    length = int(dict(l.split(",", 1) for l in out.splitlines())["length"])
    assert len(poses) == len(alpha) == length
    np.testing.assert_allclose(alpha.astype(np.float64).sum(axis=1), 1, atol=1e-5)
    lines = (tmp_path / f"heatmap_{maze.id}.jsonl").read_text().splitlines()
    assert len(lines) == length + 1 and json.loads(lines[0])["maze"] == maze.id
    assert (tmp_path / f"heatmap_{maze.id}.png").stat().st_size > 0


def test_heatmap_rejects_non_map_agent(tmp_path, capsys, maze_file):
    cfg = TrainConfig(total_steps=0, eval_cap=5, eval_train_mazes=1,
                      agent=AgentConfig(kind="lstm", embed_dim=8, lstm_units=8), env=EnvConfig(sizes=(5,)))
    (tmp_path / "c.json").write_text(json.dumps(config_to_dict(cfg)))
    assert main(["train", "--config", str(tmp_path / "c.json"), "--test-set", str(maze_file),
                 "--out-dir", str(tmp_path / "r")]) == 0
    capsys.readouterr()
    maze = load_maze_set(maze_file)[0]
    code, _, err = run(capsys, "heatmap", "--checkpoint", tmp_path / "r" / "ckpt_0.nmck", "--maze-set", maze_file,
                       "--maze-id", maze.id, "--out", tmp_path / "h")
    assert code == 2 and "map" in err.lower()


def test_heatmap_unknown_maze(tmp_path, capsys, maze_file, tiny_run):
    code, _, _ = run(capsys, "heatmap", "--checkpoint", tiny_run / "ckpt_0.nmck", "--maze-set", maze_file,
                     "--maze-id", "f" * 16, "--out", tmp_path)
    assert code == 1


# -------------------------------------------------------------- gradcheck

def test_gradcheck_command(capsys):
    code, out, _ = run(capsys, "gradcheck", "--seed", 0)
    assert code == 0 and "map_step" in out
