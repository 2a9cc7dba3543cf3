import json

import pytest

from merge_kit.cli import main

SMALL = """[train]
total_steps = 30
batch_size = 4
[schedule]
log_every = 10
eval_every = 15
eval_episodes = 1
[sweep]
densities = 0.02, 0.3
episodes = 2
"""


@pytest.fixture
def small_cfg(tmp_path):
    path = tmp_path / "bench.cfg"
    path.write_text(SMALL)
    return str(path)


def test_sim_twice_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["sim", "--seed", "7", "--policy", "defensive", "--timeout", "3", "--out", str(tmp_path / name)]) == 0
    for f in ("trace.csv", "planner.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["seeds"] == [7] and manifest["command"] == "sim"
    assert manifest["config"]["scenario"]["episode_timeout"] == 3.0


def test_eval_missing_checkpoint_exits_3(tmp_path, capsys):
    code = main(["eval", "--policy", "rl", "--checkpoint", str(tmp_path / "missing.ckpt"), "--out", str(tmp_path)])
    assert code == 3
    assert json.loads(capsys.readouterr().err)["error"] == "checkpoint"


def test_bad_config_exits_2_with_key(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[scenario]\np_coop = lots\n")
    assert main(["sim", "--config", str(bad), "--out", str(tmp_path)]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["key"] == "scenario.p_coop"


def test_bad_log_level_exits_2(tmp_path, monkeypatch):
    monkeypatch.setenv("MERGE_KIT_LOG", "chatty")
    assert main(["sim", "--timeout", "1", "--out", str(tmp_path)]) == 2


def test_planner_fault_exits_4(tmp_path, monkeypatch):
    from merge_kit import bench
    from merge_kit.planner import PlannerFault

    def broken(*args, **kwargs):
        raise PlannerFault("no feasible maneuver", {"time": 0.0})

    monkeypatch.setattr(bench, "plan_step", broken)
    assert main(["sim", "--timeout", "1", "--out", str(tmp_path)]) == 4
    assert (tmp_path / "planner_fault.json").exists()


def test_train_sweep_and_rerun_reproduce_artifacts(tmp_path, small_cfg):
    train_dir, sweep_dir = tmp_path / "train", tmp_path / "sweep"
    assert main(["train", "--config", small_cfg, "--timeout", "4", "--seed", "3", "--out", str(train_dir)]) == 0
    log_lines = (train_dir / "train_log.csv").read_text().splitlines()
    assert log_lines[0] == "step,loss,epsilon,eval_return"
    assert [l.split(",")[0] for l in log_lines[1:]] == ["10", "15", "20", "30"]
    assert (train_dir / "agent.ckpt.json").exists() and (train_dir / "agent_step15.ckpt").exists()

    ckpt = str(train_dir / "agent.ckpt")
    assert main(["sweep", "--config", small_cfg, "--timeout", "4", "--episodes", "2", "--policies", "all",
                 "--checkpoint", ckpt, "--workers", "1", "--out", str(sweep_dir)]) == 0
    rows = (sweep_dir / "sweep.csv").read_text().splitlines()
    assert len(rows) == 1 + 2 * 5
    manifest = json.loads((sweep_dir / "manifest.json").read_text())
    assert manifest["seeds"] == [0, 1] and len(manifest["checkpoint_sha256"]) == 64
    assert len(manifest["config_file_sha256"]) == 64

    for src, files in ((train_dir, ("train_log.csv", "agent.ckpt")), (sweep_dir, ("sweep.csv", "episodes.csv"))):
        again = tmp_path / (src.name + "_again")
        assert main(["rerun", str(src / "manifest.json"), "--out", str(again), "--workers", "2"]) == 0
        for f in files:
            assert (again / f).read_bytes() == (src / f).read_bytes()


def test_rerun_detects_changed_checkpoint(tmp_path, small_cfg):
    train_dir = tmp_path / "train"
    assert main(["train", "--config", small_cfg, "--timeout", "2", "--out", str(train_dir)]) == 0
    ckpt = train_dir / "agent.ckpt"
    assert main(["eval", "--policy", "rl", "--checkpoint", str(ckpt), "--episodes", "1", "--timeout", "2",
                 "--out", str(tmp_path / "eval")]) == 0
    assert (tmp_path / "eval" / "metrics.csv").read_text().startswith("policy,p_new")
    ckpt.write_bytes(ckpt.read_bytes()[:-8] + b"\0" * 8)
    assert main(["rerun", str(tmp_path / "eval" / "manifest.json"), "--out", str(tmp_path / "again")]) == 3


def test_seeds_file(tmp_path):
    seeds = tmp_path / "seeds.txt"
    seeds.write_text("4\n9 11\n")
    assert main(["eval", "--policy", "neutral", "--seeds-file", str(seeds), "--timeout", "1", "--workers", "1",
                 "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "episodes.csv").read_text().splitlines()
    assert [l.split(",")[4] for l in lines[1:]] == ["4", "9", "11"]


def test_help_documents_config_keys(capsys):
    with pytest.raises(SystemExit) as info:
        main(["--help"])
    assert info.value.code == 0
    out = capsys.readouterr().out
    assert "p_coop = 0.4" in out and "MERGE_KIT_LOG" in out
