import json

import pytest

from bimanual_transfer.cli import main

TINY = ["--set", "K=6", "--set", "D=16", "--set", "hidden=16", "--set", "demos_per_task=3",
        "--set", "batch_size=4", "--set", "augment_copies=0"]


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "run.cfg"
    cfg.write_text(f"out_dir = {d}\niterations = 5\npretrain_iterations = 5\nseeds = 0\neval_episodes = 2\n")
    assert main(["pretrain", "--config", str(cfg), "--seed", "0"] + TINY) == 0
    assert main(["train", "--config", str(cfg), "--from", str(d / "unimanual.npz")] + TINY) == 0
    return d, cfg


def test_pretrain_train_outputs(run_dir):
    d, _ = run_dir
    assert (d / "unimanual.npz").exists() and (d / "bimanual.npz").exists()
    lines = (d / "train.jsonl").read_text().splitlines()
    assert sum(json.loads(x)["event"] == "iter" for x in lines) == 5
    assert json.loads((d / "train.jsonl.timing.json").read_text())["wall_clock_seconds"] >= 0


def test_eval_twice_is_byte_identical(run_dir, capsys):
    d, _ = run_dir
    ck = str(d / "bimanual.npz")
    assert main(["eval", "--ckpt", ck, "--episodes", "2", "--seed", "7", "--metrics-out", str(d / "a.json")]) == 0
    assert main(["eval", "--ckpt", ck, "--episodes", "2", "--seed", "7", "--metrics-out", str(d / "b.json")]) == 0
    assert (d / "a.json").read_bytes() == (d / "b.json").read_bytes()
    assert "average" in capsys.readouterr().out


def test_inspect_and_ablate(run_dir):
    d, cfg = run_dir
    assert main(["inspect-skills", "--ckpt", str(d / "bimanual.npz"), "--episodes", "1"]) == 0
    assert (d / "bimanual_skills" / "skill_summary.json").exists()
    over = TINY + ["--set", f"checkpoint_in={d / 'unimanual.npz'}", "--set", "iterations=2"]
    assert main(["ablate", "--config", str(cfg)] + over) == 0
    assert len((d / "ablation" / "ablation.csv").read_text().splitlines()) == 6


def test_exit_codes(run_dir, tmp_path):
    d, cfg = run_dir
    assert main(["pretrain", "--config", str(tmp_path / "missing.cfg")]) == 2
    assert main(["train", "--config", str(cfg), "--from", str(d / "unimanual.npz"), "--set", "lr=-1"]) == 2
    assert main(["ablate", "--config", str(cfg)]) == 2
    assert main(["eval", "--ckpt", str(tmp_path / "nope.npz")]) == 3
    # wrong embedding width in the config versus the checkpoint
    assert main(["train", "--config", str(cfg), "--from", str(d / "unimanual.npz"), "--set", "D=8"]) == 3
    assert main(["inspect-skills", "--ckpt", str(d / "unimanual.npz")]) == 3
    with pytest.raises(SystemExit):
        main(["fly"])
