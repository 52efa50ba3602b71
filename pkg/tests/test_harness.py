import json
import math

import numpy as np
import pytest

from bimanual_transfer import bigrid, evaluation, experiments, training
from bimanual_transfer.config import ConfigError, RunConfig, dump_config, load_config, parse_config_text
from bimanual_transfer.policy import CheckpointError, load_model, read_checkpoint

TINY = dict(K=6, D=16, hidden=16, demos_per_task=4, batch_size=4, iterations=50, pretrain_iterations=50,
            augment_copies=1, eval_episodes=4, seeds=[0])


def tiny(tmp_path, **kw):
    return RunConfig(**{**TINY, "out_dir": str(tmp_path), **kw})


@pytest.fixture(scope="module")
def uni_ckpt(tmp_path_factory):
    d = tmp_path_factory.mktemp("uni")
    cfg = RunConfig(**{**TINY, "mode": "pretrain", "checkpoint_out": str(d / "u.npz")})
    training.pretrain_unimanual(cfg)
    return d / "u.npz"


# ---------------------------------------------------------------- config


def test_config_parse_and_override(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# comment\nlr = 0.001\nseeds = 0, 1, 2\nuse_visual_aligner = false  # off\n"
                 "tasks = handover,lift-tray\ncheckpoint_in = x.npz\n")
    cfg = load_config(p, {"lr": "0.002", "iterations": None})
    assert cfg.lr == 0.002 and cfg.seeds == [0, 1, 2]
    assert cfg.use_visual_aligner is False and cfg.tasks == ["handover", "lift-tray"]
    assert cfg.lam_skill == 0.0001 and cfg.lam_voxel == 0.001
    again = parse_config_text(dump_config(cfg))
    assert RunConfig(**again) == cfg


@pytest.mark.parametrize("text", ["lr = -1", "bogus = 3", "iterations = 0", "iterations = many",
                                  "divergence = l2", "mode = dance", "use_skill_manager = maybe",
                                  "augment_rotations = 45", "mode = train"])
def test_config_errors(tmp_path, text):
    p = tmp_path / "bad.cfg"
    p.write_text(text + "\n")
    with pytest.raises(ConfigError):
        load_config(p)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.cfg")


# ---------------------------------------------------------------- training


def test_pretrained_checkpoint_loads_into_both_arms(tmp_path, uni_ckpt):
    header, arrays = read_checkpoint(uni_ckpt)
    assert header["kind"] == "unimanual"
    model, history, report = training.train(tiny(tmp_path), uni_ckpt, iterations=1)
    assert report["unmatched"] == [] and report["loaded"]


def test_pretrain_is_deterministic(tmp_path, uni_ckpt):
    cfg = RunConfig(**{**TINY, "mode": "pretrain", "checkpoint_out": str(tmp_path / "again.npz")})
    training.pretrain_unimanual(cfg)
    assert (tmp_path / "again.npz").read_bytes() == uni_ckpt.read_bytes()


def test_train_smoke_decreases_total(tmp_path, uni_ckpt):
    cfg = tiny(tmp_path, metrics_out=str(tmp_path / "m.jsonl"))
    model, history, _ = training.train(cfg, uni_ckpt)
    assert len(history) == 50
    assert history[-1]["total"] < history[0]["total"]
    lines = [json.loads(x) for x in (tmp_path / "m.jsonl").read_text().splitlines()]
    iters = [r for r in lines if r["event"] == "iter"]
    assert len(iters) == 50 and all(r["skill"] is not None and r["voxel"] is not None for r in iters)
    assert lines[-1]["event"] == "summary"


def test_zero_lambdas_total_is_bc(tmp_path, uni_ckpt):
    cfg = tiny(tmp_path, lam_skill=0.0, lam_voxel=0.0, iterations=20)
    _, history, _ = training.train(cfg, uni_ckpt)
    assert all(h["total"] == h["bc"] for h in history)


def test_flags_off_reduce_to_bc(tmp_path, uni_ckpt):
    cfg = tiny(tmp_path, iterations=5)
    model, history, _ = training.train(cfg, uni_ckpt, use_skill_manager=False, use_visual_aligner=False)
    assert model.manager is None and model.aligner is None
    assert all(h["total"] == h["bc"] and h["skill"] is None for h in history)


def test_train_checkpoint_is_deterministic(tmp_path, uni_ckpt):
    paths = []
    for k in range(2):
        cfg = tiny(tmp_path, iterations=10, checkpoint_out=str(tmp_path / f"b{k}.npz"))
        training.train(cfg, uni_ckpt)
        paths.append(tmp_path / f"b{k}.npz")
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_train_rejects_mismatched_checkpoint(tmp_path, uni_ckpt):
    with pytest.raises(CheckpointError):
        training.train(tiny(tmp_path, D=8), uni_ckpt)
    with pytest.raises(CheckpointError):
        training.train(tiny(tmp_path), tmp_path / "missing.npz")


def test_dataset_mismatch(tmp_path):
    path = tmp_path / "d.jsonl"
    bigrid.save_dataset(path, bigrid.generate_demos("handover", 2, 0))
    with pytest.raises(bigrid.DatasetError):
        training.load_or_generate(path, ["lift-tray"], 2, 0, 12, 12)


# ---------------------------------------------------------------- evaluation


def test_expert_and_random_bounds():
    tasks = [t.name for t in bigrid.BIMANUAL_TASKS + bigrid.UNIMANUAL_TASKS]
    expert = evaluation.run_episodes(evaluation.ExpertAgent(), tasks, 50, 1000)
    assert all(v == 100.0 for v in expert["per_task_success"].values())
    rand = evaluation.run_episodes(evaluation.RandomAgent(0), tasks, 50, 1000)
    assert all(v < 5.0 for v in rand["per_task_success"].values()), rand["per_task_success"]


def test_eval_metrics_are_byte_identical(tmp_path, uni_ckpt):
    cfg = tiny(tmp_path, iterations=5, checkpoint_out=str(tmp_path / "b.npz"))
    training.train(cfg, uni_ckpt)
    model, _ = load_model(tmp_path / "b.npz")
    for k in range(2):
        evaluation.write_metrics(tmp_path / f"e{k}.json", evaluation.evaluate(model, None, 3, 1000, "b"))
    a, b = (tmp_path / "e0.json").read_bytes(), (tmp_path / "e1.json").read_bytes()
    assert a == b
    rec = json.loads(a)
    vals = [rec["per_task_success"][t] for t in sorted(rec["per_task_success"])]
    assert rec["average_success"] == sum(vals) / len(vals)
    assert all(0 <= v <= 100 for v in vals)


def test_unimanual_checkpoint_evaluates(uni_ckpt):
    model, _ = load_model(uni_ckpt)
    rec = evaluation.evaluate(model, ["pick-block"], 3, 1000)
    assert set(rec["per_task_success"]) == {"pick-block"}


# ---------------------------------------------------------------- ablation and inspection


def test_ablation_table_structure(tmp_path, uni_ckpt):
    cfg = tiny(tmp_path, iterations=3, eval_episodes=2, checkpoint_in=str(uni_ckpt), mode="ablate")
    arrays = experiments.load_unimanual_for(cfg)
    result = experiments.ablate(cfg, arrays, out_dir=tmp_path / "abl", log=None)
    rows = result["rows"]
    assert [r["row"] for r in rows] == ["vanilla", "neither", "aligner-only", "manager-only", "both"]
    assert [(r["skill_manager"], r["visual_aligner"]) for r in rows] == [
        (False, False), (False, False), (False, True), (True, False), (True, True)]
    assert [r["pretrained"] for r in rows] == [False, True, True, True, True]
    assert len({(tuple(r["seeds"]), r["iterations"]) for r in rows}) == 1
    csv_lines = (tmp_path / "abl" / "ablation.csv").read_text().splitlines()
    assert len(csv_lines) == 6
    check = experiments.ordering_check(rows)
    assert set(check["checks"]) and isinstance(check["passed"], bool)


def test_inspect_skills_records(tmp_path, uni_ckpt):
    cfg = tiny(tmp_path, iterations=20)
    model, _, _ = training.train(cfg, uni_ckpt)
    records, summary = experiments.inspect_skills(model, None, 2, 1000)
    raw = []
    evaluation.run_episodes(evaluation.agent_for(model), evaluation.default_tasks(model), 2, 1000, trace=raw)
    assert len(records) == 2 * len(raw)
    assert all(0 <= r["entropy"] <= math.log(model.cfg.K) + 1e-9 for r in records)
    assert set(summary["per_task"]) == {t.name for t in bigrid.BIMANUAL_TASKS}
    experiments.write_inspection(tmp_path / "sk", records, summary)
    assert len((tmp_path / "sk" / "skill_trace.jsonl").read_text().splitlines()) == len(records)
    no_mgr, _, _ = training.train(tiny(tmp_path, iterations=1), uni_ckpt, use_skill_manager=False)
    with pytest.raises(ValueError):
        experiments.inspect_skills(no_mgr)
