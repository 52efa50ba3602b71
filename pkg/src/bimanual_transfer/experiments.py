"""Ablation table and skill-trace inspection."""
from __future__ import annotations

import csv
import json
import time
from collections import Counter
from pathlib import Path

import numpy as np

from . import evaluation, training
from .config import RunConfig
from .policy import BimanualModel, read_checkpoint
from .skills import export_skill_trace, write_trace

# name, loads the unimanual checkpoint, skill manager, visual aligner
ABLATION_ROWS = (
    ("vanilla", False, False, False),
    ("neither", True, False, False),
    ("aligner-only", True, False, True),
    ("manager-only", True, True, False),
    ("both", True, True, True),
)
ROW_NOTES = {
    "vanilla": "closest reconstruction of the pretraining baseline: random init, BC only",
    "neither": "pretrained, BC fine-tuning, mask 1 and self-concatenated instruction",
}
CSV_FIELDS = ("row", "pretrained", "skill_manager", "visual_aligner", "seeds", "iterations",
              "average_success", "mean_mask_overlap")


def run_row(cfg: RunConfig, row, unimanual_arrays, seed: int, samples=None) -> dict:
    """Train one row on one seed; ``cfg.eval_iterations`` adds a learning curve."""
    name, pretrained, manager, aligner = row
    curve = {}

    def hook(it, model):
        curve[it] = evaluation.evaluate(model, cfg.tasks or None, cfg.eval_episodes, cfg.eval_seed)["average_success"]

    eval_at = [i for i in cfg.eval_iterations if i < cfg.iterations]
    model, history, _ = training.train(cfg, unimanual_arrays if pretrained else None, seed, samples=samples,
                                       eval_hook=hook, eval_at=eval_at,
                                       use_skill_manager=manager, use_visual_aligner=aligner)
    metrics = evaluation.evaluate(model, cfg.tasks or None, cfg.eval_episodes, cfg.eval_seed,
                                  run_id=f"{name}/seed{seed}")
    curve[cfg.iterations] = metrics["average_success"]
    metrics["curve"] = {str(k): curve[k] for k in sorted(curve)}
    metrics["losses"] = {k: history[-1][k] for k in ("total", "bc", "skill", "voxel")}
    return metrics


def ablate(cfg: RunConfig, unimanual_arrays, rows=ABLATION_ROWS, out_dir=None, log=print) -> dict:
    """Train and evaluate every row on every seed with identical budgets.

    Returns ``{"rows": [...], "records": [...], "metadata": {...}}``; each
    row's average is the mean over seeds of the per-seed averages.
    """
    cfg = RunConfig(**{**cfg.__dict__, "metrics_out": "", "checkpoint_out": ""})
    records, table = [], []
    wall = {}
    samples_by_seed = {s: training.bimanual_training_set(cfg, s) for s in cfg.seeds}
    for row in rows:
        t0 = time.perf_counter()
        per_seed = []
        for seed in cfg.seeds:
            rec = run_row(cfg, row, unimanual_arrays, seed, samples_by_seed[seed])
            rec["row"] = row[0]
            records.append(rec)
            per_seed.append(rec)
            if log:
                log(f"{row[0]:>13s} seed {seed}: {rec['average_success']:.2f}")
        overlaps = [r["mean_mask_overlap"] for r in per_seed if r["mean_mask_overlap"] is not None]
        tasks = sorted(per_seed[0]["per_task_success"])
        table.append({
            "row": row[0], "pretrained": row[1], "skill_manager": row[2], "visual_aligner": row[3],
            "seeds": list(cfg.seeds), "iterations": cfg.iterations,
            "per_task_success": {t: float(np.mean([r["per_task_success"][t] for r in per_seed])) for t in tasks},
            "per_seed_average": [r["average_success"] for r in per_seed],
            "average_success": float(np.mean([r["average_success"] for r in per_seed])),
            "mean_mask_overlap": float(np.mean(overlaps)) if overlaps else None,
            "curve": {k: float(np.mean([r["curve"][k] for r in per_seed])) for k in per_seed[0]["curve"]},
            "note": ROW_NOTES.get(row[0], ""),
        })
        wall[row[0]] = time.perf_counter() - t0
    meta = {"seeds": list(cfg.seeds), "iterations": cfg.iterations, "eval_episodes": cfg.eval_episodes,
            "eval_seed": cfg.eval_seed, "lam_skill": cfg.lam_skill, "lam_voxel": cfg.lam_voxel,
            "optimizer": cfg.optimizer, "lr": cfg.lr, "batch_size": cfg.batch_size,
            "demos_per_task": cfg.demos_per_task,
            "eval_iterations": sorted(set(cfg.eval_iterations) | {cfg.iterations})}
    result = {"rows": table, "records": records, "metadata": meta}
    if out_dir:
        write_ablation(out_dir, result, wall)
    return result


def write_ablation(out_dir, result: dict, wall: dict | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation.jsonl", "w") as f:
        for rec in result["records"]:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
        f.write(json.dumps({"event": "summary", "rows": result["rows"], "metadata": result["metadata"]},
                           sort_keys=True) + "\n")
    with open(out / "ablation.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_FIELDS)
        for r in result["rows"]:
            w.writerow([r["row"], int(r["pretrained"]), int(r["skill_manager"]), int(r["visual_aligner"]),
                        " ".join(str(s) for s in r["seeds"]), r["iterations"], f"{r['average_success']:.2f}",
                        "" if r["mean_mask_overlap"] is None else f"{r['mean_mask_overlap']:.4f}"])
    if wall:
        (out / "ablation.timing.json").write_text(json.dumps(wall, sort_keys=True) + "\n")


def ordering_check(rows: list, full_margin: float = 3.0, single_margin: float = 2.0) -> dict:
    avg = {r["row"]: r["average_success"] for r in rows}
    singles = ("aligner-only", "manager-only")
    checks = {f"both >= {s} + {full_margin}": avg["both"] >= avg[s] + full_margin for s in singles}
    checks.update({f"{s} >= neither + {single_margin}": avg[s] >= avg["neither"] + single_margin for s in singles})
    return {"averages": avg, "checks": checks, "passed": all(checks.values())}


def _first_reaching(curve: dict, level: float):
    for it in sorted(curve, key=int):
        if curve[it] >= level:
            return int(it)
    return None


def transfer_check(rows: list, pretrained: str = "neither", baseline: str = "vanilla", ratio: float = 0.5) -> dict:
    """Does the pretrained row reach the baseline's final success in <= ratio of its iterations?

    Both rows share an architecture; only the initialisation differs. The
    baseline needs ``t_base`` iterations: the first curve point at or above
    its own final value.
    """
    by = {r["row"]: r for r in rows}
    base, pre = by[baseline]["curve"], by[pretrained]["curve"]
    final = base[max(base, key=int)]
    t_base = _first_reaching(base, final)
    t_pre = _first_reaching(pre, final)
    return {"baseline_final": final, "t_baseline": t_base, "t_pretrained": t_pre,
            "passed": t_pre is not None and t_pre <= ratio * t_base}


def load_unimanual_for(cfg: RunConfig) -> dict:
    return training.load_unimanual_arrays(cfg.checkpoint_in, cfg)


# --------------------------------------------------------------------------
# skill inspection


def inspect_skills(model: BimanualModel, tasks=None, episodes: int = 10, seed: int = 1000) -> tuple:
    """Roll out, then return ``(trace_records, summary)``."""
    if model.manager is None:
        raise ValueError("checkpoint has no skill manager to inspect")
    tasks = tasks or evaluation.default_tasks(model)
    raw = []
    rollout = evaluation.run_episodes(evaluation.agent_for(model), tasks, episodes, seed,
                                      model.cfg.H, model.cfg.W, trace=raw)
    records = export_skill_trace(raw)
    summary = {"event": "summary", "episodes_per_task": episodes, "seed": seed, "per_task": {}}
    for name in rollout["per_task_success"]:
        recs = [r for r in records if r["task"] == name]
        entry = {"success": rollout["per_task_success"][name],
                 "mean_entropy": float(np.mean([r["entropy"] for r in recs])) if recs else None}
        for arm in ("left", "right"):
            counts = Counter(r["nearest_primitive_index"] for r in recs if r["arm"] == arm)
            entry[f"modal_primitive_{arm}"] = min(counts, key=lambda k: (-counts[k], k)) if counts else None
        summary["per_task"][name] = entry
    ents = [r["entropy"] for r in records]
    summary["mean_entropy"] = float(np.mean(ents)) if ents else None
    summary["mean_mask_overlap"] = rollout["mask_overlap"]
    return records, summary


def write_inspection(out_dir, records, summary) -> None:
    out = Path(out_dir)
    write_trace(out / "skill_trace.jsonl", records)
    (out / "skill_summary.json").write_text(json.dumps(summary, sort_keys=True) + "\n")


def checkpoint_kind(path) -> str:
    header, _ = read_checkpoint(path)
    return header["kind"]
