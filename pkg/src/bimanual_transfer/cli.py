"""Command-line entry point.

    bimanual-transfer pretrain --config F [--seed N]
    bimanual-transfer train --config F --from CKPT
    bimanual-transfer eval --ckpt CKPT --episodes N --seed N
    bimanual-transfer ablate --config F
    bimanual-transfer inspect-skills --ckpt CKPT

Exit codes: 0 success, 2 configuration error, 3 data or checkpoint error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import experiments, training
from .bigrid import DatasetError, LayoutError
from .config import ConfigError, RunConfig, load_config
from .evaluation import evaluate, write_metrics
from .policy import CheckpointError, load_model

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = value
    return out


def _write_timing(path, seconds: float) -> None:
    p = Path(str(path) + ".timing.json")
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps({"wall_clock_seconds": round(seconds, 3)}) + "\n")


def _default(cfg: RunConfig, field: str, name: str) -> None:
    if not getattr(cfg, field):
        setattr(cfg, field, str(Path(cfg.out_dir) / name))


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config, {**_overrides(args.set), "seed": args.seed}, mode="pretrain")
    _default(cfg, "checkpoint_out", "unimanual.npz")
    _default(cfg, "metrics_out", "pretrain.jsonl")
    t0 = time.perf_counter()
    model, history = training.pretrain_unimanual(cfg)
    _write_timing(cfg.metrics_out, time.perf_counter() - t0)
    print(f"pretrain: bc {history[0]['bc']:.4f} -> {history[-1]['bc']:.4f}; checkpoint {cfg.checkpoint_out}")
    return EXIT_OK


def cmd_train(args) -> int:
    over = {**_overrides(args.set), "checkpoint_in": args.from_ckpt, "seed": args.seed}
    cfg = load_config(args.config, over, mode="train")
    _default(cfg, "checkpoint_out", "bimanual.npz")
    _default(cfg, "metrics_out", "train.jsonl")
    t0 = time.perf_counter()
    model, history, report = training.train(cfg, cfg.checkpoint_in)
    _write_timing(cfg.metrics_out, time.perf_counter() - t0)
    print(f"train: total {history[0]['total']:.4f} -> {history[-1]['total']:.4f}; "
          f"{len(report['loaded'])} loaded, {len(report['new'])} new parameters; checkpoint {cfg.checkpoint_out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.episodes < 1:
        raise ConfigError("--episodes must be >= 1")
    model, header = load_model(args.ckpt)
    tasks = [t for t in args.tasks.split(",") if t] if args.tasks else None
    t0 = time.perf_counter()
    record = evaluate(model, tasks, args.episodes, args.seed, run_id=Path(args.ckpt).stem)
    out = args.metrics_out or str(Path(args.ckpt).with_suffix("")) + ".eval.json"
    write_metrics(out, record)
    _write_timing(out, time.perf_counter() - t0)
    for task, rate in record["per_task_success"].items():
        print(f"{task:>18s}: {rate:6.2f}")
    print(f"{'average':>18s}: {record['average_success']:6.2f}  -> {out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_config(args.config, _overrides(args.set), mode="ablate")
    if not cfg.checkpoint_in:
        raise ConfigError("ablate needs checkpoint_in (the shared unimanual checkpoint)")
    arrays = experiments.load_unimanual_for(cfg)
    out_dir = Path(cfg.out_dir) / "ablation"
    result = experiments.ablate(cfg, arrays, out_dir=out_dir)
    for row in result["rows"]:
        print(f"{row['row']:>13s}  manager={int(row['skill_manager'])} aligner={int(row['visual_aligner'])}"
              f"  avg={row['average_success']:6.2f}")
    check = experiments.ordering_check(result["rows"])
    print("ordering:", "pass" if check["passed"] else "fail", json.dumps(check["checks"]))
    return EXIT_OK


def cmd_inspect(args) -> int:
    model, header = load_model(args.ckpt)
    if header["kind"] != "bimanual":
        raise CheckpointError("inspect-skills needs a bimanual checkpoint")
    tasks = [t for t in args.tasks.split(",") if t] if args.tasks else None
    try:
        records, summary = experiments.inspect_skills(model, tasks, args.episodes, args.seed)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from exc
    out = Path(args.out) if args.out else Path(str(Path(args.ckpt).with_suffix("")) + "_skills")
    experiments.write_inspection(out, records, summary)
    for task, entry in summary["per_task"].items():
        print(f"{task:>18s}: success {entry['success']:6.2f}  entropy {entry['mean_entropy']:.3f}  "
              f"modal primitive L{entry['modal_primitive_left']} R{entry['modal_primitive_right']}")
    print(f"{len(records)} trace records -> {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bimanual-transfer", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_set(sp):
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")

    sp = sub.add_parser("pretrain", help="train the single-arm policy on the unimanual suite")
    sp.add_argument("--config", required=True)
    sp.add_argument("--seed", type=int)
    with_set(sp)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("train", help="transfer a unimanual checkpoint to the bimanual suite")
    sp.add_argument("--config", required=True)
    sp.add_argument("--from", dest="from_ckpt", required=True, metavar="CKPT")
    sp.add_argument("--seed", type=int)
    with_set(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="closed-loop evaluation of a checkpoint")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--episodes", type=int, default=50, help="episodes per task")
    sp.add_argument("--seed", type=int, default=1000)
    sp.add_argument("--tasks", default="")
    sp.add_argument("--metrics-out", default="")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="run the five-row ablation table")
    sp.add_argument("--config", required=True)
    with_set(sp)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("inspect-skills", help="export per-keyframe skill weights")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--episodes", type=int, default=10)
    sp.add_argument("--seed", type=int, default=1000)
    sp.add_argument("--tasks", default="")
    sp.add_argument("--out", default="")
    sp.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, DatasetError, LayoutError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
