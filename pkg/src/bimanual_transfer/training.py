"""Training loops: unimanual pretraining and bimanual transfer."""
from __future__ import annotations

import json
import logging
import time
from pathlib import Path

import numpy as np

from . import bigrid
from . import diffcore as dc
from .bigrid import BIMANUAL_TASKS, UNIMANUAL_TASKS
from .config import RunConfig
from .lang import embed
from .policy import (BimanualModel, CheckpointError, ModelConfig, UnimanualModel, action_targets,
                     read_checkpoint, save_checkpoint, validate_header)
from .vision import ego_view

log = logging.getLogger(__name__)


def model_config(cfg: RunConfig, seed: int | None = None, **overrides) -> ModelConfig:
    mc = ModelConfig(H=cfg.H, W=cfg.W, C=cfg.C, R=cfg.R, K=cfg.K, D=cfg.D, hidden=cfg.hidden,
                     seed=cfg.seed if seed is None else seed, lang_seed=cfg.lang_seed,
                     weights_head=cfg.weights_head, divergence=cfg.divergence,
                     freeze_primitives=cfg.freeze_primitives,
                     use_skill_manager=cfg.use_skill_manager,
                     use_visual_aligner=cfg.use_visual_aligner, lam_eps=cfg.lam_eps)
    for k, v in overrides.items():
        setattr(mc, k, v)
    return mc


# --------------------------------------------------------------------------
# data


def load_or_generate(path, tasks, n: int, seed: int, H: int, W: int) -> list:
    tasks = [bigrid.get_task(t) for t in tasks]
    if path and Path(path).exists():
        episodes, manifest = bigrid.load_dataset(path)
        if (manifest["H"], manifest["W"]) != (H, W):
            raise bigrid.DatasetError(f"dataset grid {manifest['H']}x{manifest['W']} != config {H}x{W}")
        wanted = {t.name for t in tasks}
        episodes = [e for e in episodes if e.task in wanted]
        if {e.task for e in episodes} != wanted:
            raise bigrid.DatasetError("dataset does not cover the requested tasks")
        return episodes
    episodes = []
    for t in tasks:
        episodes.extend(bigrid.generate_demos(t, n, seed, H, W))
    if path:
        bigrid.save_dataset(path, episodes, H, W, seeds={"data_seed": seed, "demos_per_task": n})
    return episodes


def augmented(episodes, cfg: RunConfig, seed: int) -> list:
    out = list(episodes)
    for k in range(cfg.augment_copies):
        for i, ep in enumerate(episodes):
            aug = bigrid.augment(ep, seed * 100003 + k * 7919 + i, rotations=cfg.augment_rotations,
                                 max_shift=cfg.augment_max_shift, H=cfg.H, W=cfg.W)
            if aug.transform is not None:
                out.append(aug)
    return out


def _lang_cache(episodes, lang_seed, D):
    cache = {}
    for ep in episodes:
        text = ep.instruction.filled_text
        if text not in cache:
            cache[text] = embed(text, lang_seed, D)
    return cache


def unimanual_samples(episodes, lang_seed: int, D: int, H: int = 12, W: int = 12) -> dict:
    """Ego-centred samples of the acting arm only."""
    cache = _lang_cache(episodes, lang_seed, D)
    grids, props, langs, targets = [], [], [], []
    for ep in episodes:
        arm = bigrid.reset(ep.task, ep.variation_id, ep.seed, H, W).acting_arm
        side = 0 if arm == "left" else 1
        for kf in ep.keyframes:
            g, p = ego_view(kf.obs.grid, kf.obs.proprio, arm)
            grids.append(g)
            props.append(p)
            langs.append(cache[ep.instruction.filled_text])
            targets.append(action_targets([kf.action])[0, side])
    return {"grid": np.stack(grids), "proprio": np.stack(props), "lang": np.stack(langs),
            "target": np.stack(targets)}


def bimanual_samples(episodes, lang_seed: int, D: int) -> dict:
    cache = _lang_cache(episodes, lang_seed, D)
    grids, props, langs, steps = [], [], [], []
    for ep in episodes:
        for kf in ep.keyframes:
            grids.append(kf.obs.grid)
            props.append(kf.obs.proprio)
            langs.append(cache[ep.instruction.filled_text])
            steps.append(kf.action)
    return {"grid": np.stack(grids), "proprio": np.stack(props), "lang": np.stack(langs),
            "target": action_targets(steps)}


def _cast(samples: dict) -> dict:
    dt = dc.get_default_dtype()
    return {k: (v.astype(dt) if v.dtype.kind == "f" else v) for k, v in samples.items()}


# --------------------------------------------------------------------------
# loop


def _scalar(t):
    return None if t is None else float(t.data)


def fit(model, samples: dict, cfg: RunConfig, iterations: int, seed: int,
        lam_skill: float = 0.0, lam_voxel: float = 0.0, on_record=None, eval_hook=None,
        eval_at=()) -> list:
    """Minibatch optimisation. Returns the per-iteration loss records."""
    opt_cls = dc.OPTIMIZERS[cfg.optimizer]
    exclude = getattr(model, "frozen", [])
    opt = opt_cls(model.store, lr=cfg.lr, exclude=exclude)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 2718]))
    n = len(samples["target"])
    eval_at = set(eval_at)
    history = []
    for it in range(1, iterations + 1):
        idx = rng.integers(n, size=cfg.batch_size)
        batch = {k: v[idx] for k, v in samples.items()}
        model.store.zero_grad()
        if isinstance(model, BimanualModel):
            losses = model.loss(batch, lam_skill, lam_voxel)
        else:
            losses = model.loss(batch)
        losses["total"].backward()
        opt.step()
        rec = {"event": "iter", "iter": it, "total": _scalar(losses["total"]), "bc": _scalar(losses["bc"]),
               "skill": _scalar(losses.get("skill")), "voxel": _scalar(losses.get("voxel"))}
        if not np.isfinite(rec["total"]):
            raise FloatingPointError(f"non-finite loss at iteration {it}")
        history.append(rec)
        if on_record:
            on_record(rec)
        if eval_hook is not None and it in eval_at:
            eval_hook(it, model)
    return history


class MetricsWriter:
    """JSON-lines sink; one object per event."""

    def __init__(self, path):
        self.path = Path(path) if path else None
        self._fh = None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "w")

    def __call__(self, rec: dict) -> None:
        if self._fh:
            self._fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None


def pretrain_unimanual(cfg: RunConfig, seed: int | None = None) -> tuple:
    """Train one single-arm policy on all unimanual tasks jointly."""
    seed = cfg.seed if seed is None else seed
    dc.set_default_dtype(cfg.dtype)
    tasks = cfg.tasks or [t.name for t in UNIMANUAL_TASKS]
    episodes = load_or_generate(cfg.dataset, tasks, cfg.demos_per_task, cfg.data_seed, cfg.H, cfg.W)
    episodes = augmented(episodes, cfg, seed)
    samples = _cast(unimanual_samples(episodes, cfg.lang_seed, cfg.D, cfg.H, cfg.W))
    model = UnimanualModel(model_config(cfg, seed, use_skill_manager=False, use_visual_aligner=False))
    writer = MetricsWriter(cfg.metrics_out)
    t0 = time.perf_counter()
    history = fit(model, samples, cfg, cfg.pretrain_iterations, seed, on_record=writer)
    summary = {"event": "summary", "mode": "pretrain", "seed": seed, "samples": len(samples["target"]),
               "initial_bc": history[0]["bc"], "final_bc": _tail_mean(history, "bc")}
    writer(summary)
    writer.close()
    log.info("pretrain done in %.1fs, bc %.3f -> %.3f", time.perf_counter() - t0,
             summary["initial_bc"], summary["final_bc"])
    if cfg.checkpoint_out:
        save_checkpoint(cfg.checkpoint_out, model)
    return model, history


def _tail_mean(history, key, n: int = 50) -> float:
    vals = [h[key] for h in history[-n:]]
    return float(np.mean(vals))


def load_unimanual_arrays(path, cfg: RunConfig) -> dict:
    header, arrays = read_checkpoint(path)
    if header.get("kind") != "unimanual":
        raise CheckpointError(f"{path} is a {header.get('kind')} checkpoint, expected unimanual")
    validate_header(header, model_config(cfg))
    if header["model"].get("hidden") != cfg.hidden:
        raise CheckpointError("checkpoint hidden width does not match config")
    return arrays


def bimanual_training_set(cfg: RunConfig, seed: int) -> dict:
    tasks = cfg.tasks or [t.name for t in BIMANUAL_TASKS]
    episodes = load_or_generate(cfg.dataset, tasks, cfg.demos_per_task, cfg.data_seed, cfg.H, cfg.W)
    episodes = augmented(episodes, cfg, seed)
    return _cast(bimanual_samples(episodes, cfg.lang_seed, cfg.D))


def train(cfg: RunConfig, unimanual=None, seed: int | None = None, samples=None,
          eval_hook=None, eval_at=(), **flags) -> tuple:
    """Transfer a unimanual checkpoint to the bimanual task suite.

    ``unimanual`` is a checkpoint path, an array dict, or None for random
    initialisation. ``flags`` override model-config fields (ablation rows).
    Returns ``(model, history, load_report)``.
    """
    seed = cfg.seed if seed is None else seed
    dc.set_default_dtype(cfg.dtype)
    if samples is None:
        samples = bimanual_training_set(cfg, seed)
    model = BimanualModel(model_config(cfg, seed, **flags))
    report = {"loaded": [], "new": [], "unmatched": []}
    if unimanual is not None:
        arrays = load_unimanual_arrays(unimanual, cfg) if isinstance(unimanual, (str, Path)) else unimanual
        report = model.load_unimanual(arrays)
        if report["unmatched"]:
            raise CheckpointError(f"unmatched parameters: {report['unmatched']}")
    writer = MetricsWriter(cfg.metrics_out)
    history = fit(model, samples, cfg, cfg.iterations, seed, cfg.lam_skill, cfg.lam_voxel,
                  on_record=writer, eval_hook=eval_hook, eval_at=eval_at)
    writer({"event": "summary", "mode": "train", "seed": seed, "pretrained": unimanual is not None,
            "new_parameters": report["new"], "initial_total": history[0]["total"],
            "final_total": _tail_mean(history, "total")})
    writer.close()
    if cfg.checkpoint_out:
        save_checkpoint(cfg.checkpoint_out, model, extra={"pretrained": unimanual is not None})
    return model, history, report
