"""Closed-loop evaluation of policies on the gridworld task suites."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import bigrid
from .bigrid import ARMS, BimanualStep, MAX_EVAL_STEPS
from .lang import embed
from .policy import BimanualModel, UnimanualModel, decode_action
from .skills import decomposability
from .vision import ego_view, encode_observation


class ExpertAgent:
    """The scripted expert, used as an oracle upper bound."""

    name = "expert"

    def act(self, tasks, states, variations=None):
        return [bigrid.scripted_expert(t, s) for t, s in zip(tasks, states)], None


class RandomAgent:
    """Uniform over every head of both arms."""

    name = "random"

    def __init__(self, seed: int = 0, R: int = bigrid.ROT_BINS):
        self.rng = np.random.default_rng(seed)
        self.R = R

    def act(self, tasks, states, variations=None):
        out = []
        for s in states:
            arms = []
            for _ in ARMS:
                arms.append(bigrid.ArmAction(int(self.rng.integers(s.H * s.W)), int(self.rng.integers(self.R)),
                                             int(self.rng.integers(2)), int(self.rng.integers(2))))
            out.append(BimanualStep(*arms))
        return out, None


class _LangCache(dict):
    def __init__(self, seed, dim):
        super().__init__()
        self.seed, self.dim = seed, dim

    def get_for(self, task, variation_id):
        key = (task.name, variation_id)
        if key not in self:
            self[key] = embed(task.instruction(variation_id).filled_text, self.seed, self.dim)
        return self[key]


class BimanualAgent:
    """Batched argmax decoding of a ``BimanualModel``; also returns diagnostics."""

    name = "bimanual"

    def __init__(self, model: BimanualModel):
        self.model = model
        self.lang = _LangCache(model.cfg.lang_seed, model.cfg.D)

    def act(self, tasks, states, variations=None):
        obs = [encode_observation(s) for s in states]
        grid = np.stack([o.grid for o in obs])
        prop = np.stack([o.proprio for o in obs])
        lang = np.stack([self.lang.get_for(t, v) for t, v in zip(tasks, variations)])
        out = self.model.forward(grid, lang, prop)
        left, right = decode_action(out.left), decode_action(out.right)
        diag = {}
        if out.schedule is not None:
            diag["weights_left"] = np.asarray(out.schedule.weights_left.data)
            diag["weights_right"] = np.asarray(out.schedule.weights_right.data)
        if out.masks is not None:
            diag["mask_left"] = np.asarray(out.masks.left.data)
            diag["mask_right"] = np.asarray(out.masks.right.data)
        return [BimanualStep(a, b) for a, b in zip(left, right)], diag


class UnimanualAgent:
    """Runs a single-arm model on the acting arm; the other arm holds still."""

    name = "unimanual"

    def __init__(self, model: UnimanualModel):
        self.model = model
        self.lang = _LangCache(model.cfg.lang_seed, model.cfg.D)

    def act(self, tasks, states, variations=None):
        grids, props, langs = [], [], []
        for t, s, v in zip(tasks, states, variations):
            o = encode_observation(s)
            g, p = ego_view(o.grid, o.proprio, s.acting_arm)
            grids.append(g)
            props.append(p)
            langs.append(self.lang.get_for(t, v))
        heads = self.model.forward(np.stack(grids), np.stack(langs), np.stack(props))
        acts = decode_action(heads)
        out = []
        for s, a in zip(states, acts):
            pair = {arm: (a if arm == s.acting_arm else bigrid.noop_action(s, arm)) for arm in ARMS}
            out.append(BimanualStep(pair["left"], pair["right"]))
        return out, None


def agent_for(model):
    if isinstance(model, BimanualModel):
        return BimanualAgent(model)
    if isinstance(model, UnimanualModel):
        return UnimanualAgent(model)
    raise TypeError(f"no agent for {type(model).__name__}")


def _overlap_rows(a, b) -> np.ndarray:
    p = a / a.sum(axis=1, keepdims=True)
    q = b / b.sum(axis=1, keepdims=True)
    return np.minimum(p, q).sum(axis=1)


def episode_plan(tasks, episodes: int, seed: int) -> list:
    """(task, variation, episode seed, episode index) for every rollout, in a fixed order."""
    plan = []
    for name in tasks:
        task = bigrid.get_task(name)
        for i in range(episodes):
            plan.append((task, i % len(task.variations), bigrid.derive_seed(seed, task.name, i), i))
    return plan


def run_episodes(agent, tasks, episodes: int, seed: int, H: int = 12, W: int = 12,
                 max_steps: int = MAX_EVAL_STEPS, trace: list | None = None) -> dict:
    """Roll out every episode in lock-step; one batched forward per keyframe."""
    plan = episode_plan(tasks, episodes, seed)
    states = [bigrid.reset(t, v, s, H, W) for t, v, s, _ in plan]
    done = [bigrid.success(st, t) for st, (t, *_rest) in zip(states, plan)]
    overlaps, entropy = [], {"left": [], "right": []}
    for t_step in range(max_steps):
        live = [i for i, d in enumerate(done) if not d and not states[i].failed]
        if not live:
            break
        tasks_l = [plan[i][0] for i in live]
        vars_l = [plan[i][1] for i in live]
        actions, diag = agent.act(tasks_l, [states[i] for i in live], vars_l)
        diag = diag or {}
        if "mask_left" in diag:
            overlaps.extend(_overlap_rows(diag["mask_left"], diag["mask_right"]).tolist())
        if "weights_left" in diag:
            for arm in ARMS:
                w = diag[f"weights_{arm}"]
                entropy[arm].extend(decomposability(np.clip(row, 0, None)) for row in w)
            if trace is not None:
                for j, i in enumerate(live):
                    trace.append({"task": plan[i][0].name, "episode": plan[i][3], "timestep": t_step,
                                  "weights_left": diag["weights_left"][j],
                                  "weights_right": diag["weights_right"][j]})
        for i, a in zip(live, actions):
            states[i], _info = bigrid.step(states[i], a)
            done[i] = bigrid.success(states[i], plan[i][0])
    per_task = {}
    for name in tasks:
        hits = [done[k] for k, p in enumerate(plan) if p[0].name == bigrid.get_task(name).name]
        per_task[bigrid.get_task(name).name] = 100.0 * sum(hits) / len(hits)
    return {
        "per_task_success": per_task,
        "mask_overlap": float(np.mean(overlaps)) if overlaps else None,
        "entropy": {a: (float(np.mean(entropy[a])) if entropy[a] else None) for a in ARMS},
    }


def metrics_record(run_id: str, rollout: dict, episodes: int, seed: int, losses: dict | None = None) -> dict:
    per_task = rollout["per_task_success"]
    return {
        "event": "summary",
        "run_id": run_id,
        "episodes_per_task": episodes,
        "eval_seed": seed,
        "per_task_success": per_task,
        "average_success": average(per_task),
        "mean_mask_overlap": rollout["mask_overlap"],
        "mean_weight_entropy": rollout["entropy"],
        "losses": losses or {},
    }


def average(per_task: dict) -> float:
    vals = [per_task[k] for k in sorted(per_task)]
    return float(sum(vals) / len(vals))


def default_tasks(model) -> list:
    suite = bigrid.BIMANUAL_TASKS if isinstance(model, BimanualModel) else bigrid.UNIMANUAL_TASKS
    return [t.name for t in suite]


def evaluate(model, tasks=None, episodes: int = 50, seed: int = 1000, run_id: str = "eval",
             trace: list | None = None) -> dict:
    """Success rate per task (percent), plus mask-overlap and entropy diagnostics."""
    tasks = tasks or default_tasks(model)
    rollout = run_episodes(agent_for(model), tasks, episodes, seed, model.cfg.H, model.cfg.W, trace=trace)
    return metrics_record(run_id, rollout, episodes, seed)


def write_metrics(path, record: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(record, sort_keys=True) + "\n")
