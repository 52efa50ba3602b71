"""Skill library, per-arm skill scheduling and the sparsity objective."""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import kernels
from .lang import template_embeddings

WEIGHT_HEADS = ("softmax", "raw")


@dataclass
class SkillLibrary:
    primitives: dc.Tensor  # (K, D)
    trainable: bool = True
    init_seed: int = 0

    @property
    def K(self) -> int:
        return self.primitives.shape[0]

    @property
    def D(self) -> int:
        return self.primitives.shape[1]


@dataclass
class SkillSchedule:
    weights_left: dc.Tensor  # (..., K)
    weights_right: dc.Tensor
    comp_left: dc.Tensor  # (..., D)
    comp_right: dc.Tensor
    timestep: int | np.ndarray = 0


def library_rows(templates, K: int, D: int, seed: int = 0) -> np.ndarray:
    if K <= 0 or D <= 0:
        raise ValueError("K and D must be positive")
    templates = list(templates)
    rows = np.zeros((K, D))
    n = min(K, len(templates))
    if n:
        rows[:n] = np.stack(template_embeddings(templates[:n], seed, D))
    if K > n:
        extra = np.random.default_rng(np.random.SeedSequence([seed, 31337])).standard_normal((K - n, D))
        rows[n:] = extra / np.linalg.norm(extra, axis=1, keepdims=True)
    return rows


def init_library(templates, K: int, D: int, seed: int = 0, store: dc.ParamStore | None = None,
                 trainable: bool = True, name: str = "library.primitives") -> SkillLibrary:
    """First ``min(K, len(templates))`` rows are template embeddings, the rest seeded unit vectors."""
    rows = library_rows(templates, K, D, seed)
    if store is not None:
        t = store.add(name, (K, D), "zeros")
        t.data = rows.astype(t.data.dtype)
    else:
        t = dc.Tensor(rows, requires_grad=trainable)
    return SkillLibrary(t, trainable, seed)


class SkillManager:
    """(grid, instruction, proprio) -> per-arm skill weights and compensation.

    Two hidden ReLU layers feed four heads; output heads start at zero so an
    untrained softmax manager weights every primitive equally.
    """

    def __init__(self, store: dc.ParamStore, in_dim: int, K: int, D: int, hidden: int = 256,
                 weights_head: str = "softmax", prefix: str = "manager"):
        if weights_head not in WEIGHT_HEADS:
            raise ValueError(f"weights_head must be one of {WEIGHT_HEADS}")
        self.in_dim, self.K, self.D = in_dim, K, D
        self.weights_head = weights_head
        self.fc1 = dc.Linear(store, f"{prefix}.fc1", in_dim, hidden)
        self.fc2 = dc.Linear(store, f"{prefix}.fc2", hidden, hidden)
        self.w_left = dc.Linear(store, f"{prefix}.w_left", hidden, K, zero=True)
        self.w_right = dc.Linear(store, f"{prefix}.w_right", hidden, K, zero=True)
        self.e_left = dc.Linear(store, f"{prefix}.e_left", hidden, D, zero=True)
        self.e_right = dc.Linear(store, f"{prefix}.e_right", hidden, D, zero=True)

    def __call__(self, v_flat, lang, proprio, timestep=0) -> SkillSchedule:
        x = dc.concat([dc.as_tensor(v_flat), dc.as_tensor(lang), dc.as_tensor(proprio)], axis=-1)
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"manager input has {x.shape[-1]} features, expected {self.in_dim}")
        h = dc.relu(self.fc2(dc.relu(self.fc1(x))))
        act = dc.softmax if self.weights_head == "softmax" else (lambda t: t)
        return SkillSchedule(act(self.w_left(h)), act(self.w_right(h)),
                             self.e_left(h), self.e_right(h), timestep)


def schedule(manager: SkillManager, v_flat, lang, proprio, timestep=0) -> SkillSchedule:
    return manager(v_flat, lang, proprio, timestep)


def reconstruct(w, comp, library) -> dc.Tensor:
    """``sum_k w_k z_k + comp``."""
    Z = library.primitives if isinstance(library, SkillLibrary) else dc.as_tensor(library)
    w, comp = dc.as_tensor(w), dc.as_tensor(comp)
    if w.shape[-1] != Z.shape[0] or comp.shape[-1] != Z.shape[1] or w.shape[:-1] != comp.shape[:-1]:
        raise ValueError(f"reconstruct: shapes w{w.shape} comp{comp.shape} library{Z.shape}")
    return dc.add(dc.matmul(w, Z), comp)


def skill_loss(sched: SkillSchedule, lam_eps: float) -> dc.Tensor:
    """``|w_l|_1 + |w_r|_1 + lam_eps * (|E_l|_21 + |E_r|_21)``.

    With batched schedules each row of ``E`` is one timestep's compensation.
    """
    if lam_eps < 0:
        raise ValueError("lam_eps must be >= 0")
    return dc.weighted_sum([
        (1.0, dc.l1_norm(sched.weights_left)),
        (1.0, dc.l1_norm(sched.weights_right)),
        (lam_eps, dc.l21_norm(sched.comp_left)),
        (lam_eps, dc.l21_norm(sched.comp_right)),
    ])


def decomposability(w) -> float:
    """Shannon entropy (nats) of a weight vector on the simplex; ``0 ln 0 = 0``."""
    w = np.asarray(w.data if isinstance(w, dc.Tensor) else w, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    nz = w[w > 0]
    return float(-(nz * np.log(nz)).sum())


# --------------------------------------------------------------------------
# skill traces


def export_skill_trace(rollout) -> list:
    """One record per keyframe per arm.

    ``rollout`` is a sequence of dicts with ``timestep``, ``weights_left`` and
    ``weights_right`` (plus optional ``task``/``episode`` tags).
    """
    rollout = list(rollout)
    if not rollout:
        raise ValueError("empty rollout")
    records = []
    for step in rollout:
        for arm in ("left", "right"):
            w = np.asarray(step[f"weights_{arm}"], dtype=np.float64)
            rec = {k: step[k] for k in ("task", "episode") if k in step}
            rec.update({
                "timestep": int(step["timestep"]),
                "arm": arm,
                "weights": [float(x) for x in w],
                "entropy": decomposability(np.clip(w, 0, None)),
                "nearest_primitive_index": int(np.argmax(w)),
            })
            records.append(rec)
    return records


def write_trace(path, records) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# sparse recovery benchmark (raw weight head)


def fit_sparse_weights(library, target, lam: float, iters: int = 500) -> np.ndarray:
    """Minimise ``0.5 |reconstruct(w, 0) - target|^2 + lam * |w|_1`` over raw weights.

    Proximal gradient: the smooth part is differentiated through the tape,
    the L1 part is handled by soft-thresholding.
    """
    Z = np.asarray(library.primitives.data if isinstance(library, SkillLibrary) else library, dtype=np.float64)
    K, D = Z.shape
    y = np.asarray(target, dtype=np.float64)
    step = 1.0 / max(np.linalg.norm(Z, 2) ** 2, 1e-12)
    Zt = dc.Tensor(Z)
    zero = np.zeros(D)
    w = np.zeros(K)
    for _ in range(iters):
        wt = dc.Tensor(w, requires_grad=True)
        diff = dc.sub(reconstruct(wt, zero, Zt), y)
        dc.scale(dc.sum_(dc.mul(diff, diff)), 0.5).backward()
        u = w - step * wt.grad
        w_new = np.sign(u) * np.maximum(np.abs(u) - step * lam, 0.0)
        if np.max(np.abs(w_new - w)) < 1e-12:
            w = w_new
            break
        w = w_new
    return w


def lasso_oracle(library, target, lam: float) -> np.ndarray:
    """Coordinate-descent lasso on the same objective (independent solver)."""
    Z = np.asarray(library, dtype=np.float64)
    return kernels.lasso_cd(Z.T, np.asarray(target, dtype=np.float64), lam, 5000, 1e-12)


def brute_force_support(library, target, max_size: int = 2, tol: float = 0.0) -> tuple:
    """Smallest support (size <= max_size) whose least-squares residual is <= tol.

    Falls back to the best-residual support of the largest size.
    """
    Z = np.asarray(library, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    best = None
    for size in range(1, max_size + 1):
        for S in itertools.combinations(range(Z.shape[0]), size):
            A = Z[list(S)].T
            coef, *_ = np.linalg.lstsq(A, y, rcond=None)
            res = float(np.linalg.norm(A @ coef - y))
            if best is None or res < best[0]:
                best = (res, S)
        if best[0] <= tol:
            return best[1]
    return best[1]


def synthetic_problem(rng, K: int = 8, D: int = 32, max_support: int = 2, sigma: float = 0.01):
    """Random unit-row library plus a target built from <= max_support atoms."""
    Z = rng.standard_normal((K, D))
    Z /= np.linalg.norm(Z, axis=1, keepdims=True)
    size = int(rng.integers(1, max_support + 1))
    support = np.sort(rng.choice(K, size=size, replace=False))
    w = np.zeros(K)
    w[support] = rng.uniform(0.5, 1.0, size) * rng.choice([-1.0, 1.0], size)
    y = w @ Z + sigma * rng.standard_normal(D)
    return Z, y, w, tuple(int(s) for s in support)


def support_of(w, threshold: float = 0.05) -> tuple:
    return tuple(int(i) for i in np.flatnonzero(np.abs(w) > threshold))


def support_f1(true_supports, pred_supports) -> float:
    tp = fp = fn = 0
    for t, p in zip(true_supports, pred_supports):
        t, p = set(t), set(p)
        tp += len(t & p)
        fp += len(p - t)
        fn += len(t - p)
    return 2 * tp / max(2 * tp + fp + fn, 1)
