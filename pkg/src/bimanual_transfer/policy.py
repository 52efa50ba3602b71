"""Unimanual policy heads, bimanual wiring, behaviour-cloning losses, checkpoints."""
from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .bigrid import ARMS, ArmAction, BimanualStep, UNIMANUAL_TASKS
from .lang import EMBED_DIM, embed
from .skills import SkillManager, SkillSchedule, init_library, reconstruct, skill_loss
from .vision import PROPRIO_DIM, MaskPair, VisualAligner, compose, ego_view, voxel_loss

FORMAT_VERSION = 1
HEAD_NAMES = ("trans", "rot", "open", "col")


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    H: int = 12
    W: int = 12
    C: int = 6
    R: int = 4
    K: int = 18
    D: int = EMBED_DIM
    P: int = PROPRIO_DIM
    hidden: int = 256
    seed: int = 0
    lang_seed: int = 0
    weights_head: str = "softmax"
    divergence: str = "sym_kl"
    freeze_primitives: bool = False
    use_skill_manager: bool = True
    use_visual_aligner: bool = True
    lam_eps: float = 1.0
    templates: list = field(default_factory=lambda: [t.template for t in UNIMANUAL_TASKS])


@dataclass
class ActionHeads:
    trans: dc.Tensor  # (..., H*W)
    rot: dc.Tensor  # (..., R)
    open: dc.Tensor  # (..., 2)
    col: dc.Tensor  # (..., 2)

    def logits(self) -> tuple:
        return self.trans, self.rot, self.open, self.col


class UnimanualPolicy:
    """Multi-task single-arm policy over an ego-centred, channel-doubled grid.

    The doubled grid is projected to the hidden width, joined with language,
    proprioception and a readout of the channels under the arm's own
    gripper, and passed through two ReLU layers. Translation logits combine
    a dense head with a per-cell gate over each cell's channels and its
    row neighbours' channels, so the policy can point at cells by content
    (e.g. the left end of a two-cell object).
    """

    def __init__(self, store: dc.ParamStore, cfg: ModelConfig, prefix: str = "policy"):
        self.cfg = cfg
        H, W, C, hid = cfg.H, cfg.W, cfg.C, cfg.hidden
        self.in_proj = dc.Linear(store, f"{prefix}.in_proj", H * W * 2 * C, hid)
        self.fc1 = dc.Linear(store, f"{prefix}.fc1", hid + 2 * cfg.D + cfg.P + C, hid)
        self.fc2 = dc.Linear(store, f"{prefix}.fc2", hid, hid)
        self.trans = dc.Linear(store, f"{prefix}.trans", hid, H * W, zero=True)
        self.gate = dc.Linear(store, f"{prefix}.gate", hid, 6 * C, zero=True)
        cols = np.arange(H * W) % W
        self._neighbours = [(np.arange(H * W) + d, ((cols + d >= 0) & (cols + d < W)).astype(float)[:, None])
                            for d in (-1, 1)]
        for idx, valid in self._neighbours:
            np.clip(idx, 0, H * W - 1, out=idx)
        self.rot = dc.Linear(store, f"{prefix}.rot", hid, cfg.R, zero=True)
        self.open = dc.Linear(store, f"{prefix}.open", hid, 2, zero=True)
        self.col = dc.Linear(store, f"{prefix}.col", hid, 2, zero=True)

    def __call__(self, aug_obs, lang, proprio) -> ActionHeads:
        cfg = self.cfg
        aug_obs, lang, proprio = dc.as_tensor(aug_obs), dc.as_tensor(lang), dc.as_tensor(proprio)
        if aug_obs.shape[-3:] != (cfg.H, cfg.W, 2 * cfg.C):
            raise ValueError(f"policy expects (..., {cfg.H}, {cfg.W}, {2 * cfg.C}) input, got {aug_obs.shape}")
        if lang.shape[-1] != 2 * cfg.D or proprio.shape[-1] != cfg.P:
            raise ValueError("policy language/proprio dimension mismatch")
        lead = aug_obs.shape[:-3]
        HW, C = cfg.H * cfg.W, cfg.C
        # the second half of the channels is the unmasked grid: constant context
        raw = np.asarray(aug_obs.data[..., C:])
        under = (raw[..., 0:1] * raw).sum(axis=(-3, -2))
        own = dc.reshape(aug_obs, lead + (HW, 2 * C))
        nbrs = [dc.mul(dc.take(own, idx, axis=-2), np.broadcast_to(valid, own.shape).astype(raw.dtype))
                for idx, valid in self._neighbours]
        cells = dc.concat([own] + nbrs, axis=-1)
        flat = dc.reshape(aug_obs, lead + (HW * 2 * C,))
        x = dc.concat([self.in_proj(flat), lang, proprio, under], axis=-1)
        h = dc.relu(self.fc2(dc.relu(self.fc1(x))))
        trans = dc.add(self.trans(h), dc.matvec(cells, self.gate(h)))
        return ActionHeads(trans, self.rot(h), self.open(h), self.col(h))


def unimanual_forward(policy: UnimanualPolicy, aug_obs, lang, proprio) -> ActionHeads:
    return policy(aug_obs, lang, proprio)


def decode_action(heads: ActionHeads):
    """Argmax per head (lowest index on ties). Batched heads give a list."""
    idx = [np.argmax(np.asarray(t.data), axis=-1) for t in heads.logits()]
    if idx[0].ndim == 0:
        return ArmAction(*(int(i) for i in idx))
    return [ArmAction(int(a), int(b), int(c), int(d)) for a, b, c, d in zip(*idx)]


def action_targets(steps) -> np.ndarray:
    """(B, 2, 4) int array of (trans, rot, open, col) per arm."""
    return np.array([[[s.arm(a).trans, s.arm(a).rot, s.arm(a).open, s.arm(a).col] for a in ARMS]
                     for s in steps], dtype=np.int64)


def arm_ce(heads: ActionHeads, target) -> dc.Tensor:
    """Sum of the four head cross-entropies, averaged over leading batch rows."""
    target = np.asarray(target, dtype=np.int64)
    total = None
    for k, logit in enumerate(heads.logits()):
        ce = dc.cross_entropy(logit, target[..., k])
        total = ce if total is None else dc.add(total, ce)
    return dc.mean(total) if total.data.ndim else total


def bc_loss(heads_left: ActionHeads, heads_right: ActionHeads, target) -> dc.Tensor:
    """Behaviour-cloning loss summed over both arms and all four heads.

    ``target`` is a ``BimanualStep``, a list of them, or a (B, 2, 4) array.
    """
    if isinstance(target, BimanualStep):
        t = action_targets([target])[0]
    elif isinstance(target, (list, tuple)) and target and isinstance(target[0], BimanualStep):
        t = action_targets(target)
    else:
        t = np.asarray(target, dtype=np.int64)
    return dc.add(arm_ce(heads_left, t[..., 0, :]), arm_ce(heads_right, t[..., 1, :]))


def total_loss(bc, skill, voxel, lam_skill: float, lam_voxel: float) -> dc.Tensor:
    if lam_skill < 0 or lam_voxel < 0:
        raise ValueError("loss weights must be >= 0")
    terms = [(1.0, bc)]
    if lam_skill and skill is not None:
        terms.append((lam_skill, skill))
    if lam_voxel and voxel is not None:
        terms.append((lam_voxel, voxel))
    return dc.weighted_sum(terms) if len(terms) > 1 else dc.as_tensor(bc)


# --------------------------------------------------------------------------
# models


class UnimanualModel:
    """Single-arm pretraining model: mask fixed at one, instruction self-concatenated."""

    kind = "unimanual"

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.store = dc.ParamStore(cfg.seed)
        self.policy = UnimanualPolicy(self.store, cfg, "policy")

    def forward(self, grid_ego, lang, proprio_ego) -> ActionHeads:
        aug = np.concatenate([grid_ego, grid_ego], axis=-1)
        return self.policy(aug, np.concatenate([lang, lang], axis=-1), proprio_ego)

    def loss(self, batch) -> dict:
        heads = self.forward(batch["grid"], batch["lang"], batch["proprio"])
        bc = arm_ce(heads, batch["target"])
        return {"total": bc, "bc": bc}


@dataclass
class BimanualOutput:
    left: ActionHeads
    right: ActionHeads
    schedule: SkillSchedule | None
    masks: MaskPair | None


class BimanualModel:
    """Two arm policies plus optional skill manager and visual aligner."""

    kind = "bimanual"

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.store = dc.ParamStore(cfg.seed)
        self.policies = {arm: UnimanualPolicy(self.store, cfg, arm) for arm in ARMS}
        v_dim = cfg.H * cfg.W * cfg.C
        self.manager = self.library = self.aligner = None
        if cfg.use_skill_manager:
            self.library = init_library(cfg.templates, cfg.K, cfg.D, cfg.lang_seed, self.store,
                                        trainable=not cfg.freeze_primitives)
            self.manager = SkillManager(self.store, v_dim + cfg.D + cfg.P, cfg.K, cfg.D, cfg.hidden,
                                        cfg.weights_head)
        if cfg.use_visual_aligner:
            self.aligner = VisualAligner(self.store, cfg.H, cfg.W, cfg.C, cfg.D, cfg.P, cfg.hidden)

    @property
    def frozen(self) -> list:
        return ["library.primitives"] if (self.library is not None and self.cfg.freeze_primitives) else []

    def forward(self, grid, lang, proprio, force_masks=None, force_weights=None) -> BimanualOutput:
        cfg = self.cfg
        grid = np.asarray(grid)
        lang = np.asarray(lang)
        proprio = np.asarray(proprio)
        lead = grid.shape[:-3]
        sched = masks = None
        lang_arm = {a: np.concatenate([lang, lang], axis=-1) for a in ARMS}
        if self.manager is not None:
            v_flat = grid.reshape(lead + (-1,))
            sched = self.manager(v_flat, lang, proprio, timestep=proprio[..., -1])
            if force_weights is not None:
                zero = np.zeros(lead + (cfg.D,))
                sched = SkillSchedule(dc.Tensor(force_weights[0]), dc.Tensor(force_weights[1]),
                                      dc.Tensor(zero), dc.Tensor(zero), sched.timestep)
            for a, w, e in (("left", sched.weights_left, sched.comp_left),
                            ("right", sched.weights_right, sched.comp_right)):
                lang_arm[a] = dc.concat([reconstruct(w, e, self.library), lang], axis=-1)
        if self.aligner is not None:
            masks = self.aligner(grid, lang, proprio)
            if force_masks is not None:
                masks = MaskPair(dc.Tensor(force_masks[0]), dc.Tensor(force_masks[1]))
        heads = {}
        for a in ARMS:
            g_ego, p_ego = ego_view(grid, proprio, a)
            if masks is not None:
                aug = compose(g_ego, masks.left if a == "left" else masks.right)
            else:
                aug = np.concatenate([g_ego, g_ego], axis=-1)
            heads[a] = self.policies[a](aug, lang_arm[a], p_ego)
        return BimanualOutput(heads["left"], heads["right"], sched, masks)

    def loss(self, batch, lam_skill: float, lam_voxel: float) -> dict:
        out = self.forward(batch["grid"], batch["lang"], batch["proprio"])
        bc = bc_loss(out.left, out.right, batch["target"])
        skill = voxel = None
        if out.schedule is not None:
            n = max(int(np.prod(batch["grid"].shape[:-3])), 1)
            skill = dc.scale(skill_loss(out.schedule, self.cfg.lam_eps), 1.0 / n)
        if out.masks is not None:
            voxel = voxel_loss(out.masks, self.cfg.divergence)
        total = total_loss(bc, skill, voxel, lam_skill, lam_voxel)
        return {"total": total, "bc": bc, "skill": skill, "voxel": voxel, "out": out}

    def load_unimanual(self, arrays: dict) -> dict:
        """Copy one unimanual checkpoint into both arm policies.

        Returns ``{"loaded", "new", "unmatched"}``; manager, aligner and
        library parameters are reported as new.
        """
        def mapping(name):
            arm, _, rest = name.partition(".")
            return f"policy.{rest}" if arm in ARMS else None

        loaded, missing, unexpected = self.store.load_arrays(arrays, mapping)
        unmatched = [n for n in missing if n.partition(".")[0] in ARMS]
        new = [n for n in missing if n.partition(".")[0] not in ARMS]
        return {"loaded": loaded, "new": new, "unmatched": unmatched + unexpected}


def bimanual_forward(model: BimanualModel, obs, instruction, **kwargs) -> BimanualOutput:
    """Single-observation convenience wrapper around ``BimanualModel.forward``."""
    lang = embed(instruction.filled_text, model.cfg.lang_seed, model.cfg.D)
    return model.forward(obs.grid[None], lang[None], obs.proprio[None], **kwargs)


def build_model(kind: str, cfg: ModelConfig):
    if kind == "unimanual":
        return UnimanualModel(cfg)
    if kind == "bimanual":
        return BimanualModel(cfg)
    raise CheckpointError(f"unknown model kind {kind!r}")


# --------------------------------------------------------------------------
# checkpoints


def checkpoint_header(model) -> dict:
    cfg = asdict(model.cfg)
    return {"format_version": FORMAT_VERSION, "kind": model.kind, "H": cfg["H"], "W": cfg["W"],
            "K": cfg["K"], "D": cfg["D"], "R": cfg["R"], "C": cfg["C"], "seed": cfg["seed"],
            "model": cfg}


def save_checkpoint(path, model, extra: dict | None = None) -> None:
    header = checkpoint_header(model)
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode()
    arrays = {"__header__": np.frombuffer(blob, dtype=np.uint8)}
    for name, arr in model.store.state_dict().items():
        arrays[name] = np.ascontiguousarray(arr, dtype=np.float64)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(buf.getvalue())


def read_checkpoint(path) -> tuple:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with np.load(path) as z:
            header = json.loads(bytes(z["__header__"]).decode())
            arrays = {k: z[k] for k in z.files if k != "__header__"}
    except (KeyError, ValueError, OSError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {header.get('format_version')}")
    return header, arrays


def validate_header(header: dict, cfg: ModelConfig) -> None:
    for key in ("H", "W", "K", "D", "R", "C"):
        if header.get(key) != getattr(cfg, key):
            raise CheckpointError(f"checkpoint {key}={header.get(key)} does not match config {getattr(cfg, key)}")


def load_model(path):
    """Rebuild the model recorded in a checkpoint header and load its weights."""
    header, arrays = read_checkpoint(path)
    mc = header["model"]
    cfg = ModelConfig(**mc)
    validate_header(header, cfg)
    model = build_model(header["kind"], cfg)
    loaded, missing, unexpected = model.store.load_arrays(arrays)
    if missing or unexpected:
        raise CheckpointError(f"checkpoint parameters mismatch: missing={missing} unexpected={unexpected}")
    return model, header
