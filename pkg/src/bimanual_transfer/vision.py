"""Grid observations and the two-mask visual aligner."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc

CHANNELS = ("left_gripper", "right_gripper", "block", "button", "body", "target")
KIND_CHANNEL = {"block": 2, "button": 3, "tray": 4, "box": 4, "lid": 4}
PROPRIO_DIM = 7
TIME_NORM = 25


@dataclass
class GridObservation:
    grid: np.ndarray  # (H, W, C), entries in {0, 1}
    proprio: np.ndarray  # (P,)

    @property
    def shape(self):
        return self.grid.shape


@dataclass
class MaskPair:
    left: dc.Tensor  # (..., H*W) sigmoid outputs
    right: dc.Tensor


def encode_observation(state, time_norm: int = TIME_NORM) -> GridObservation:
    H, W = state.H, state.W
    grid = np.zeros((H, W, len(CHANNELS)))

    def mark(cell, ch):
        r, c = cell
        if not (0 <= r < H and 0 <= c < W):
            raise ValueError(f"cell {cell} outside {H}x{W} grid")
        grid[r, c, ch] = 1.0

    mark(state.grippers["left"].cell, 0)
    mark(state.grippers["right"].cell, 1)
    for obj in state.objects:
        for cell in obj.cells:
            mark(cell, KIND_CHANNEL[obj.kind])
    for reg in state.regions:
        for cell in reg.cells:
            mark(cell, 5)
    proprio = []
    for arm in ("left", "right"):
        g = state.grippers[arm]
        proprio += [g.cell[0] / (H - 1), g.cell[1] / (W - 1), float(g.open)]
    proprio.append(min(state.step_count / time_norm, 1.0))
    return GridObservation(grid, np.asarray(proprio))


def ego_view(grid: np.ndarray, proprio: np.ndarray, arm: str):
    """Reorder so the acting arm's gripper is channel 0 and proprio slot 0.

    Works on single observations or stacked batches.
    """
    if arm == "left":
        return grid, proprio
    g = grid.copy()
    g[..., [0, 1]] = grid[..., [1, 0]]
    p = proprio.copy()
    p[..., 0:3], p[..., 3:6] = proprio[..., 3:6], proprio[..., 0:3]
    return g, p


class VisualAligner:
    """Shared trunk over (grid, instruction, proprio) split into two mask heads."""

    def __init__(self, store: dc.ParamStore, H: int, W: int, C: int, lang_dim: int,
                 proprio_dim: int = PROPRIO_DIM, hidden: int = 256, prefix: str = "aligner"):
        self.H, self.W, self.C = H, W, C
        self.in_dim = H * W * C + lang_dim + proprio_dim
        self.trunk = dc.Linear(store, f"{prefix}.trunk", self.in_dim, hidden)
        self.head_left = dc.Linear(store, f"{prefix}.left", hidden, H * W, zero=True)
        self.head_right = dc.Linear(store, f"{prefix}.right", hidden, H * W, zero=True)

    def __call__(self, grid, lang, proprio) -> MaskPair:
        grid, lang, proprio = dc.as_tensor(grid), dc.as_tensor(lang), dc.as_tensor(proprio)
        flat_shape = grid.shape[:-3] + (self.H * self.W * self.C,)
        if grid.shape[-3:] != (self.H, self.W, self.C):
            raise ValueError(f"aligner expects grid (..., {self.H}, {self.W}, {self.C}), got {grid.shape}")
        x = dc.concat([dc.reshape(grid, flat_shape), lang, proprio], axis=-1)
        if x.shape[-1] != self.in_dim:
            raise ValueError("aligner input dimension mismatch")
        h = dc.relu(self.trunk(x))
        return MaskPair(dc.sigmoid(self.head_left(h)), dc.sigmoid(self.head_right(h)))


def align(aligner: VisualAligner, obs: GridObservation, lang) -> MaskPair:
    return aligner(obs.grid, lang, obs.proprio)


def compose(grid, mask) -> dc.Tensor:
    """``(mask * grid) concatenated with grid`` along channels -> (..., H, W, 2C)."""
    grid = dc.as_tensor(grid)
    mask = dc.as_tensor(mask)
    if mask.shape != grid.shape[:-1]:
        mask = dc.reshape(mask, grid.shape[:-1])
    if np.any(mask.data < 0) or np.any(mask.data > 1):
        raise ValueError("mask entries must lie in [0, 1]")
    return dc.concat([dc.scale_channels(grid, mask), grid], axis=-1)


def voxel_loss(masks: MaskPair, divergence: str = "sym_kl", eps: float = dc.SMOOTH_EPS) -> dc.Tensor:
    """Negated symmetric divergence between the two masks, averaged over rows.

    Each mask is flattened, normalised to a distribution and eps-smoothed.
    ``sym_kl`` is ``-(KL(l||r) + KL(r||l)) / 2``; ``true_js`` uses the mixture.
    """
    n = masks.left.shape[-1]
    left = dc.reshape(masks.left, (-1, n))
    right = dc.reshape(masks.right, (-1, n))
    if divergence == "sym_kl":
        per_row = dc.sym_kl(left, right, eps)
    elif divergence == "true_js":
        p = dc.smooth(dc.normalize(left), eps)
        q = dc.smooth(dc.normalize(right), eps)
        m = dc.scale(dc.add(p, q), 0.5)
        lm = dc.log(m)
        kl_pm = dc.sum_(dc.mul(p, dc.sub(dc.log(p), lm)), axis=-1)
        kl_qm = dc.sum_(dc.mul(q, dc.sub(dc.log(q), lm)), axis=-1)
        per_row = dc.scale(dc.add(kl_pm, kl_qm), 0.5)
    else:
        raise ValueError(f"unknown divergence {divergence!r}")
    return dc.scale(dc.mean(per_row), -1.0)


def voxel_loss_reference(left, right, eps: float = dc.SMOOTH_EPS) -> dc.Tensor:
    """Same value as ``voxel_loss`` built from generic ops (normalize + kl)."""
    p, q = dc.normalize(left), dc.normalize(right)
    return dc.scale(dc.add(dc.kl_divergence(p, q, eps), dc.kl_divergence(q, p, eps)), -0.5)


def mask_overlap(masks: MaskPair) -> float:
    """Mean over rows of ``sum_cells min(p_left, p_right)`` for normalised masks."""
    a = np.asarray(dc.as_tensor(masks.left).data, dtype=np.float64)
    b = np.asarray(dc.as_tensor(masks.right).data, dtype=np.float64)
    a = a.reshape(-1, a.shape[-1])
    b = b.reshape(a.shape)
    p = a / a.sum(axis=1, keepdims=True)
    q = b / b.sum(axis=1, keepdims=True)
    return float(np.minimum(p, q).sum(axis=1).mean())
