"""Keyframe gridworld with two grippers.

Each step teleports both grippers to their target cells. Closing on a
grabbable object attaches it, opening releases it where the gripper stands.
Trays and boxes are heavy: they only move when both grippers hold them and
move by the same displacement. A step in which both arms target the same
cell is a collision and fails the episode.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .lang import Instruction
from .vision import CHANNELS, GridObservation, encode_observation

H_DEFAULT = 12
W_DEFAULT = 12
ROT_BINS = 4
MAX_EVAL_STEPS = 25
ARMS = ("left", "right")

Cell = tuple


class LayoutError(ValueError):
    pass


class ExpertFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class ArmAction:
    trans: int
    rot: int
    open: int
    col: int = 0

    def cell(self, width: int) -> Cell:
        return divmod(self.trans, width)

    def to_dict(self) -> dict:
        return {"trans": self.trans, "rot": self.rot, "open": self.open, "col": self.col}

    @classmethod
    def from_dict(cls, d: dict) -> "ArmAction":
        return cls(int(d["trans"]), int(d["rot"]), int(d["open"]), int(d.get("col", 0)))


@dataclass(frozen=True)
class BimanualStep:
    left: ArmAction
    right: ArmAction

    def arm(self, name: str) -> ArmAction:
        return self.left if name == "left" else self.right


@dataclass
class Gripper:
    cell: Cell
    rot: int = 0
    open: int = 1
    held: int | None = None


@dataclass
class WorldObject:
    kind: str
    cells: list
    color: str = ""
    pressed: bool = False
    grip_rot: int | None = None  # required gripper orientation bin; None accepts any

    def accepts(self, rot: int) -> bool:
        return self.grip_rot is None or int(rot) == self.grip_rot

    @property
    def heavy(self) -> bool:
        return self.kind in ("tray", "box")

    @property
    def grabbable(self) -> bool:
        return self.kind != "button"


@dataclass
class Region:
    cells: list
    tag: str = "target"


@dataclass
class WorldState:
    H: int
    W: int
    grippers: dict
    objects: list = field(default_factory=list)
    regions: list = field(default_factory=list)
    anchors: dict = field(default_factory=dict)
    acting_arm: str | None = None
    step_count: int = 0
    failed: bool = False

    def copy(self) -> "WorldState":
        return copy.deepcopy(self)

    def in_bounds(self, cell) -> bool:
        return 0 <= cell[0] < self.H and 0 <= cell[1] < self.W

    def holders(self, obj_index: int) -> list:
        return [a for a in ARMS if self.grippers[a].held == obj_index]

    def find(self, kind: str) -> list:
        return [i for i, o in enumerate(self.objects) if o.kind == kind]


@dataclass(frozen=True)
class TaskSpec:
    name: str
    arity: str
    sync: bool
    template: str
    variations: tuple
    predicate: str
    max_keyframes: int
    rot: int

    def instruction(self, variation_id: int) -> Instruction:
        if not 0 <= variation_id < len(self.variations):
            raise ValueError(f"{self.name}: variation {variation_id} out of range")
        return Instruction.fill(self.template, self.variations[variation_id], variation_id)


_COLORS3 = (("red",), ("green",), ("blue",))

UNIMANUAL_TASKS = (
    TaskSpec("pick-block", "unimanual", False, "pick up the ___ block", _COLORS3, "held_block", 3, 0),
    TaskSpec("place-block", "unimanual", False, "place the ___ block on the target", _COLORS3, "placed_block", 5, 0),
    TaskSpec("push-block", "unimanual", False, "push the ___ block to the target", _COLORS3, "placed_block", 5, 1),
    TaskSpec("press-button", "unimanual", False, "press the ___ button", _COLORS3, "buttons_pressed", 3, 2),
    TaskSpec("slide-to-target", "unimanual", False, "slide the block to the ___ target", _COLORS3, "placed_block", 5, 3),
    TaskSpec("open-lid", "unimanual", False, "open the ___ lid", _COLORS3, "lid_open", 5, 1),
)

BIMANUAL_TASKS = (
    TaskSpec("lift-tray", "bimanual", True, "lift the tray", ((),), "tray_lifted", 4, 0),
    TaskSpec("push-box", "bimanual", True, "push the box to the red area", ((),), "box_in_region", 4, 1),
    TaskSpec("handover", "bimanual", False, "hand over the ___ item",
             (("red",), ("green",), ("blue",), ("yellow",), ("purple",)), "placed_block", 8, 0),
    TaskSpec("press-two-buttons", "bimanual", False, "push the ___ and ___ button",
             (("red", "green"), ("blue", "yellow"), ("green", "blue"), ("purple", "red"), ("yellow", "purple")),
             "buttons_pressed", 3, 2),
)

TASKS = {t.name: t for t in UNIMANUAL_TASKS + BIMANUAL_TASKS}
TASK_INDEX = {name: i for i, name in enumerate(TASKS)}


def get_task(name) -> TaskSpec:
    if isinstance(name, TaskSpec):
        return name
    try:
        return TASKS[name]
    except KeyError:
        raise KeyError(f"unknown task {name!r}") from None


# --------------------------------------------------------------------------
# reset / layouts


def _free(rng, state, rows, cols, taken, width=1):
    """Uniformly pick a horizontal run of ``width`` cells avoiding ``taken``."""
    options = []
    for r in rows:
        for c in cols:
            run = [(r, c + k) for k in range(width)]
            if all(state.in_bounds(x) and x not in taken for x in run):
                options.append(run)
    if not options:
        raise LayoutError("no free cells for layout")
    return options[int(rng.integers(len(options)))]


def _layout(task: TaskSpec, state: WorldState, rng, color: str) -> None:
    H, W = state.H, state.W
    half = W // 2
    taken = set(state.anchors.values())
    objs, regions = state.objects, state.regions
    body_rows = range(0, H - 1)
    name = task.name

    def claim(run):
        taken.update(run)
        return [tuple(x) for x in run]

    if name == "pick-block":
        objs.append(WorldObject("block", claim(_free(rng, state, body_rows, range(W), taken)), color))
    elif name == "place-block":
        objs.append(WorldObject("block", claim(_free(rng, state, body_rows, range(W), taken)), color))
        regions.append(Region(claim(_free(rng, state, body_rows, range(W), taken))))
    elif name in ("push-block", "slide-to-target"):
        block = _free(rng, state, body_rows, range(W), taken)
        r, c = block[0]
        if name == "push-block":
            cands = [(rr, c) for rr in body_rows if abs(rr - r) >= 2]
        else:
            cands = [(r, cc) for cc in range(W) if abs(cc - c) >= 2]
        cands = [x for x in cands if x not in taken]
        if not cands:
            raise LayoutError("no target cell")
        objs.append(WorldObject("block", claim(block), color))
        regions.append(Region(claim([cands[int(rng.integers(len(cands)))]])))
    elif name == "press-button":
        objs.append(WorldObject("button", claim(_free(rng, state, body_rows, range(W), taken)), color))
    elif name == "open-lid":
        lid = claim(_free(rng, state, body_rows, range(W - 1), taken, width=2))
        near = set()
        for (r, c) in lid:
            near.update((r + dr, c) for dr in (-1, 1))
        region = _free(rng, state, body_rows, range(W - 1), taken | near, width=2)
        objs.append(WorldObject("lid", lid, color))
        regions.append(Region(claim(region)))
    elif name == "lift-tray":
        lift_row = state.anchors["lift_row"][0]
        zone = [(r, c) for r in range(lift_row) for c in range(W)]
        tray = _free(rng, state, range(H // 2, H - 2), range(1, W - 4), taken, width=4)
        objs.append(WorldObject("tray", claim(tray)))
        regions.append(Region(zone, "lift-zone"))
    elif name == "push-box":
        box = _free(rng, state, range(H // 2 - 1, H - 2), range(1, W - 2), taken, width=2)
        objs.append(WorldObject("box", claim(box)))
        regions.append(Region(claim(_free(rng, state, range(0, 3), range(1, W - 2), taken, width=2)), "red-area"))
    elif name == "handover":
        objs.append(WorldObject("block", claim(_free(rng, state, range(1, H - 2), range(half + 1, W - 1), taken)), color))
        regions.append(Region(claim(_free(rng, state, range(1, H - 2), range(1, half - 1), taken))))
    elif name == "press-two-buttons":
        c1, c2 = task.variations[0] if not color else color
        objs.append(WorldObject("button", claim(_free(rng, state, range(0, H - 2), range(0, half - 1), taken)), c1))
        objs.append(WorldObject("button", claim(_free(rng, state, range(0, H - 2), range(half + 1, W), taken)), c2))
    else:
        raise KeyError(f"no layout for {name}")


def _home_cells(H, W):
    return {"left": (H - 1, 1), "right": (H - 1, W - 2)}


def episode_rng(task_name: str, variation_id: int, seed: int):
    return np.random.default_rng(np.random.SeedSequence([int(seed), TASK_INDEX[task_name], int(variation_id)]))


def reset(task, variation_id: int, seed: int, H: int = H_DEFAULT, W: int = W_DEFAULT) -> WorldState:
    task = get_task(task)
    if H < 8 or W < 8:
        raise LayoutError("grid must be at least 8x8 for the task layouts")
    if not 0 <= variation_id < len(task.variations):
        raise ValueError(f"{task.name}: variation {variation_id} out of range")
    rng = episode_rng(task.name, variation_id, seed)
    homes = _home_cells(H, W)
    state = WorldState(H, W, {a: Gripper(homes[a]) for a in ARMS})
    state.anchors = {
        "home_left": homes["left"],
        "home_right": homes["right"],
        "handover": (H // 2 - 1, W // 2),
        "lift_row": (3, 0),
    }
    fill = task.variations[variation_id]
    color = fill if task.name == "press-two-buttons" else (fill[0] if fill else "")
    _layout(task, state, rng, color)
    for obj in state.objects:
        obj.grip_rot = task.rot
    if task.arity == "unimanual":
        state.acting_arm = ARMS[int(rng.integers(2))]
    return state


# --------------------------------------------------------------------------
# dynamics


def step(state: WorldState, action: BimanualStep):
    """Apply one keyframe action pair. Returns ``(new_state, info)``."""
    s = state.copy()
    info = {"collision": False, "clamped": False}
    targets = {}
    for arm in ARMS:
        a = action.arm(arm)
        r, c = divmod(int(a.trans), s.W)
        rc = (min(max(r, 0), s.H - 1), min(max(c, 0), s.W - 1))
        if rc != (r, c) or not 0 <= a.trans < s.H * s.W:
            info["clamped"] = True
        targets[arm] = rc
    s.step_count += 1
    if targets["left"] == targets["right"]:
        info["collision"] = True
        s.failed = True
        return s, info

    for arm in ARMS:
        g = s.grippers[arm]
        if g.open == 0 and action.arm(arm).open == 1:
            g.held = None
            g.open = 1

    disp = {arm: (targets[arm][0] - s.grippers[arm].cell[0], targets[arm][1] - s.grippers[arm].cell[1])
            for arm in ARMS}
    for idx, obj in enumerate(s.objects):
        holders = s.holders(idx)
        if not holders:
            continue
        ds = {disp[a] for a in holders}
        d = next(iter(ds))
        moved = [(r + d[0], c + d[1]) for r, c in obj.cells]
        ok = len(ds) == 1 and all(s.in_bounds(x) for x in moved)
        if obj.heavy and len(holders) < 2 and d != (0, 0):
            ok = False
        if ok:
            obj.cells = moved
        else:
            for a in holders:
                s.grippers[a].held = None

    for arm in ARMS:
        g = s.grippers[arm]
        a = action.arm(arm)
        g.cell = targets[arm]
        g.rot = int(a.rot) % ROT_BINS
        if g.open == 1 and a.open == 0:
            g.open = 0
            for idx, obj in enumerate(s.objects):
                if g.cell not in obj.cells or not obj.accepts(g.rot):
                    continue
                if obj.grabbable:
                    g.held = idx
                    break
                obj.pressed = True
    return s, info


# --------------------------------------------------------------------------
# success predicates


def _region_cells(state):
    return set(x for reg in state.regions for x in reg.cells)


def _pred_held_block(s):
    return any(s.holders(i) for i in s.find("block"))


def _pred_placed_block(s):
    region = _region_cells(s)
    blocks = s.find("block")
    return bool(blocks) and all(not s.holders(i) and set(s.objects[i].cells) <= region for i in blocks)


def _pred_buttons(s):
    buttons = s.find("button")
    return bool(buttons) and all(s.objects[i].pressed for i in buttons)


def _pred_lid(s):
    region = _region_cells(s)
    return all(not s.holders(i) and set(s.objects[i].cells) <= region for i in s.find("lid"))


def _pred_tray(s):
    zone = _region_cells(s)
    for i in s.find("tray"):
        held_cells = {s.grippers[a].cell for a in s.holders(i)}
        ends = {s.objects[i].cells[0], s.objects[i].cells[-1]}
        if len(s.holders(i)) != 2 or held_cells != ends or not set(s.objects[i].cells) <= zone:
            return False
    return bool(s.find("tray"))


def _pred_box(s):
    region = _region_cells(s)
    return bool(s.find("box")) and all(set(s.objects[i].cells) <= region for i in s.find("box"))


PREDICATES = {
    "held_block": _pred_held_block,
    "placed_block": _pred_placed_block,
    "buttons_pressed": _pred_buttons,
    "lid_open": _pred_lid,
    "tray_lifted": _pred_tray,
    "box_in_region": _pred_box,
}


def success(state: WorldState, task) -> bool:
    task = get_task(task)
    try:
        pred = PREDICATES[task.predicate]
    except KeyError:
        raise KeyError(f"unknown predicate {task.predicate!r}") from None
    return (not state.failed) and pred(state)


# --------------------------------------------------------------------------
# scripted experts


def _idx(state, cell) -> int:
    return int(cell[0]) * state.W + int(cell[1])


def _noop(state, arm) -> ArmAction:
    g = state.grippers[arm]
    return ArmAction(_idx(state, g.cell), g.rot, g.open, 0)


noop_action = _noop


def _go(state, arm, cell, rot, open_) -> ArmAction:
    g = state.grippers[arm]
    carrying = g.held is not None and tuple(cell) != tuple(g.cell)
    return ArmAction(_idx(state, cell), rot, open_, int(carrying))


def _release(state, arm, rot) -> ArmAction:
    return ArmAction(_idx(state, state.grippers[arm].cell), rot, 1, 0)


def _carry_and_place(state, arm, obj_index, goal, rot):
    """Grab object, carry its grip cell to ``goal``, release."""
    g = state.grippers[arm]
    obj = state.objects[obj_index]
    if g.held == obj_index:
        if tuple(g.cell) == tuple(goal):
            return _release(state, arm, rot)
        return _go(state, arm, goal, rot, 0)
    return _go(state, arm, obj.cells[0], rot, 0)


def _unimanual_action(task, state, arm):
    name = task.name
    rot = task.rot
    if name == "pick-block":
        return _go(state, arm, state.objects[state.find("block")[0]].cells[0], rot, 0)
    if name in ("place-block", "push-block", "slide-to-target"):
        return _carry_and_place(state, arm, state.find("block")[0], state.regions[0].cells[0], rot)
    if name == "press-button":
        return _go(state, arm, state.objects[state.find("button")[0]].cells[0], rot, 0)
    if name == "open-lid":
        return _carry_and_place(state, arm, state.find("lid")[0], state.regions[0].cells[0], rot)
    raise ExpertFailure(f"no expert for {name}")


def _bimanual_pair_grab(state, obj_index, rot, goal_left):
    """Two-arm grasp of a heavy object at its end cells, then joint move."""
    obj = state.objects[obj_index]
    ends = {"left": obj.cells[0], "right": obj.cells[-1]}
    held = {a: state.grippers[a].held == obj_index for a in ARMS}
    if all(held.values()):
        d = (goal_left[0] - obj.cells[0][0], goal_left[1] - obj.cells[0][1])
        acts = {a: _go(state, a, (state.grippers[a].cell[0] + d[0], state.grippers[a].cell[1] + d[1]), rot, 0)
                for a in ARMS}
        return BimanualStep(acts["left"], acts["right"])
    acts = {a: (_noop(state, a) if held[a] else _go(state, a, ends[a], rot, 0)) for a in ARMS}
    return BimanualStep(acts["left"], acts["right"])


def _handover_action(task, state):
    rot = task.rot
    bi = state.find("block")[0]
    block = state.objects[bi]
    spot = tuple(state.anchors["handover"])
    L, R = state.grippers["left"], state.grippers["right"]
    goal = state.regions[0].cells[0]
    if L.held == bi:
        if tuple(L.cell) == tuple(goal):
            return BimanualStep(_release(state, "left", rot), _noop(state, "right"))
        return BimanualStep(_go(state, "left", goal, rot, 0), _noop(state, "right"))
    if R.held == bi:
        if tuple(R.cell) == spot:
            return BimanualStep(_noop(state, "left"), _release(state, "right", rot))
        return BimanualStep(_noop(state, "left"), _go(state, "right", spot, rot, 0))
    if tuple(block.cells[0]) == spot:
        return BimanualStep(_go(state, "left", spot, rot, 0),
                            _go(state, "right", state.anchors["home_right"], rot, 1))
    return BimanualStep(_noop(state, "left"), _go(state, "right", block.cells[0], rot, 0))


def scripted_expert(task, state: WorldState) -> BimanualStep:
    """Next keyframe action pair of the closed-loop scripted demonstrator."""
    task = get_task(task)
    if state.failed:
        raise ExpertFailure("episode already failed")
    if success(state, task):
        return BimanualStep(_noop(state, "left"), _noop(state, "right"))
    if task.arity == "unimanual":
        acting = state.acting_arm
        idle = "left" if acting == "right" else "right"
        acts = {acting: _unimanual_action(task, state, acting), idle: _noop(state, idle)}
        return BimanualStep(acts["left"], acts["right"])
    if task.name == "lift-tray":
        ti = state.find("tray")[0]
        row = state.anchors["lift_row"][0] - 1
        return _bimanual_pair_grab(state, ti, task.rot, (row, state.objects[ti].cells[0][1]))
    if task.name == "push-box":
        return _bimanual_pair_grab(state, state.find("box")[0], task.rot, state.regions[0].cells[0])
    if task.name == "handover":
        return _handover_action(task, state)
    if task.name == "press-two-buttons":
        acts = {}
        for arm, bi in zip(ARMS, state.find("button")):
            obj = state.objects[bi]
            acts[arm] = _noop(state, arm) if obj.pressed else _go(state, arm, obj.cells[0], task.rot, 0)
        return BimanualStep(acts["left"], acts["right"])
    raise ExpertFailure(f"no expert for {task.name}")


# --------------------------------------------------------------------------
# episodes


@dataclass
class Keyframe:
    obs: GridObservation
    action: BimanualStep


@dataclass
class Episode:
    task: str
    variation_id: int
    seed: int
    keyframes: list
    success: bool
    transform: tuple | None = None

    @property
    def instruction(self) -> Instruction:
        return get_task(self.task).instruction(self.variation_id)

    def actions(self) -> list:
        return [kf.action for kf in self.keyframes]


def rollout_expert(task, variation_id: int, seed: int, H=H_DEFAULT, W=W_DEFAULT):
    """Run the scripted expert from reset. Returns ``(states, actions)``."""
    task = get_task(task)
    state = reset(task, variation_id, seed, H, W)
    states, actions = [state], []
    while not success(state, task):
        if len(actions) >= task.max_keyframes:
            raise ExpertFailure(f"{task.name} var={variation_id} seed={seed}: no success in "
                                f"{task.max_keyframes} keyframes")
        a = scripted_expert(task, state)
        state, info = step(state, a)
        if info["collision"] or info["clamped"]:
            raise ExpertFailure(f"{task.name} seed={seed}: expert produced invalid step {info}")
        states.append(state)
        actions.append(a)
    return states, actions


def derive_seed(seed: int, task_name: str, i: int) -> int:
    ss = np.random.SeedSequence([int(seed), TASK_INDEX[task_name], int(i), 7919])
    return int(ss.generate_state(1)[0])


def generate_demos(task, n: int, seed: int, H=H_DEFAULT, W=W_DEFAULT) -> list:
    task = get_task(task)
    if n < 1:
        raise ValueError("n must be >= 1")
    episodes = []
    for i in range(n):
        ep_seed = derive_seed(seed, task.name, i)
        var = i % len(task.variations)
        states, actions = rollout_expert(task, var, ep_seed, H, W)
        kfs = [Keyframe(encode_observation(s), a) for s, a in zip(states[:-1], actions)]
        episodes.append(Episode(task.name, var, ep_seed, kfs, True))
    return episodes


# --------------------------------------------------------------------------
# planar rigid augmentation


def _rot_cell(cell, k, H, W):
    r, c = cell
    for _ in range(k % 4):
        r, c = W - 1 - c, r
        H, W = W, H
    return (r, c)


def transform_cell(cell, tf, H, W):
    k, dr, dc = tf
    r, c = _rot_cell(cell, k, H, W)
    return (r + dr, c + dc)


def transform_state(state: WorldState, tf) -> WorldState:
    k, _, _ = tf
    if k % 2 and state.H != state.W:
        raise ValueError("quarter-turns need a square grid")
    s = state.copy()
    f = lambda x: transform_cell(x, tf, state.H, state.W)
    for g in s.grippers.values():
        g.cell = f(g.cell)
        g.rot = (g.rot + k) % ROT_BINS
    for o in s.objects:
        o.cells = [f(x) for x in o.cells]
        if o.grip_rot is not None:
            o.grip_rot = (o.grip_rot + k) % ROT_BINS
    for reg in s.regions:
        reg.cells = [f(x) for x in reg.cells]
    s.anchors = {name: (f(x) if name != "lift_row" else x) for name, x in s.anchors.items()}
    return s


def transform_action(a: ArmAction, tf, H, W) -> ArmAction:
    k = tf[0]
    r, c = transform_cell(divmod(a.trans, W), tf, H, W)
    return ArmAction(r * W + c, (a.rot + k) % ROT_BINS, a.open, a.col)


def _state_cells(state: WorldState):
    cells = [g.cell for g in state.grippers.values()]
    for o in state.objects:
        cells.extend(o.cells)
    for reg in state.regions:
        cells.extend(reg.cells)
    return cells


def _tf_valid(states, actions, tf, H, W) -> bool:
    cells = [c for s in states for c in _state_cells(s)]
    cells += [divmod(x.trans, W) for a in actions for x in (a.left, a.right)]
    return all(0 <= r < H and 0 <= c < W for r, c in (transform_cell(x, tf, H, W) for x in cells))


def replay(episode: Episode, H=H_DEFAULT, W=W_DEFAULT):
    """Re-run an episode's actions from its (transformed) reset state."""
    state = reset(episode.task, episode.variation_id, episode.seed, H, W)
    if episode.transform is not None:
        state = transform_state(state, episode.transform)
    states = [state]
    for a in episode.actions():
        state, info = step(state, a)
        states.append(state)
    return states


def augment(episode: Episode, seed: int, rotations=(0, 90, 180, 270), max_shift: int = 3,
            attempts: int = 20, H=H_DEFAULT, W=W_DEFAULT) -> Episode:
    """Apply one random planar rigid transform to scene and both arms' labels.

    Transforms that push any object, region or action cell off the grid are
    resampled; after ``attempts`` failures the identity is used.
    """
    if episode.transform is not None:
        raise ValueError("episode is already augmented")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(episode.seed), 104729]))
    states = replay(episode, H, W)
    actions = episode.actions()
    quarter = [r // 90 for r in rotations if H == W or r % 180 == 0]
    tf = (0, 0, 0)
    for _ in range(attempts):
        cand = (int(rng.choice(quarter)), int(rng.integers(-max_shift, max_shift + 1)),
                int(rng.integers(-max_shift, max_shift + 1)))
        if _tf_valid(states, actions, cand, H, W):
            tf = cand
            break
    if tf == (0, 0, 0):
        return Episode(episode.task, episode.variation_id, episode.seed, list(episode.keyframes),
                       episode.success, None)
    new_actions = [BimanualStep(transform_action(a.left, tf, H, W), transform_action(a.right, tf, H, W))
                   for a in actions]
    state = transform_state(states[0], tf)
    kfs = []
    for a in new_actions:
        kfs.append(Keyframe(encode_observation(state), a))
        state, info = step(state, a)
    return Episode(episode.task, episode.variation_id, episode.seed, kfs,
                   success(state, episode.task), tf)


# --------------------------------------------------------------------------
# dataset files


def episode_to_record(ep: Episode) -> dict:
    kfs = []
    for kf in ep.keyframes:
        grid = kf.obs.grid
        kfs.append({
            "grid": [grid[:, :, ch].ravel().tolist() for ch in range(grid.shape[2])],
            "proprio": kf.obs.proprio.tolist(),
            "left_action": kf.action.left.to_dict(),
            "right_action": kf.action.right.to_dict(),
        })
    rec = {"task": ep.task, "variation_id": ep.variation_id, "seed": ep.seed, "keyframes": kfs}
    if ep.transform is not None:
        rec["transform"] = list(ep.transform)
    return rec


def episode_from_record(rec: dict, H: int, W: int) -> Episode:
    kfs = []
    for k in rec["keyframes"]:
        grid = np.stack([np.asarray(ch, dtype=np.float64).reshape(H, W) for ch in k["grid"]], axis=-1)
        obs = GridObservation(grid, np.asarray(k["proprio"], dtype=np.float64))
        kfs.append(Keyframe(obs, BimanualStep(ArmAction.from_dict(k["left_action"]),
                                              ArmAction.from_dict(k["right_action"]))))
    tf = tuple(rec["transform"]) if rec.get("transform") is not None else None
    return Episode(rec["task"], int(rec["variation_id"]), int(rec["seed"]), kfs, True, tf)


def save_dataset(path, episodes, H=H_DEFAULT, W=W_DEFAULT, seeds=None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for ep in episodes:
            f.write(json.dumps(episode_to_record(ep), separators=(",", ":")) + "\n")
    manifest = {"H": H, "W": W, "channels": list(CHANNELS), "episodes": len(episodes),
                "tasks": sorted({e.task for e in episodes}), "generation_seeds": seeds}
    Path(str(path) + ".manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


class DatasetError(ValueError):
    pass


def load_dataset(path) -> tuple:
    """Returns ``(episodes, manifest)``; validates grid dims against the manifest."""
    path = Path(path)
    mpath = Path(str(path) + ".manifest.json")
    if not path.exists() or not mpath.exists():
        raise DatasetError(f"missing dataset or manifest: {path}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("channels") != list(CHANNELS):
        raise DatasetError("channel layout mismatch")
    H, W = manifest["H"], manifest["W"]
    episodes = []
    with open(path) as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                if rec["task"] not in TASKS:
                    raise DatasetError(f"unknown task {rec['task']!r}")
                ep = episode_from_record(rec, H, W)
                for kf in ep.keyframes:
                    if kf.obs.grid.shape != (H, W, len(CHANNELS)):
                        raise DatasetError("grid shape does not match manifest")
                episodes.append(ep)
    return episodes, manifest
