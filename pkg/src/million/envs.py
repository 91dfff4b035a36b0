"""Desk-scale 2D instructed manipulation suite.

A point effector moves inside the square arena ``[-1, 1]^2``. Depending on the
task family an object is ignored, pressed, carried while the gripper is
closed on it (grasp families) or shoved by an open hand in contact (push
families). Slide and hinge objects are further constrained to their track.
Whether to close the gripper is not visible in the state, which is what the
instruction is for. The exposed state vector is
always 9 wide: ``[effector | object | goal]`` as 3D points with ``z = 0``.

Rewards are ``reward_scale * progress`` per inner step with ``progress`` in
``[0, 1]``. On the inner step where the success metric first fires the env
also pays ``reward_scale * remaining_inner_steps`` (the trial ends there, so
this is what staying at full progress until the time limit would have
paid). The per-inner-step reward is therefore bounded by
``reward_scale * (1 + inner_step_limit)``.
"""

from __future__ import annotations

import configparser
import math
import os
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .lang import data_path

FAMILIES = ("reach", "push", "pick-place", "press", "drawer-open", "drawer-close", "window-open",
            "window-close", "door-open", "sweep-into", "bandit")
# how the object can be moved: held with a closed gripper, or shoved with an open one
GRASP_FAMILIES = ("pick-place", "drawer-open", "window-open", "door-open")
PUSH_FAMILIES = ("push", "drawer-close", "window-close", "sweep-into")
STATE_DIM = 9
ACTION_DIM = 3
ARENA = 1.0


def _progress(dist: float) -> float:
    return 1.0 / (1.0 + 5.0 * dist)


@dataclass(frozen=True)
class TaskSpec:
    name: str
    family: str
    split: str = "train"
    reward_scale: float = 1.0
    max_steps_per_trial: int = 20
    tolerance: float = 0.08
    step_size: float = 0.1
    grasp_radius: float = 0.12
    hand_low: tuple[float, float] = (-0.5, -0.5)
    hand_high: tuple[float, float] = (0.5, 0.5)
    object_low: tuple[float, float] = (-0.7, -0.7)
    object_high: tuple[float, float] = (0.7, 0.7)
    goal_low: tuple[float, float] = (-0.8, -0.8)
    goal_high: tuple[float, float] = (0.8, 0.8)
    # slide families: 0 moves along x, 1 along y
    axis: int = 1
    # hinge family: handle sits on a circle around ``hinge``; ranges are angles
    hinge: tuple[float, float] = (0.0, 0.0)
    radius: float = 0.6
    # bandit family: +1 rewards moving right, -1 left
    direction: int = 1

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise ValueError(f"{self.name}: unknown family {self.family!r}")
        if self.split not in ("train", "test"):
            raise ValueError(f"{self.name}: split must be train or test")
        if not self.reward_scale > 0:
            raise ValueError(f"{self.name}: reward_scale must be positive")
        if self.max_steps_per_trial < 1:
            raise ValueError(f"{self.name}: max_steps_per_trial must be >= 1")
        for lo, hi, what in ((self.object_low, self.object_high, "object"), (self.goal_low, self.goal_high, "goal"),
                             (self.hand_low, self.hand_high, "hand")):
            if any(h < l for l, h in zip(lo, hi)):
                raise ValueError(f"{self.name}: empty {what} box")

    def max_reward(self, inner_step_limit: int) -> float:
        """Upper bound on a single inner-step reward."""
        return self.reward_scale * (1.0 + inner_step_limit)


@dataclass
class EnvState:
    spec: TaskSpec
    effector_pos: np.ndarray
    object_pos: np.ndarray
    goal_pos: np.ndarray
    gripper_command: float = 0.0
    latched: bool = False
    step_count: int = 0
    inner_step_limit: int = 50
    solved: bool = False

    def vector(self) -> np.ndarray:
        out = np.zeros(STATE_DIM)
        out[0:2] = self.effector_pos
        out[3:5] = self.object_pos
        out[6:8] = self.goal_pos
        return out


def _uniform(rng: np.random.Generator, lo, hi) -> np.ndarray:
    return rng.uniform(np.asarray(lo, float), np.asarray(hi, float))


def _on_hinge(spec: TaskSpec, angle: float) -> np.ndarray:
    return np.asarray(spec.hinge, float) + spec.radius * np.array([math.cos(angle), math.sin(angle)])


def env_reset(spec: TaskSpec, rng: np.random.Generator, inner_step_limit: int | None = None) -> EnvState:
    """Sample effector, object and goal positions for one trial."""
    hand = _uniform(rng, spec.hand_low, spec.hand_high)
    fam = spec.family
    if fam == "bandit":
        hand = np.zeros(2)
        obj = np.zeros(2)
        goal = np.zeros(2)
    elif fam == "door-open":
        angle = float(rng.uniform(spec.object_low[0], spec.object_high[0]))
        goal_angle = float(rng.uniform(spec.goal_low[0], spec.goal_high[0]))
        obj = _on_hinge(spec, angle)
        goal = _on_hinge(spec, goal_angle)
    else:
        obj = _uniform(rng, spec.object_low, spec.object_high)
        goal = _uniform(rng, spec.goal_low, spec.goal_high)
        if fam == "press":
            goal = obj.copy()
        elif fam in ("drawer-open", "drawer-close", "window-open", "window-close"):
            goal[1 - spec.axis] = obj[1 - spec.axis]
    limit = inner_step_limit if inner_step_limit is not None else 2 * spec.max_steps_per_trial
    return EnvState(spec, hand, np.clip(obj, -ARENA, ARENA), np.clip(goal, -ARENA, ARENA),
                    inner_step_limit=int(limit))


def _slide_bounds(spec: TaskSpec) -> tuple[float, float]:
    ax = spec.axis
    lo = min(spec.object_low[ax], spec.goal_low[ax])
    hi = max(spec.object_high[ax], spec.goal_high[ax])
    return lo, hi


def _constrain(spec: TaskSpec, point: np.ndarray, current: np.ndarray) -> np.ndarray:
    """Project a desired handle position onto the family's constraint."""
    fam = spec.family
    if fam in ("drawer-open", "drawer-close", "window-open", "window-close"):
        out = current.copy()
        lo, hi = _slide_bounds(spec)
        out[spec.axis] = np.clip(point[spec.axis], lo, hi)
        return out
    if fam == "door-open":
        rel = point - np.asarray(spec.hinge, float)
        angle = math.atan2(rel[1], rel[0])
        lo = min(spec.object_low[0], spec.goal_low[0])
        hi = max(spec.object_high[0], spec.goal_high[0])
        return _on_hinge(spec, float(np.clip(angle, lo, hi)))
    return np.clip(point, -ARENA, ARENA)


def _dist(a: np.ndarray, b: np.ndarray) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def _clamp(x: float, bound: float) -> float:
    return min(max(x, -bound), bound)


def success_metric(state: EnvState, spec: TaskSpec | None = None) -> bool:
    """Task-completion predicate; a pure function of the state."""
    spec = spec or state.spec
    fam = spec.family
    tol = spec.tolerance
    if fam == "reach":
        return bool(_dist(state.effector_pos, state.goal_pos) < tol)
    if fam == "press":
        return bool(_dist(state.effector_pos, state.object_pos) < tol and state.gripper_command > 0.5)
    if fam == "bandit":
        return bool(state.effector_pos[0] * spec.direction > 0.5 * spec.step_size)
    return bool(_dist(state.object_pos, state.goal_pos) < tol)


def shaped_progress(state: EnvState) -> float:
    spec = state.spec
    fam = spec.family
    if fam == "reach":
        return _progress(_dist(state.effector_pos, state.goal_pos))
    if fam == "bandit":
        return 1.0 if success_metric(state) else 0.0
    d_eo = _dist(state.effector_pos, state.object_pos)
    if fam == "press":
        pressing = max(state.gripper_command, 0.0) if d_eo < spec.tolerance else 0.0
        return 0.5 * _progress(d_eo) + 0.5 * pressing
    # a small bonus for touching the object with the hand in the family's grip state
    hold = d_eo < spec.grasp_radius and (state.gripper_command > 0.0) == (fam in GRASP_FAMILIES)
    return 0.2 * _progress(d_eo) + 0.1 * hold + 0.7 * _progress(_dist(state.object_pos, state.goal_pos))


def env_step(state: EnvState, action) -> tuple[EnvState, float, bool]:
    """Advance one inner step. ``action`` is ``[dx, dy, grip]`` clamped to [-1, 1]."""
    spec = state.spec
    dx, dy, grip = (_clamp(float(v), 1.0) for v in np.asarray(action, dtype=np.float64).reshape(-1)[:ACTION_DIM])
    old_e = state.effector_pos
    step = spec.step_size
    new_e = np.array([_clamp(old_e[0] + step * dx, ARENA), _clamp(old_e[1] + step * dy, ARENA)])
    obj = state.object_pos
    latched = state.latched
    fam = spec.family
    if fam in GRASP_FAMILIES:
        latched = grip > 0.0 and (latched or _dist(old_e, obj) < spec.grasp_radius)
        if latched:
            obj = _constrain(spec, new_e, obj)
    elif fam in PUSH_FAMILIES and grip <= 0.0 and _dist(old_e, obj) < spec.grasp_radius:
        # an open hand touching the object carries it along; a closed fist slips past
        obj = _constrain(spec, obj + (new_e - old_e), obj)
    new = EnvState(spec, new_e, obj, state.goal_pos, grip, latched, state.step_count + 1, state.inner_step_limit,
                   state.solved)
    success = success_metric(new)
    reward = spec.reward_scale * shaped_progress(new)
    if success and not state.solved:
        reward += spec.reward_scale * max(new.inner_step_limit - new.step_count, 0)
        new.solved = True
    return new, float(reward), success


def scripted_action(state: EnvState, action_repeat: int = 2) -> np.ndarray:
    """Hand-coded controller that solves every family (used as an oracle).

    The gain assumes each action is applied ``action_repeat`` times.
    """
    spec = state.spec
    fam = spec.family
    e, o, g = state.effector_pos, state.object_pos, state.goal_pos
    gain = 1.0 / (spec.step_size * max(action_repeat, 1))

    def toward(target):
        return np.clip((target - e) * gain, -1.0, 1.0)

    if fam == "bandit":
        return np.array([float(spec.direction), 0.0, -1.0])
    if fam == "reach":
        return np.append(toward(g), -1.0)
    touching = _dist(e, o) < spec.grasp_radius
    if fam == "press":
        return np.append(toward(o), 1.0 if _dist(e, o) < spec.tolerance else -1.0)
    if fam in PUSH_FAMILIES:
        if not touching:
            return np.append(toward(o), -1.0)
        return np.append(toward(g - (o - e)), -1.0)
    if not (state.latched or touching):
        return np.append(toward(o), -1.0)
    return np.append(toward(g), 1.0)


@dataclass
class TaskSuite:
    specs: dict[str, TaskSpec] = field(default_factory=dict)

    def __getitem__(self, name: str) -> TaskSpec:
        try:
            return self.specs[name]
        except KeyError:
            raise KeyError(f"unknown task {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self.specs

    @property
    def names(self) -> list[str]:
        return list(self.specs)

    @property
    def train(self) -> list[str]:
        return [n for n, s in self.specs.items() if s.split == "train"]

    @property
    def test(self) -> list[str]:
        return [n for n, s in self.specs.items() if s.split == "test"]

    def max_steps_per_trial(self) -> int:
        return max(s.max_steps_per_trial for s in self.specs.values())


_PAIR_KEYS = ("hand_low", "hand_high", "object_low", "object_high", "goal_low", "goal_high", "hinge")
_FLOAT_KEYS = ("reward_scale", "tolerance", "step_size", "grasp_radius", "radius")
_INT_KEYS = ("max_steps_per_trial", "axis", "direction")


def _parse_value(key: str, raw: str, where: str):
    try:
        if key in _PAIR_KEYS:
            vals = tuple(float(v) for v in raw.replace(",", " ").split())
            if key in ("object_low", "object_high", "goal_low", "goal_high") and len(vals) == 1:
                vals = (vals[0], vals[0])
            if len(vals) != 2:
                raise ValueError("expected two numbers")
            return vals
        if key in _FLOAT_KEYS:
            return float(raw)
        if key in _INT_KEYS:
            return int(raw)
        if key in ("family", "split"):
            return raw.strip()
    except ValueError as exc:
        raise ValueError(f"{where}: bad value for {key!r}: {raw!r} ({exc})") from None
    raise ValueError(f"{where}: unknown key {key!r}")


def load_suite(path: str | os.PathLike | None = None) -> TaskSuite:
    """Read a suite config: one ``[task]`` section per task, ``key = value`` lines.

    A ``[defaults]`` section supplies values shared by every task.
    """
    path = path or data_path("suite.cfg")
    parser = configparser.ConfigParser(default_section="defaults", interpolation=None)
    with open(path, encoding="utf-8") as fh:
        parser.read_file(fh)
    suite = TaskSuite()
    for name in parser.sections():
        fields = {}
        for key, raw in parser[name].items():
            fields[key] = _parse_value(key, raw, f"{path} [{name}]")
        fields.setdefault("family", name)
        suite.specs[name] = TaskSpec(name=name, **fields)
    if not suite.specs:
        raise ValueError(f"{path}: no tasks defined")
    return suite


def scripted_policy() -> Callable[[EnvState], np.ndarray]:
    return scripted_action
