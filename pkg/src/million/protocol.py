"""Instruction-phase / trial-phase episodes.

An episode opens with an instruction phase that feeds one word vector per
step. A trial phase follows, in which the agent acts in the environment. A
successful trial is followed directly by another trial; a failed one by a
freshly sampled instruction and then a trial. The episode ends once
``max_trials`` trials have run.

Observations have a fixed layout ``[state | word | time]`` (plus a trailing
previous-reward slot when ``reward_in_obs`` is set), so the width is the
same in both phases.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Callable, TextIO

import numpy as np

from .envs import ACTION_DIM, STATE_DIM, EnvState, TaskSuite, env_reset, env_step
from .lang import InstructionBank


class Phase(enum.IntEnum):
    INSTRUCTION = 0
    TRIAL = 1
    DONE = 2


@dataclass(frozen=True)
class EpisodeConfig:
    max_trials: int = 3
    max_steps_per_trial: int | None = None  # None: take it from the task spec
    action_repeat: int = 2
    state_dim: int = STATE_DIM
    embed_dim: int = 50
    use_instructions: bool = True
    time_mode: str = "trial"  # "trial" or "episode"
    reward_in_obs: bool = False

    def __post_init__(self) -> None:
        for name in ("max_trials", "action_repeat", "state_dim", "embed_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.max_steps_per_trial is not None and self.max_steps_per_trial < 1:
            raise ValueError("max_steps_per_trial must be >= 1")
        if self.time_mode not in ("trial", "episode"):
            raise ValueError(f"unknown time_mode {self.time_mode!r}")

    @property
    def observation_width(self) -> int:
        return self.state_dim + self.embed_dim + 1 + int(self.reward_in_obs)


@dataclass
class EpisodeState:
    task: str
    env: EnvState
    rng: np.random.Generator
    max_steps: int
    phase: Phase = Phase.INSTRUCTION
    step_in_phase: int = 0
    trials_started: int = 0
    trials_succeeded: int = 0
    current_instruction: np.ndarray = field(default_factory=lambda: np.zeros((0, 50)))
    instruction_index: int = -1
    last_trial_succeeded: bool = False
    trial_ended: bool = False
    trial_steps_total: int = 0
    last_reward: float = 0.0
    inner_steps: int = 0
    last_inner_steps: int = 0
    trial_outcomes: list = field(default_factory=list)


def symlog(x: float) -> float:
    return float(np.sign(x) * np.log1p(abs(x)))


class Protocol:
    """Runs episodes for the tasks of a suite."""

    def __init__(self, suite: TaskSuite, bank: InstructionBank | None, config: EpisodeConfig = EpisodeConfig()):
        if config.use_instructions and bank is None:
            raise ValueError("an instruction bank is required when instructions are enabled")
        if bank is not None and bank.table.dim != config.embed_dim:
            raise ValueError(f"embedding width {bank.table.dim} != embed_dim {config.embed_dim}")
        self.suite = suite
        self.bank = bank
        self.config = config

    @property
    def observation_width(self) -> int:
        return self.config.observation_width

    def steps_per_trial(self, task: str) -> int:
        return self.config.max_steps_per_trial or self.suite[task].max_steps_per_trial

    def max_episode_steps(self, tasks=None) -> int:
        """Longest possible episode (instruction words included) over ``tasks``."""
        tasks = tasks or self.suite.names
        cfg = self.config
        words = self.bank.max_length() if (cfg.use_instructions and self.bank is not None) else 0
        return max(cfg.max_trials * (self.steps_per_trial(t) + words) for t in tasks)

    def reset_episode(self, task: str, rng: np.random.Generator) -> EpisodeState:
        spec = self.suite[task]
        if self.config.use_instructions and task not in self.bank:
            raise KeyError(f"no instructions registered for task {task!r}")
        steps = self.steps_per_trial(task)
        env = env_reset(spec, rng, steps * self.config.action_repeat)
        state = EpisodeState(task=task, env=env, rng=rng, max_steps=steps,
                             current_instruction=np.zeros((0, self.config.embed_dim)))
        if self.config.use_instructions:
            self._begin_instruction(state)
        else:
            self._begin_trial(state, reset_env=False)
        return state

    def _begin_instruction(self, state: EpisodeState) -> None:
        idx, seq = self.bank.sample(state.task, state.rng)
        state.instruction_index = idx
        state.current_instruction = seq
        state.phase = Phase.INSTRUCTION
        state.step_in_phase = 0
        if len(seq) == 0:
            self._begin_trial(state)

    def _begin_trial(self, state: EpisodeState, reset_env: bool = True) -> None:
        if reset_env and state.trials_started > 0:
            state.env = env_reset(state.env.spec, state.rng, state.max_steps * self.config.action_repeat)
        state.phase = Phase.TRIAL
        state.step_in_phase = 0
        state.trials_started += 1
        state.last_reward = 0.0

    def time_fraction(self, state: EpisodeState) -> float:
        if state.phase != Phase.TRIAL:
            return 0.0
        if self.config.time_mode == "episode":
            return state.trial_steps_total / (self.config.max_trials * state.max_steps)
        return state.step_in_phase / state.max_steps

    def assemble_observation(self, state: EpisodeState) -> np.ndarray:
        if state.phase == Phase.DONE:
            raise RuntimeError("no observation for a finished episode")
        cfg = self.config
        obs = np.zeros(cfg.observation_width)
        if state.phase == Phase.INSTRUCTION:
            obs[cfg.state_dim:cfg.state_dim + cfg.embed_dim] = state.current_instruction[state.step_in_phase]
        else:
            obs[:cfg.state_dim] = state.env.vector()[:cfg.state_dim]
            obs[cfg.state_dim + cfg.embed_dim] = self.time_fraction(state)
            if cfg.reward_in_obs:
                obs[-1] = symlog(state.last_reward)
        return obs

    def step(self, state: EpisodeState, action) -> tuple[np.ndarray | None, float, Phase, bool]:
        """Advance one agent step.

        Returns ``(next_observation, reward, phase_of_this_step, done)``. The
        reward of an instruction step is always 0 and must not be learned
        from. ``next_observation`` is None once the episode is done.
        """
        if state.phase == Phase.DONE:
            raise RuntimeError("cannot step a finished episode")
        state.trial_ended = False
        state.last_inner_steps = 0
        if state.phase == Phase.INSTRUCTION:
            state.step_in_phase += 1
            if state.step_in_phase >= len(state.current_instruction):
                self._begin_trial(state)
            return self.assemble_observation(state), 0.0, Phase.INSTRUCTION, False

        total = 0.0
        success = False
        for _ in range(self.config.action_repeat):
            state.env, reward, success = env_step(state.env, action)
            total += reward
            state.last_inner_steps += 1
            if success:
                break
        state.inner_steps += state.last_inner_steps
        state.step_in_phase += 1
        state.trial_steps_total += 1
        state.last_reward = total
        if success or state.step_in_phase >= state.max_steps:
            state.trial_ended = True
            state.last_trial_succeeded = success
            state.trials_succeeded += int(success)
            state.trial_outcomes.append(bool(success))
            if state.trials_started >= self.config.max_trials:
                state.phase = Phase.DONE
                return None, total, Phase.TRIAL, True
            if success or not self.config.use_instructions:
                self._begin_trial(state)
            else:
                self._begin_instruction(state)
        return self.assemble_observation(state), total, Phase.TRIAL, False


@dataclass
class Trajectory:
    """One finished episode plus the behaviour policy's outputs at collection time."""

    task: str
    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    phases: np.ndarray
    trial_index: np.ndarray
    trial_end: np.ndarray
    behavior_mean: np.ndarray
    behavior_log_std: np.ndarray
    trial_outcomes: list
    inner_steps: int = 0

    @property
    def learnable(self) -> np.ndarray:
        return self.phases == Phase.TRIAL

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def trials(self) -> int:
        return len(self.trial_outcomes)

    @property
    def successes(self) -> int:
        return int(sum(self.trial_outcomes))


class TrajectoryBuilder:
    def __init__(self, task: str, width: int, action_dim: int = ACTION_DIM):
        self.task = task
        self.width = width
        self.action_dim = action_dim
        self.obs, self.act, self.rew, self.ph, self.trial, self.end = [], [], [], [], [], []
        self.mean, self.log_std = [], []

    def add(self, obs, action, reward, phase, trial_index, trial_end, mean=None, log_std=None):
        self.obs.append(np.asarray(obs, float))
        self.act.append(np.asarray(action, float))
        self.rew.append(float(reward))
        self.ph.append(int(phase))
        self.trial.append(int(trial_index))
        self.end.append(bool(trial_end))
        zeros = np.zeros(self.action_dim)
        self.mean.append(zeros if mean is None else np.asarray(mean, float))
        self.log_std.append(zeros if log_std is None else np.asarray(log_std, float))

    def build(self, state: EpisodeState) -> Trajectory:
        a = self.action_dim
        return Trajectory(
            task=self.task,
            observations=np.array(self.obs).reshape(-1, self.width),
            actions=np.array(self.act).reshape(-1, a),
            rewards=np.array(self.rew),
            phases=np.array(self.ph, dtype=np.int8),
            trial_index=np.array(self.trial, dtype=np.int64),
            trial_end=np.array(self.end, dtype=bool),
            behavior_mean=np.array(self.mean).reshape(-1, a),
            behavior_log_std=np.array(self.log_std).reshape(-1, a),
            trial_outcomes=list(state.trial_outcomes),
            inner_steps=state.inner_steps,
        )


def run_episode(protocol: Protocol, task: str, act: Callable[[np.ndarray, EpisodeState], np.ndarray],
                rng: np.random.Generator) -> Trajectory:
    """Play one episode with a per-step action callback (no batching)."""
    state = protocol.reset_episode(task, rng)
    builder = TrajectoryBuilder(task, protocol.observation_width)
    obs = protocol.assemble_observation(state)
    done = False
    while not done:
        action = np.asarray(act(obs, state), float)
        trial_idx = state.trials_started - 1 if state.phase == Phase.TRIAL else -1
        next_obs, reward, phase, done = protocol.step(state, action)
        builder.add(obs, action, reward, phase, trial_idx, state.trial_ended)
        obs = next_obs
    return builder.build(state)


def dump_trajectory(traj: Trajectory, fh: TextIO, episode_id: int) -> None:
    """Write one JSON object per step: episode, step, phase, observation,
    action, reward, learnable, task, trial, trial_end."""
    for t in range(len(traj)):
        rec = {
            "episode": episode_id,
            "step": t,
            "phase": Phase(int(traj.phases[t])).name.lower(),
            "observation": traj.observations[t].tolist(),
            "action": traj.actions[t].tolist(),
            "reward": float(traj.rewards[t]),
            "learnable": bool(traj.learnable[t]),
            "task": traj.task,
            "trial": int(traj.trial_index[t]),
            "trial_end": bool(traj.trial_end[t]),
        }
        fh.write(json.dumps(rec) + "\n")


def load_trajectory_dump(fh: TextIO) -> dict[int, list[dict]]:
    out: dict[int, list[dict]] = {}
    for lineno, line in enumerate(fh, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
        out.setdefault(rec["episode"], []).append(rec)
    return out
