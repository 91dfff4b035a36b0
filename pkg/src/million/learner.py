"""V-MPO training with a FIFO trajectory buffer and per-task Pop-Art targets.

Each learner iteration collects ``b`` episodes with the frozen old policy,
pushes them into a FIFO buffer holding the last ``b * t_target`` episodes,
samples ``b`` of them, and takes one gradient step on the joint loss over
policy, value, temperature and KL multipliers. The old policy is refreshed
every ``t_target`` iterations.
"""

from __future__ import annotations

import logging
import math
from collections import Counter, deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .policy import GTrXLPolicy, log_prob_tensor, sample_action
from .popart import PopArt
from .protocol import EpisodeState, Phase, Protocol, Trajectory, TrajectoryBuilder
from .tensor import Tensor

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class LearnerConfig:
    batch_size: int = 16
    t_target: int = 100
    gamma: float = 0.99
    n_step: int = 16
    lr: float = 3e-4
    # linear decay from lr to lr_final over this many observed steps; 0 keeps lr fixed
    lr_decay_steps: int = 0
    lr_final: float = 3e-5
    dual_lr: float = 1e-2
    eps_eta: float = 0.1
    eps_alpha_mu: float = 0.01
    eps_alpha_sigma: float = 5e-5
    init_eta: float = 1.0
    init_alpha_mu: float = 1.0
    init_alpha_sigma: float = 1.0
    max_grad_norm: float = 5.0
    workers: int = 1

    def __post_init__(self) -> None:
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        for name in ("batch_size", "t_target", "n_step", "workers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.lr_decay_steps < 0:
            raise ValueError("lr_decay_steps must be >= 0")

    def lr_at(self, env_steps: int) -> float:
        if self.lr_decay_steps == 0:
            return self.lr
        frac = min(env_steps / self.lr_decay_steps, 1.0)
        return self.lr + frac * (self.lr_final - self.lr)

    @property
    def buffer_capacity(self) -> int:
        return self.batch_size * self.t_target


class FifoBuffer:
    """Holds the most recent ``capacity`` trajectories; oldest leave first."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._items: deque[tuple[int, Trajectory]] = deque()
        self.pushed = 0
        self.evicted: list[int] = []
        self.sample_counts: Counter = Counter()

    def __len__(self) -> int:
        return len(self._items)

    def push(self, traj: Trajectory) -> int:
        uid = self.pushed
        self.pushed += 1
        self._items.append((uid, traj))
        if len(self._items) > self.capacity:
            old, _ = self._items.popleft()
            self.evicted.append(old)
        return uid

    def ids(self) -> list[int]:
        return [uid for uid, _ in self._items]

    def sample(self, b: int, rng: np.random.Generator) -> list[Trajectory]:
        """``b`` distinct trajectories chosen uniformly (all of them if fewer are stored)."""
        if not self._items:
            raise RuntimeError("cannot sample from an empty buffer")
        picks = rng.choice(len(self._items), size=min(b, len(self._items)), replace=False)
        out = []
        for i in sorted(int(p) for p in picks):
            uid, traj = self._items[i]
            self.sample_counts[uid] += 1
            out.append(traj)
        return out


# rollouts


def rollout(policy: GTrXLPolicy, protocol: Protocol, tasks: list[str], rng: np.random.Generator,
            deterministic: bool = False) -> list[Trajectory]:
    """Play one episode per entry of ``tasks`` in lockstep with a frozen policy."""
    B = len(tasks)
    if B == 0:
        return []
    states: list[EpisodeState] = [protocol.reset_episode(t, rng) for t in tasks]
    builders = [TrajectoryBuilder(t, protocol.observation_width, policy.config.action_dim) for t in tasks]
    obs = np.stack([protocol.assemble_observation(s) for s in states])
    active = list(range(B))
    with T.no_grad():
        memory = policy.initial_memory(B)
        while active:
            out, memory = policy.forward_step(obs, memory)
            mean = out.mean.data
            log_std = out.log_std.data
            actions = mean if deterministic else sample_action(mean, log_std, rng)
            keep, next_obs = [], []
            for j, i in enumerate(active):
                s = states[i]
                trial_idx = s.trials_started - 1 if s.phase == Phase.TRIAL else -1
                nxt, reward, phase, done = protocol.step(s, actions[j])
                builders[i].add(obs[j], actions[j], reward, phase, trial_idx, s.trial_ended, mean[j], log_std)
                if not done:
                    keep.append(j)
                    next_obs.append(nxt)
            active = [active[j] for j in keep]
            if active:
                memory = memory.select(np.array(keep))
                obs = np.stack(next_obs)
    return [b.build(s) for b, s in zip(builders, states)]


def draw_tasks(tasks: list[str], b: int, rng: np.random.Generator) -> list[str]:
    """``b`` task names drawn uniformly with replacement."""
    return [tasks[int(i)] for i in rng.integers(len(tasks), size=b)]


def collect(policy: GTrXLPolicy, protocol: Protocol, tasks: list[str], b: int, rng: np.random.Generator,
            workers: int = 1, deterministic: bool = False) -> list[Trajectory]:
    """``b`` episodes on tasks drawn uniformly from ``tasks``."""
    chosen = draw_tasks(tasks, b, rng)
    if workers <= 1 or b < 2:
        return rollout(policy, protocol, chosen, rng, deterministic)
    chunks = [chosen[w::workers] for w in range(workers)]
    seeds = rng.integers(2 ** 63, size=workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(rollout, policy, protocol, chunk, np.random.default_rng(int(s)), deterministic)
                   for chunk, s in zip(chunks, seeds) if chunk]
        results = [f.result() for f in futures]
    return [traj for part in results for traj in part]


# targets


@dataclass
class Batch:
    tasks: list[str]
    task_idx: np.ndarray
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    learnable: np.ndarray
    seg_end: np.ndarray
    lengths: np.ndarray


def trial_segment_ends(traj: Trajectory) -> np.ndarray:
    """Exclusive end index of the trial each step belongs to (-1 off-trial)."""
    out = np.full(len(traj), -1, dtype=np.int64)
    end = -1
    learn = traj.learnable
    for t in range(len(traj) - 1, -1, -1):
        if learn[t] and traj.trial_end[t]:
            end = t + 1
        out[t] = end if learn[t] else -1
    return out


def make_batch(trajs: list[Trajectory], task_index: dict[str, int]) -> Batch:
    B = len(trajs)
    L = max(len(t) for t in trajs)
    W = trajs[0].observations.shape[1]
    A = trajs[0].actions.shape[1]
    obs = np.zeros((B, L, W))
    actions = np.zeros((B, L, A))
    rewards = np.zeros((B, L))
    learnable = np.zeros((B, L), dtype=bool)
    seg_end = np.full((B, L), -1, dtype=np.int64)
    for i, tr in enumerate(trajs):
        n = len(tr)
        obs[i, :n] = tr.observations
        actions[i, :n] = tr.actions
        rewards[i, :n] = tr.rewards
        learnable[i, :n] = tr.learnable
        seg_end[i, :n] = trial_segment_ends(tr)
    return Batch([t.task for t in trajs], np.array([task_index[t.task] for t in trajs]), obs, actions, rewards,
                 learnable, seg_end, np.array([len(t) for t in trajs]))


def nstep_targets(rewards: np.ndarray, values: np.ndarray, seg_end: np.ndarray, learnable: np.ndarray,
                  gamma: float, n: int) -> np.ndarray:
    """n-step returns that stop at the end of each trial.

    ``G_t = sum_{i<n} gamma^i r_{t+i} + gamma^n v_{t+n}``, where terms at or past
    the trial end are dropped (no bootstrap across a trial boundary). Entries
    for non-learnable steps are 0.
    """
    rewards = np.atleast_2d(rewards)
    values = np.atleast_2d(values)
    seg_end = np.atleast_2d(seg_end)
    learnable = np.atleast_2d(learnable)
    B, L = rewards.shape
    t = np.broadcast_to(np.arange(L)[None, :], (B, L))
    G = np.zeros((B, L))
    for i in range(n):
        idx = t + i
        ok = idx < seg_end
        G += (gamma ** i) * np.where(ok, np.take_along_axis(rewards, np.minimum(idx, L - 1), axis=1), 0.0)
    idx = t + n
    ok = idx < seg_end
    G += (gamma ** n) * np.where(ok, np.take_along_axis(values, np.minimum(idx, L - 1), axis=1), 0.0)
    return np.where(learnable, G, 0.0)


# loss


def softplus_inverse(y: float) -> float:
    return float(y + math.log(-math.expm1(-y)))


@dataclass
class Duals:
    """Temperature and KL multipliers kept positive through a softplus."""

    raw_eta: Tensor
    raw_alpha_mu: Tensor
    raw_alpha_sigma: Tensor
    floor: float = 1e-8

    @classmethod
    def create(cls, eta: float = 1.0, alpha_mu: float = 1.0, alpha_sigma: float = 1.0) -> "Duals":
        mk = lambda v, n: Tensor([softplus_inverse(v)], requires_grad=True, name=n)  # noqa: E731
        return cls(mk(eta, "dual.eta"), mk(alpha_mu, "dual.alpha_mu"), mk(alpha_sigma, "dual.alpha_sigma"))

    def parameters(self) -> list[Tensor]:
        return [self.raw_eta, self.raw_alpha_mu, self.raw_alpha_sigma]

    def eta(self) -> Tensor:
        return T.softplus(self.raw_eta) + self.floor

    def alpha_mu(self) -> Tensor:
        return T.softplus(self.raw_alpha_mu) + self.floor

    def alpha_sigma(self) -> Tensor:
        return T.softplus(self.raw_alpha_sigma) + self.floor

    def values(self) -> dict[str, float]:
        sp = lambda t: float(np.logaddexp(0.0, t.data[0])) + self.floor  # noqa: E731
        return {"eta": sp(self.raw_eta), "alpha_mu": sp(self.raw_alpha_mu), "alpha_sigma": sp(self.raw_alpha_sigma)}


def select_top_half(advantages: np.ndarray) -> np.ndarray:
    """Indices of the ``N // 2`` largest advantages (all indices when N < 2)."""
    n = len(advantages)
    k = n // 2
    if k == 0:
        return np.arange(n)
    return np.sort(np.argsort(-advantages, kind="stable")[:k])


def vmpo_weights(advantages: np.ndarray, eta: float) -> tuple[np.ndarray, np.ndarray]:
    """Selected indices and their normalized weights ``softmax(A / eta)``."""
    sel = select_top_half(advantages)
    if len(advantages) < 2:
        return sel, np.full(len(sel), 1.0 / max(len(sel), 1))
    z = advantages[sel] / eta
    z = z - z.max()
    w = np.exp(z)
    return sel, w / w.sum()


def vmpo_loss(mean: Tensor, log_std: Tensor, actions: np.ndarray, old_mean: np.ndarray, old_log_std: np.ndarray,
              advantages: np.ndarray, value_pred: Tensor, value_target: np.ndarray, duals: Duals,
              eps_eta: float = 0.1, eps_alpha_mu: float = 0.01, eps_alpha_sigma: float = 5e-5
              ) -> tuple[Tensor, dict[str, float]]:
    """Joint V-MPO objective over N learnable samples.

    ``mean`` is ``(N, A)``; ``log_std`` is state independent ``(A,)``; the
    value prediction and target are in normalized units.
    """
    N = len(advantages)
    sel = select_top_half(advantages)
    k = len(sel)
    eta = duals.eta()
    a_sel = Tensor(advantages[sel])
    if N >= 2:
        psi = T.softmax(a_sel / T.stop_gradient(eta))
    else:
        psi = Tensor(np.full(k, 1.0 / k))
    logp = log_prob_tensor(T.take(mean, sel, axis=0), log_std, actions[sel])
    policy_loss = T.neg(T.tsum(T.stop_gradient(psi) * logp))
    temperature_loss = eta * eps_eta + eta * (T.logsumexp(a_sel / eta) - math.log(k))

    inv_var = T.exp(T.stop_gradient(log_std) * -2.0)
    diff = mean - old_mean
    kl_mu = T.mean(T.tsum(diff * diff * inv_var, axis=-1)) * 0.5
    log_ratio = (Tensor(old_log_std) - log_std) * 2.0
    kl_sigma = T.tsum(T.exp(log_ratio) - 1.0 - log_ratio) * 0.5
    alpha_mu, alpha_sigma = duals.alpha_mu(), duals.alpha_sigma()
    kl_loss = (T.stop_gradient(alpha_mu) * kl_mu + alpha_mu * (eps_alpha_mu - T.stop_gradient(kl_mu))
               + T.stop_gradient(alpha_sigma) * kl_sigma + alpha_sigma * (eps_alpha_sigma - T.stop_gradient(kl_sigma)))

    err = value_pred - value_target
    value_loss = T.mean(err * err) * 0.5

    total = T.tsum(policy_loss + temperature_loss + kl_loss + value_loss)
    info = {
        "loss": float(total.data),
        "loss_policy": float(policy_loss.data),
        "loss_temperature": float(np.sum(temperature_loss.data)),
        "loss_kl": float(np.sum(kl_loss.data)),
        "loss_value": float(value_loss.data),
        "kl_mu": float(kl_mu.data),
        "kl_sigma": float(kl_sigma.data),
    }
    return total, info


# learner


@dataclass
class IterationMetrics:
    iteration: int
    env_steps: int
    inner_steps: int
    values: dict = field(default_factory=dict)


class Learner:
    def __init__(self, policy: GTrXLPolicy, protocol: Protocol, popart: PopArt, config: LearnerConfig,
                 train_tasks: list[str], seed: int = 0):
        self.policy = policy
        self.protocol = protocol
        self.popart = popart
        self.config = config
        self.train_tasks = list(train_tasks)
        self.rng = np.random.default_rng(seed)
        self.buffer = FifoBuffer(config.buffer_capacity)
        self.duals = Duals.create(config.init_eta, config.init_alpha_mu, config.init_alpha_sigma)
        self.optimizer = T.Adam(policy.parameters(), lr=config.lr, max_grad_norm=config.max_grad_norm)
        self.dual_optimizer = T.Adam(self.duals.parameters(), lr=config.dual_lr)
        self.old_policy = policy.snapshot()
        self.iteration = 0
        self.env_steps = 0
        self.inner_steps = 0
        self.refreshes = 0

    def refresh_old_policy(self) -> None:
        self.old_policy = self.policy.snapshot()
        self.refreshes += 1

    def collect(self) -> list[Trajectory]:
        trajs = collect(self.old_policy, self.protocol, self.train_tasks, self.config.batch_size, self.rng,
                        workers=self.config.workers)
        for tr in trajs:
            self.buffer.push(tr)
            self.env_steps += len(tr)
            self.inner_steps += tr.inner_steps
        return trajs

    def train_step(self, trajs: list[Trajectory]) -> dict[str, float]:
        cfg = self.config
        pol = self.policy
        batch = make_batch(trajs, self.popart.index)
        bi, ti = np.nonzero(batch.learnable)
        out = pol.forward_sequence(batch.obs)
        feats = out.features
        idx = np.broadcast_to(batch.task_idx[:, None], batch.rewards.shape)
        W, b = pol.params["value.W"].data, pol.params["value.b"].data
        v_norm = np.sum(feats.data * W[idx], axis=-1) + b[idx]
        f = self.popart.unnormalize(v_norm, idx)
        G = nstep_targets(batch.rewards, f, batch.seg_end, batch.learnable, cfg.gamma, cfg.n_step)
        adv_raw = G[bi, ti] - f[bi, ti]
        flat_tasks = batch.task_idx[bi]
        returns_by_task = {}
        for k, task in enumerate(self.popart.tasks):
            sel = flat_tasks == k
            if np.any(sel):
                returns_by_task[task] = G[bi, ti][sel]
        self.popart.update(returns_by_task)
        mu, sigma = self.popart.mu_sigma(flat_tasks)
        target = (G[bi, ti] - mu) / sigma
        adv = adv_raw / sigma

        value_pred = pol.value_head(feats[bi, ti], flat_tasks)
        mean = out.mean[bi, ti]
        with T.no_grad():
            old = self.old_policy.forward_sequence(batch.obs)
        old_mean = old.mean.data[bi, ti]
        old_log_std = old.log_std.data

        loss, info = vmpo_loss(mean, out.log_std, batch.actions[bi, ti], old_mean, old_log_std, adv, value_pred,
                               target, self.duals, cfg.eps_eta, cfg.eps_alpha_mu, cfg.eps_alpha_sigma)
        if not np.isfinite(loss.data).all():
            T.current_tape().clear()
            raise TrainingDiverged("non-finite loss", {"iteration": self.iteration, **info,
                                                       **self.duals.values()})
        self.optimizer.zero_grad()
        self.dual_optimizer.zero_grad()
        T.backward(loss)
        info["grad_norm"] = self.optimizer.step()
        self.dual_optimizer.step()
        info.update(self.duals.values())
        info["adv_mean"] = float(np.mean(adv))
        info["adv_std"] = float(np.std(adv))
        info["learnable_steps"] = int(len(bi))
        return info

    def iterate(self) -> IterationMetrics:
        """One collect, one sampled batch, one gradient step."""
        trajs = self.collect()
        batch = self.buffer.sample(self.config.batch_size, self.rng)
        self.optimizer.lr = self.config.lr_at(self.env_steps)
        info = self.train_step(batch)
        info["lr"] = self.optimizer.lr
        self.iteration += 1
        if self.iteration % self.config.t_target == 0:
            self.refresh_old_policy()
        info.update(rollout_summary(trajs, self.train_tasks))
        return IterationMetrics(self.iteration, self.env_steps, self.inner_steps, info)


def rollout_summary(trajs: list[Trajectory], tasks: list[str]) -> dict[str, float]:
    """Trial success rate and mean learnable return per task over ``trajs``."""
    out: dict[str, float] = {}
    trials = Counter()
    wins = Counter()
    for tr in trajs:
        trials[tr.task] += tr.trials
        wins[tr.task] += tr.successes
    for t in tasks:
        if trials[t]:
            out[f"success_{t}"] = wins[t] / trials[t]
    total = sum(trials.values())
    out["success_mean"] = sum(wins.values()) / total if total else float("nan")
    out["return_mean"] = float(np.mean([tr.rewards[tr.learnable].sum() for tr in trajs])) if trajs else float("nan")
    return out


def evaluate(policy: GTrXLPolicy, protocol: Protocol, tasks: list[str], episodes: int, rng: np.random.Generator,
             deterministic: bool = True, batch: int = 16) -> dict[str, dict[str, float]]:
    """Per-task trial success rate, episode solve rate and mean return."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    table = {}
    for task in tasks:
        trajs: list[Trajectory] = []
        remaining = episodes
        while remaining > 0:
            n = min(batch, remaining)
            trajs.extend(rollout(policy, protocol, [task] * n, rng, deterministic))
            remaining -= n
        trials = sum(t.trials for t in trajs)
        table[task] = {
            "trial_success": sum(t.successes for t in trajs) / trials,
            "episode_solved": float(np.mean([t.successes > 0 for t in trajs])),
            "first_trial_success": float(np.mean([bool(t.trial_outcomes and t.trial_outcomes[0]) for t in trajs])),
            "return": float(np.mean([t.rewards[t.learnable].sum() for t in trajs])),
        }
    return table
