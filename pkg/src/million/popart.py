"""Per-task Pop-Art normalization of value targets.

Each task owns running moments of its returns (``mu``, ``nu``) and a linear
output head ``(W, b)`` on top of the shared torso ``h``. The unnormalized
value is ``sigma * (W . h + b) + mu``. When the moments move, the head is
rescaled so that this value is unchanged for every input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .tensor import Tensor


def update_moments(mu: float, nu: float, returns: Sequence[float] | np.ndarray, beta: float,
                   sigma_floor: float = 1e-4) -> tuple[float, float, float]:
    """Fold ``returns`` one at a time into exponential moments.

    Equivalent to applying ``mu <- (1-beta) mu + beta G`` and
    ``nu <- (1-beta) nu + beta G^2`` for each G in order, evaluated in closed
    form. Returns ``(mu, nu, sigma)`` with ``sigma`` floored.
    """
    if not 0.0 < beta <= 1.0:
        raise ValueError(f"beta must lie in (0, 1], got {beta}")
    g = np.asarray(returns, dtype=np.float64).reshape(-1)
    n = g.size
    if n:
        if beta == 1.0:
            mu, nu = float(g[-1]), float(g[-1] ** 2)
        else:
            log_keep = math.log1p(-beta)
            weights = beta * np.exp(log_keep * np.arange(n - 1, -1, -1, dtype=np.float64))
            decay = math.exp(log_keep * n)
            mu = decay * mu + float(weights @ g)
            nu = decay * nu + float(weights @ (g * g))
    return mu, nu, max(math.sqrt(max(nu - mu * mu, 0.0)), sigma_floor)


def rescale_head(W: np.ndarray, b: float, sigma_old: float, mu_old: float, sigma_new: float,
                 mu_new: float) -> tuple[np.ndarray, float]:
    """Output-preserving update of a head after the statistics change."""
    W_new = (sigma_old / sigma_new) * W
    b_new = (sigma_old * b + mu_old - mu_new) / sigma_new
    return W_new, b_new


@dataclass
class TaskStats:
    mu: float = 0.0
    nu: float = 1.0
    sigma: float = 1.0


@dataclass
class PopArt:
    """Statistics for every task plus the value heads they act on.

    ``W`` has one row per task and ``b`` one entry per task; both are
    trainable tensors owned by the policy. With ``enabled=False`` the
    statistics stay at ``mu=0, sigma=1`` and nothing is rescaled.
    """

    tasks: list[str]
    W: Tensor
    b: Tensor
    beta: float = 3e-4
    sigma_floor: float = 1e-4
    enabled: bool = True
    stats: dict[str, TaskStats] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.index = {t: i for i, t in enumerate(self.tasks)}
        for t in self.tasks:
            self.stats.setdefault(t, TaskStats())

    def task_index(self, task: str) -> int:
        try:
            return self.index[task]
        except KeyError:
            raise KeyError(f"task {task!r} has no value head") from None

    def mu_sigma(self, task_idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        mus = np.array([self.stats[t].mu for t in self.tasks])
        sigmas = np.array([self.stats[t].sigma for t in self.tasks])
        return mus[task_idx], sigmas[task_idx]

    def unnormalize(self, values: np.ndarray, task_idx: np.ndarray) -> np.ndarray:
        mu, sigma = self.mu_sigma(task_idx)
        return sigma * values + mu

    def normalized_target(self, task: str, G):
        s = self.stats[task]
        return (np.asarray(G, dtype=np.float64) - s.mu) / s.sigma

    def update(self, returns_by_task: dict[str, np.ndarray]) -> dict[str, tuple[TaskStats, TaskStats]]:
        """Update every task's moments, then rescale each head once.

        Returns the ``(old, new)`` statistics per touched task.
        """
        changes = {}
        if not self.enabled:
            return changes
        for task, returns in returns_by_task.items():
            if len(returns) == 0:
                continue
            old = self.stats[task]
            mu, nu, sigma = update_moments(old.mu, old.nu, returns, self.beta, self.sigma_floor)
            new = TaskStats(mu, nu, sigma)
            i = self.task_index(task)
            W_new, b_new = rescale_head(self.W.data[i], float(self.b.data[i]), old.sigma, old.mu, sigma, mu)
            self.W.data[i] = W_new
            self.b.data[i] = b_new
            self.stats[task] = new
            changes[task] = (old, new)
        return changes

    def export(self) -> dict[str, tuple[float, float, float]] | None:
        if not self.enabled:
            return None
        return {t: (s.mu, s.nu, s.sigma) for t, s in self.stats.items()}

    def restore(self, stats: dict[str, tuple[float, float, float]] | None, tasks: Iterable[str] | None = None) -> None:
        if stats is None:
            return
        for t, (mu, nu, sigma) in stats.items():
            if t in self.stats:
                self.stats[t] = TaskStats(mu, nu, sigma)
