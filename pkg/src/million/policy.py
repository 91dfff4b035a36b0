"""Gated Transformer-XL policy with a diagonal Gaussian head.

Every layer attends over a memory of the last ``memory_length`` layer inputs
plus the current position. At episode start that memory holds zero vectors.
Sublayer outputs are merged into the residual stream through GRU-style gates
whose bias favours the identity. Attention logits carry a learned bias per
head and relative distance.

``forward_sequence`` processes a whole episode in parallel. ``forward_step``
consumes one observation at a time and carries the memory (with cached keys
and values) explicitly. Both compute the same function.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .tensor import ContractError, Tensor

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class PolicyConfig:
    observation_width: int
    action_dim: int = 3
    layers: int = 2
    width: int = 64
    heads: int = 2
    memory_length: int = 80
    mlp_width: int = 128
    gate_bias: float = 2.0
    init_log_std: float = 0.0
    n_tasks: int = 1

    def __post_init__(self) -> None:
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")
        for name in ("observation_width", "action_dim", "layers", "width", "heads", "memory_length", "n_tasks"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


class PolicyOutput(NamedTuple):
    mean: np.ndarray | Tensor
    log_std: np.ndarray | Tensor
    value_normalized: np.ndarray | Tensor | None
    features: Tensor | None = None


@dataclass
class Memory:
    """Per-layer stored inputs and their cached keys/values, batch-major."""

    h: list[np.ndarray]
    k: list[np.ndarray]
    v: list[np.ndarray]

    def select(self, rows) -> "Memory":
        return Memory([a[rows] for a in self.h], [a[rows] for a in self.k], [a[rows] for a in self.v])

    def copy(self) -> "Memory":
        return Memory([a.copy() for a in self.h], [a.copy() for a in self.k], [a.copy() for a in self.v])


def _glorot(rng, fan_in, fan_out, gain=1.0):
    return rng.normal(0.0, gain * math.sqrt(2.0 / (fan_in + fan_out)), size=(fan_in, fan_out))


class GTrXLPolicy:
    def __init__(self, config: PolicyConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        D, A = c.width, c.action_dim
        p: dict[str, Tensor] = {}

        def add(name, arr):
            p[name] = Tensor(arr, requires_grad=True, name=name)

        add("in.W", _glorot(rng, c.observation_width, D))
        add("in.b", np.zeros(D))
        for l in range(c.layers):
            pre = f"layer{l}."
            add(pre + "ln1.g", np.ones(D))
            add(pre + "ln1.b", np.zeros(D))
            for name in ("Wq", "Wk", "Wv", "Wo"):
                add(pre + name, _glorot(rng, D, D))
            add(pre + "pos_bias", np.zeros((c.heads, c.memory_length + 1)))
            add(pre + "ln2.g", np.ones(D))
            add(pre + "ln2.b", np.zeros(D))
            add(pre + "mlp.W1", _glorot(rng, D, c.mlp_width))
            add(pre + "mlp.b1", np.zeros(c.mlp_width))
            add(pre + "mlp.W2", _glorot(rng, c.mlp_width, D))
            add(pre + "mlp.b2", np.zeros(D))
            for gate in ("gate1.", "gate2."):
                add(pre + gate + "Wrz", _glorot(rng, 2 * D, 2 * D))
                add(pre + gate + "Wg", _glorot(rng, D, D))
                add(pre + gate + "Ug", _glorot(rng, D, D))
                add(pre + gate + "bg", np.full(D, c.gate_bias))
        add("out.ln.g", np.ones(D))
        add("out.ln.b", np.zeros(D))
        add("pi.W", _glorot(rng, D, A, gain=0.01))
        add("pi.b", np.zeros(A))
        add("log_std", np.full(A, c.init_log_std))
        add("value.W", rng.normal(0.0, 0.01, size=(c.n_tasks, D)))
        add("value.b", np.zeros(c.n_tasks))
        self.params = p

    # parameter plumbing

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, v in self.params.items():
            if k not in state:
                raise KeyError(f"missing parameter {k!r}")
            if state[k].shape != v.shape:
                raise ValueError(f"shape mismatch for {k}: {state[k].shape} vs {v.shape}")
            v.data = np.array(state[k], dtype=np.float64)

    def snapshot(self) -> "GTrXLPolicy":
        """Frozen copy used by rollout workers; records nothing on a tape."""
        twin = copy.copy(self)
        twin.params = {k: Tensor(v.data.copy(), name=k) for k, v in self.params.items()}
        return twin

    # building blocks

    def _gate(self, pre: str, x: Tensor, y: Tensor) -> Tensor:
        p = self.params
        D = self.config.width
        rz = T.concat([y, x], axis=-1) @ p[pre + "Wrz"]
        r_lin, z_lin = T.split(rz, [D, D], axis=-1)
        r = T.sigmoid(r_lin)
        z = T.sigmoid(z_lin - p[pre + "bg"])
        h = T.tanh(y @ p[pre + "Wg"] + (r * x) @ p[pre + "Ug"])
        return x + z * (h - x)

    def _heads(self, x: Tensor) -> Tensor:
        # (B, L, D) -> (B, H, L, dh)
        B, L, D = x.shape
        H = self.config.heads
        return x.reshape(B, L, H, D // H).transpose(0, 2, 1, 3)

    def _merge(self, x: Tensor) -> Tensor:
        B, H, L, dh = x.shape
        return x.transpose(0, 2, 1, 3).reshape(B, L, H * dh)

    def _mlp_and_gate(self, pre: str, x: Tensor) -> Tensor:
        p = self.params
        n = T.layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
        m = T.relu(n @ p[pre + "mlp.W1"] + p[pre + "mlp.b1"]) @ p[pre + "mlp.W2"] + p[pre + "mlp.b2"]
        return self._gate(pre + "gate2.", x, T.relu(m))

    def _heads_out(self, x: Tensor, task_idx) -> PolicyOutput:
        p = self.params
        feats = T.layer_norm(x, p["out.ln.g"], p["out.ln.b"])
        mean = feats @ p["pi.W"] + p["pi.b"]
        value = None
        if task_idx is not None:
            idx = np.broadcast_to(np.asarray(task_idx, dtype=np.int64).reshape(-1, *([1] * (x.ndim - 2))),
                                  x.shape[:-1])
            value = self.value_head(feats, idx)
        return PolicyOutput(mean, p["log_std"], value, feats)

    def value_head(self, feats: Tensor, idx: np.ndarray) -> Tensor:
        """Normalized per-task value ``W[task] . h + b[task]``; ``idx`` matches ``feats.shape[:-1]``."""
        p = self.params
        return T.tsum(feats * T.take(p["value.W"], idx, axis=0), axis=-1) + T.take(p["value.b"], idx, axis=0)

    # full-sequence path

    def forward_sequence(self, obs, task_idx=None) -> PolicyOutput:
        """Causal forward over ``(B, T, obs_width)`` starting from a zero memory."""
        c = self.config
        obs = T.as_tensor(obs)
        if obs.ndim == 2:
            obs = obs.reshape(1, *obs.shape)
        if obs.shape[-1] != c.observation_width:
            raise ContractError(f"observation width {obs.shape[-1]} != {c.observation_width}")
        B, L, _ = obs.shape
        M = c.memory_length
        p = self.params
        mask = T.causal_mask(L, M, window=M)
        q_pos = np.arange(L)[:, None] + M
        dist = np.clip(q_pos - np.arange(M + L)[None, :], 0, M)
        x = obs @ p["in.W"] + p["in.b"]
        zeros = Tensor(np.zeros((B, M, c.width)))
        for l in range(c.layers):
            pre = f"layer{l}."
            full = T.concat([zeros, x], axis=1)
            n = T.layer_norm(full, p[pre + "ln1.g"], p[pre + "ln1.b"])
            q = self._heads(n[:, M:] @ p[pre + "Wq"])
            k = self._heads(n @ p[pre + "Wk"])
            v = self._heads(n @ p[pre + "Wv"])
            bias = T.take(p[pre + "pos_bias"], dist, axis=1)
            att = self._merge(T.masked_attention(q, k, v, mask=mask, bias=bias)) @ p[pre + "Wo"]
            x = self._gate(pre + "gate1.", x, T.relu(att))
            x = self._mlp_and_gate(pre, x)
        return self._heads_out(x, task_idx)

    # incremental path

    def initial_memory(self, batch: int = 1) -> Memory:
        c = self.config
        M, D, H = c.memory_length, c.width, c.heads
        p = self.params
        h, k, v = [], [], []
        for l in range(c.layers):
            pre = f"layer{l}."
            zeros = np.zeros((batch, M, D))
            n = p[pre + "ln1.b"].data * np.ones((batch, M, 1))  # layer norm of a zero row is its bias
            h.append(zeros)
            k.append((n @ p[pre + "Wk"].data).reshape(batch, M, H, D // H).transpose(0, 2, 1, 3))
            v.append((n @ p[pre + "Wv"].data).reshape(batch, M, H, D // H).transpose(0, 2, 1, 3))
        return Memory(h, k, v)

    def forward_step(self, obs, memory: Memory, task_idx=None) -> tuple[PolicyOutput, Memory]:
        """One observation per batch row; returns outputs and the advanced memory."""
        c = self.config
        obs = np.asarray(obs.data if isinstance(obs, Tensor) else obs, dtype=np.float64)
        single = obs.ndim == 1
        if single:
            obs = obs[None]
        if obs.shape[-1] != c.observation_width:
            raise ContractError(f"observation width {obs.shape[-1]} != {c.observation_width}")
        B = obs.shape[0]
        if memory.h[0].shape[0] != B:
            raise ContractError(f"memory batch {memory.h[0].shape[0]} != observation batch {B}")
        M = c.memory_length
        p = self.params
        dist = np.arange(M, -1, -1)[None, :]
        x = Tensor(obs[:, None, :]) @ p["in.W"] + p["in.b"]
        new_h, new_k, new_v = [], [], []
        for l in range(c.layers):
            pre = f"layer{l}."
            n = T.layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
            q = self._heads(n @ p[pre + "Wq"])
            k_new = self._heads(n @ p[pre + "Wk"])
            v_new = self._heads(n @ p[pre + "Wv"])
            bias = T.take(p[pre + "pos_bias"], dist, axis=1)
            att = T.masked_attention(q, k_new, v_new, mask=np.ones((1, M + 1), dtype=bool),
                                     memory=(memory.k[l], memory.v[l]), bias=bias)
            att = self._merge(att) @ p[pre + "Wo"]
            new_h.append(np.concatenate([memory.h[l][:, 1:], x.data], axis=1))
            new_k.append(np.concatenate([memory.k[l][:, :, 1:], k_new.data], axis=2))
            new_v.append(np.concatenate([memory.v[l][:, :, 1:], v_new.data], axis=2))
            x = self._gate(pre + "gate1.", x, T.relu(att))
            x = self._mlp_and_gate(pre, x)
        out = self._heads_out(x, task_idx)
        mean = out.mean[:, 0]
        value = None if out.value_normalized is None else out.value_normalized[:, 0]
        if single:
            mean = mean[0]
            value = None if value is None else value[0]
        return PolicyOutput(mean, out.log_std, value, out.features), Memory(new_h, new_k, new_v)


# Gaussian helpers (numpy for bookkeeping, tensors inside the loss)


def log_prob(mean, log_std, action) -> np.ndarray:
    """Diagonal Gaussian log density summed over the last axis."""
    mean, log_std, action = (np.asarray(a, dtype=np.float64) for a in (mean, log_std, action))
    if not np.all(np.isfinite(log_std)):
        raise ContractError("standard deviation must be positive and finite")
    z = (action - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - 0.5 * LOG_2PI, axis=-1)


def log_prob_tensor(mean: Tensor, log_std: Tensor, action: np.ndarray) -> Tensor:
    z = (T.as_tensor(action) - mean) * T.exp(T.neg(log_std))
    return T.tsum(z * z * (-0.5) - log_std, axis=-1) - 0.5 * LOG_2PI * mean.shape[-1]


def kl_diag_gaussian(p_mean, p_std, q_mean, q_std) -> tuple[np.ndarray, np.ndarray]:
    """KL(p || q) split into a mean part and a covariance part.

    The mean part is KL(N(mu_p, s_q) || N(mu_q, s_q)) and the covariance
    part KL(N(mu, s_p) || N(mu, s_q)); they sum to the full divergence.
    Both are summed over the last axis.
    """
    p_mean, p_std, q_mean, q_std = (np.asarray(a, dtype=np.float64) for a in (p_mean, p_std, q_mean, q_std))
    if np.any(p_std <= 0) or np.any(q_std <= 0):
        raise ContractError("standard deviations must be positive")
    kl_mean = 0.5 * (p_mean - q_mean) ** 2 / q_std ** 2
    ratio = (p_std / q_std) ** 2
    kl_cov = 0.5 * (ratio - 1.0 - np.log(ratio))
    return kl_mean.sum(axis=-1), kl_cov.sum(axis=-1)


def kl_total(p_mean, p_std, q_mean, q_std) -> np.ndarray:
    p_mean, p_std, q_mean, q_std = (np.asarray(a, dtype=np.float64) for a in (p_mean, p_std, q_mean, q_std))
    return np.sum(np.log(q_std / p_std) + (p_std ** 2 + (p_mean - q_mean) ** 2) / (2 * q_std ** 2) - 0.5, axis=-1)


def sample_action(mean: np.ndarray, log_std: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return mean + np.exp(log_std) * rng.standard_normal(np.shape(mean))
