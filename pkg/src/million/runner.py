"""Wires config, environments, policy and learner together for the CLI."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import os
import time
from dataclasses import dataclass

import numpy as np

from .config import ConfigError, RunConfig
from .envs import ACTION_DIM, TaskSuite, load_suite
from .lang import InstructionBank, default_bank
from .learner import Learner, TrainingDiverged, evaluate
from .policy import GTrXLPolicy, PolicyConfig
from .popart import PopArt
from .protocol import Protocol
from .tensor import Checkpoint, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

LOSS_KEYS = ("loss", "loss_policy", "loss_value", "loss_temperature", "loss_kl", "eta", "alpha_mu", "alpha_sigma",
             "kl_mu", "kl_sigma", "grad_norm", "lr")


@dataclass
class Components:
    config: RunConfig
    suite: TaskSuite
    bank: InstructionBank | None
    protocol: Protocol
    train_tasks: list[str]
    test_tasks: list[str]
    policy: GTrXLPolicy
    popart: PopArt
    learner: Learner

    @property
    def all_tasks(self) -> list[str]:
        return self.train_tasks + self.test_tasks


def build(cfg: RunConfig) -> Components:
    suite = load_suite(cfg.resolve(cfg.run.suite))
    bank = None
    if cfg.protocol.use_instructions:
        bank = default_bank(cfg.resolve(cfg.run.embeddings), cfg.resolve(cfg.run.instructions),
                            dim=cfg.protocol.embed_dim)
    protocol = Protocol(suite, bank, cfg.protocol)
    if cfg.run.train_tasks.strip():
        train = [t.strip() for t in cfg.run.train_tasks.split(",") if t.strip()]
        missing = [t for t in train if t not in suite]
        if missing:
            raise ConfigError(f"run.train_tasks: unknown task(s) {', '.join(missing)}")
    else:
        train = suite.train
    test = [t for t in suite.test if t not in train]
    tasks = train + test
    memory = cfg.policy.memory_length or protocol.max_episode_steps(tasks)
    p = cfg.policy
    pcfg = PolicyConfig(observation_width=protocol.observation_width, action_dim=ACTION_DIM, layers=p.layers,
                        width=p.width, heads=p.heads, memory_length=memory, mlp_width=p.mlp_width,
                        gate_bias=p.gate_bias, init_log_std=p.init_log_std, n_tasks=len(tasks))
    policy = GTrXLPolicy(pcfg, seed=cfg.run.seed)
    popart = PopArt(tasks, policy.params["value.W"], policy.params["value.b"], beta=cfg.popart.beta,
                    sigma_floor=cfg.popart.sigma_floor, enabled=cfg.popart.enabled)
    learner = Learner(policy, protocol, popart, cfg.learner, train, seed=cfg.run.seed)
    return Components(cfg, suite, bank, protocol, train, test, policy, popart, learner)


# checkpoints


def make_checkpoint(comp: Components) -> Checkpoint:
    lr = comp.learner
    params = dict(comp.policy.state_dict())
    for t in lr.duals.parameters():
        params[t.name] = t.data.copy()
    for tag, opt in (("opt", lr.optimizer), ("dualopt", lr.dual_optimizer)):
        for i, (m, v) in enumerate(zip(opt.state.m, opt.state.v)):
            params[f"{tag}.m.{i}"] = m
            params[f"{tag}.v.{i}"] = v
    meta = {
        "tasks": comp.all_tasks,
        "train_tasks": comp.train_tasks,
        "variant": comp.config.run.variant,
        "iteration": lr.iteration,
        "env_steps": lr.env_steps,
        "inner_steps": lr.inner_steps,
        "refreshes": lr.refreshes,
        "opt_step": lr.optimizer.state.step,
        "dualopt_step": lr.dual_optimizer.state.step,
        "rng": lr.rng.bit_generator.state,
        "config": comp.config.to_ini(),
    }
    return Checkpoint(params, meta, comp.popart.export())


def restore_checkpoint(comp: Components, ckpt: Checkpoint, training_state: bool = True) -> None:
    missing = [t for t in comp.all_tasks if t not in ckpt.meta.get("tasks", [])]
    if missing:
        raise KeyError(f"task(s) not in checkpoint manifest: {', '.join(missing)}")
    order = ckpt.meta["tasks"]
    state = {k: v for k, v in ckpt.params.items() if k in comp.policy.params}
    # value heads follow the checkpoint's task order
    rows = [order.index(t) for t in comp.all_tasks]
    state["value.W"] = state["value.W"][rows]
    state["value.b"] = state["value.b"][rows]
    comp.policy.load_state_dict(state)
    comp.popart.restore(ckpt.stats)
    if not training_state:
        return
    lr = comp.learner
    for t in lr.duals.parameters():
        t.data[...] = ckpt.params[t.name]
    for tag, opt, key in (("opt", lr.optimizer, "opt_step"), ("dualopt", lr.dual_optimizer, "dualopt_step")):
        opt.state.step = int(ckpt.meta.get(key, 0))
        n = len(opt.params) if f"{tag}.m.0" in ckpt.params else 0
        opt.state.m = [ckpt.params[f"{tag}.m.{i}"].copy() for i in range(n)]
        opt.state.v = [ckpt.params[f"{tag}.v.{i}"].copy() for i in range(n)]
    lr.iteration = int(ckpt.meta["iteration"])
    lr.env_steps = int(ckpt.meta["env_steps"])
    lr.inner_steps = int(ckpt.meta["inner_steps"])
    lr.refreshes = int(ckpt.meta.get("refreshes", 0))
    lr.rng.bit_generator.state = ckpt.meta["rng"]
    lr.old_policy = comp.policy.snapshot()


def file_digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# training


def metric_columns(comp: Components) -> list[str]:
    cols = ["iteration", "env_steps", "inner_steps"]
    cols += [f"success_{t}" for t in comp.train_tasks]
    cols += ["success_mean", "return_mean", *LOSS_KEYS]
    cols += [f"eval_{t}" for t in comp.all_tasks]
    cols += ["eval_train", "eval_test", "eval_train_avg", "eval_test_avg"]
    return cols


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return "nan" if math.isnan(value) else repr(value)
    return str(value)


def run_eval(comp: Components, episodes: int, seed: int, deterministic: bool = True,
             tasks: list[str] | None = None) -> dict[str, dict[str, float]]:
    rng = np.random.default_rng(seed)
    return evaluate(comp.policy, comp.protocol, tasks or comp.all_tasks, episodes, rng, deterministic)


def _split_means(comp: Components, table: dict) -> tuple[float, float]:
    mean = lambda ts: float(np.mean([table[t]["trial_success"] for t in ts])) if ts else float("nan")  # noqa: E731
    return mean(comp.train_tasks), mean(comp.test_tasks)


def train(cfg: RunConfig, out: str, resume: str | None = None, echo=None) -> Components:
    """Run learner iterations until ``run.total_env_steps``; write config, metrics and checkpoints to ``out``."""
    echo = echo or (lambda msg: print(msg, flush=True))
    os.makedirs(os.path.join(out, "checkpoints"), exist_ok=True)
    comp = build(cfg)
    if resume:
        restore_checkpoint(comp, load_checkpoint(resume))
    with open(os.path.join(out, "config.ini"), "w", encoding="utf-8") as fh:
        fh.write(cfg.to_ini())
    cols = metric_columns(comp)
    metrics_path = os.path.join(out, "metrics.csv")
    append = bool(resume) and os.path.exists(metrics_path)
    lr = comp.learner
    run = cfg.run
    next_eval = (lr.env_steps // run.eval_interval + 1) * run.eval_interval
    next_ckpt = (lr.env_steps // run.checkpoint_interval + 1) * run.checkpoint_interval
    history: list[tuple[float, float]] = []
    started = time.time()
    with open(metrics_path, "a" if append else "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        if not append:
            writer.writeheader()
        while lr.env_steps < run.total_env_steps:
            try:
                m = lr.iterate()
            except TrainingDiverged as exc:
                path = os.path.join(out, "diverged.txt")
                with open(path, "w", encoding="utf-8") as dump:
                    for k, v in exc.diagnostics.items():
                        dump.write(f"{k} = {v}\n")
                raise
            row = {"iteration": m.iteration, "env_steps": m.env_steps, "inner_steps": m.inner_steps, **m.values}
            last = lr.env_steps >= run.total_env_steps
            if lr.env_steps >= next_eval or last:
                table = run_eval(comp, run.eval_episodes, seed=run.seed * 1_000_003 + lr.iteration)
                tr, te = _split_means(comp, table)
                history.append((tr, te))
                recent = history[-run.eval_average:]
                row.update({f"eval_{t}": v["trial_success"] for t, v in table.items()})
                row.update(eval_train=tr, eval_test=te, eval_train_avg=float(np.mean([h[0] for h in recent])),
                           eval_test_avg=float(np.nanmean([h[1] for h in recent])) if comp.test_tasks else float("nan"))
                echo(f"steps {lr.env_steps:>9d}  iter {lr.iteration:>6d}  train {tr:.3f}  test {te:.3f}  "
                     f"({time.time() - started:.0f}s)")
                while next_eval <= lr.env_steps:
                    next_eval += run.eval_interval
            writer.writerow({k: _fmt(row.get(k)) for k in cols})
            fh.flush()
            if lr.env_steps >= next_ckpt or last:
                ckpt = make_checkpoint(comp)
                save_checkpoint(os.path.join(out, "checkpoints", f"step_{lr.env_steps:010d}.ckpt"), ckpt)
                save_checkpoint(os.path.join(out, "checkpoints", "latest.ckpt"), ckpt)
                while next_ckpt <= lr.env_steps:
                    next_ckpt += run.checkpoint_interval
    return comp
