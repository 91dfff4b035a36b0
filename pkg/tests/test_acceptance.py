"""Acceptance criteria, one test each, with a PASS/FAIL line in the summary.

The end-to-end ordering test trains nine desk-suite runs and is opt-in:
set ``MILLION_E2E=1`` (runs are cached under ``MILLION_E2E_DIR``, default
``runs/e2e``, and only missing ones are trained).
"""

import os
import time

import numpy as np
import pytest

from million import tensor as T
from million.config import load_config
from million.envs import load_suite
from million.lang import default_bank
from million.learner import Learner, LearnerConfig
from million.policy import GTrXLPolicy, PolicyConfig
from million.popart import PopArt, update_moments
from million.protocol import Protocol, run_episode
from million.tensor import Tensor, backward
from million.tensor.gradcheck import check_with_frozen_stop_gradients, max_rel_error, numerical_grads
from oracles import conformance_errors, sequential_moments
from test_learner import call_loss, loss_inputs


def test_popart_output_preservation(acceptance):
    name = "Pop-Art preservation (100 rescale events, 1e-9 rel, < 1 s)"
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    tasks = [f"task{i}" for i in range(4)]
    W = Tensor(rng.normal(size=(4, 16)), requires_grad=True)
    b = Tensor(rng.normal(size=4), requires_grad=True)
    pa = PopArt(tasks, W, b, beta=0.05)
    worst = 0.0
    for event in range(100):
        task = int(rng.integers(4))
        h = rng.normal(size=(32, 16)) * rng.uniform(0.1, 10)
        idx = np.full(32, task)

        def f():
            return pa.unnormalize(h @ pa.W.data[task] + pa.b.data[task], idx)

        before = f()
        scale = 10.0 ** rng.uniform(-2, 4)
        pa.update({tasks[task]: rng.normal(rng.uniform(-1, 1) * scale, scale, size=int(rng.integers(1, 200)))})
        after = f()
        worst = max(worst, float(np.max(np.abs(after - before) / np.maximum(np.abs(before), 1e-12))))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-9 and elapsed < 1.0
    acceptance(name, ok, f"max rel diff {worst:.2e}, {elapsed:.3f}s")
    assert ok


def test_moment_stream_oracle(acceptance):
    name = "streaming stats vs recursion (1e5 returns, 1e-12, < 1 s)"
    rng = np.random.default_rng(1)
    returns = rng.normal(50.0, 20.0, size=100_000)
    start = time.perf_counter()
    mu, nu = 0.0, 1.0
    for chunk in np.array_split(returns, 1000):
        mu, nu, _ = update_moments(mu, nu, chunk, beta=3e-4)
    elapsed = time.perf_counter() - start
    ref_mu, ref_nu = sequential_moments(0.0, 1.0, returns.tolist(), 3e-4)
    err = max(abs(mu - ref_mu) / abs(ref_mu), abs(nu - ref_nu) / abs(ref_nu))
    ok = err <= 1e-12 and elapsed < 1.0
    acceptance(name, ok, f"max rel diff {err:.2e}, {elapsed:.3f}s")
    assert ok


OPS = {
    "add": (lambda a, b: T.add(a, b), [(3, 4), (3, 4)], False),
    "add-broadcast": (lambda a, b: a + b, [(2, 3, 4), (4,)], False),
    "sub": (lambda a, b: T.sub(a, b), [(3, 4), (3, 4)], False),
    "mul": (lambda a, b: T.mul(a, b), [(3, 4), (4,)], False),
    "div": (lambda a, b: T.div(a, b), [(3, 4), (3, 4)], True),
    "neg": (lambda a: T.neg(a), [(5,)], False),
    "exp": (lambda a: T.exp(a), [(3, 4)], False),
    "log": (lambda a: T.log(a), [(3, 4)], True),
    "tanh": (lambda a: T.tanh(a), [(3, 4)], False),
    "relu": (lambda a: T.relu(a), [(3, 4)], True),
    "sigmoid": (lambda a: T.sigmoid(a), [(3, 4)], False),
    "softplus": (lambda a: T.softplus(a), [(3, 4)], False),
    "square": (lambda a: T.square(a), [(3, 4)], False),
    "matmul": (lambda a, b: T.matmul(a, b), [(3, 4), (4, 2)], False),
    "matmul-batched": (lambda a, b: T.matmul(a, b), [(2, 3, 4), (2, 4, 5)], False),
    "sum": (lambda a: T.tsum(a, axis=1), [(3, 4)], False),
    "mean": (lambda a: T.mean(a, axis=0), [(3, 4)], False),
    "reshape": (lambda a: T.reshape(a, (2, 6)), [(3, 4)], False),
    "transpose": (lambda a: T.transpose(a, (1, 0)), [(3, 4)], False),
    "swapaxes": (lambda a: T.swapaxes(a, 0, 2), [(2, 3, 4)], False),
    "getitem": (lambda a: a[1:, ::2], [(3, 4)], False),
    "getitem-fancy": (lambda a: a[np.array([0, 2, 0]), np.array([1, 1, 3])], [(3, 4)], False),
    "take": (lambda a: T.take(a, np.array([[0, 2], [2, 2]]), axis=1), [(3, 4)], False),
    "concat": (lambda a, b: T.concat([a, b], axis=0), [(2, 3), (1, 3)], False),
    "split": (lambda a: T.split(a, [1, 3], axis=1)[1], [(3, 4)], False),
    "logsumexp": (lambda a: T.logsumexp(a, axis=-1), [(3, 4)], False),
    "softmax": (lambda a: T.softmax(a, axis=-1), [(3, 4)], False),
    "layer_norm": (lambda a, g, b: T.layer_norm(a, g, b), [(3, 6), (6,), (6,)], False),
    "attention": (lambda q, k, v, km, vm: T.masked_attention(q, k, v, mask=T.causal_mask(3, 2), memory=(km, vm)),
                  [(2, 3, 4), (2, 3, 4), (2, 3, 4), (2, 2, 4), (2, 2, 4)], False),
}


def op_error(build, shapes, positive, rng):
    params = [Tensor(rng.uniform(0.2, 2.0, size=s) if positive else rng.normal(size=s), requires_grad=True)
              for s in shapes]
    weights = rng.normal(size=build(*params).shape)
    T.current_tape().clear()

    def loss():
        return T.tsum(build(*params) * weights)

    backward(loss())
    analytic = [p.grad.copy() for p in params]
    numeric = numerical_grads(loss, params)
    return max(max_rel_error(a, n) for a, n in zip(analytic, numeric))


def test_gradient_suite(acceptance):
    name = "gradient suite (ops 1e-5, V-MPO loss 1e-4, < 30 s)"
    start = time.perf_counter()
    worst_op, worst_name = 0.0, ""
    for seed in range(5):
        rng = np.random.default_rng(seed)
        for op, (build, shapes, positive) in OPS.items():
            err = op_error(build, shapes, positive, rng)
            if err > worst_op:
                worst_op, worst_name = err, op
    worst_loss = 0.0
    for seed in range(5):
        mean, log_std, value, duals, fixed = loss_inputs(seed)
        params = [mean, log_std, value, *duals.parameters()]
        analytic, numeric = check_with_frozen_stop_gradients(lambda: call_loss(mean, log_std, value, duals, fixed),
                                                             params)
        worst_loss = max(worst_loss, *(max_rel_error(a, n, floor=1e-6) for a, n in zip(analytic, numeric)))
    elapsed = time.perf_counter() - start
    ok = worst_op <= 1e-5 and worst_loss <= 1e-4 and elapsed < 30.0
    acceptance(name, ok, f"{len(OPS)} ops worst {worst_op:.1e} ({worst_name}), loss {worst_loss:.1e}, {elapsed:.1f}s")
    assert ok


def test_protocol_conformance(acceptance):
    name = "protocol conformance (10,000 random-policy episodes, < 60 s)"
    suite, bank = load_suite(), default_bank()
    proto = Protocol(suite, bank)
    rng = np.random.default_rng(2024)
    tasks = suite.names
    act = lambda obs, state: rng.uniform(-1.0, 1.0, size=3)  # noqa: E731
    start = time.perf_counter()
    failures = []
    for i in range(10_000):
        task = tasks[i % len(tasks)]
        traj = run_episode(proto, task, act, rng)
        errs = conformance_errors(traj, proto.observation_width, proto.steps_per_trial(task))
        if errs:
            failures.append((i, errs))
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 60.0
    acceptance(name, ok, f"{len(failures)} violating episodes, {elapsed:.1f}s")
    assert ok, failures[:3]


def test_sequence_incremental_equivalence(acceptance):
    name = "stepwise vs full-sequence forward (50 episodes, 1e-9, < 30 s)"
    suite, bank = load_suite(), default_bank()
    proto = Protocol(suite, bank)
    cfg = PolicyConfig(observation_width=proto.observation_width, layers=2, width=64, heads=2,
                       memory_length=proto.max_episode_steps(), mlp_width=128, n_tasks=len(suite.names))
    pol = GTrXLPolicy(cfg, seed=7)
    rng = np.random.default_rng(3)
    for p in pol.parameters():  # move away from the zero-initialised biases
        p.data = p.data + rng.normal(scale=0.05, size=p.shape)
    start = time.perf_counter()
    worst = 0.0
    with T.no_grad():
        for ep in range(50):
            task = suite.names[ep % len(suite.names)]
            task_idx = np.array([suite.names.index(task)])
            traj = run_episode(proto, task, lambda o, s: rng.uniform(-1, 1, size=3), rng)
            full = pol.forward_sequence(traj.observations[None], task_idx)
            mem = pol.initial_memory(1)
            for t, obs in enumerate(traj.observations):
                out, mem = pol.forward_step(obs[None], mem, task_idx)
                worst = max(worst, float(np.max(np.abs(out.mean.data[0] - full.mean.data[0, t]))),
                            abs(float(out.value_normalized.data[0] - full.value_normalized.data[0, t])))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-9 and elapsed < 30.0
    acceptance(name, ok, f"max abs diff {worst:.1e}, {elapsed:.1f}s")
    assert ok


def test_bandit_smoke(acceptance):
    name = "instruction bandit >= 95% optimal actions within 50k steps (< 5 min)"
    from million.runner import build, run_eval

    cfg = load_config("builtin:bandit.ini")
    start = time.perf_counter()
    comp = build(cfg)
    lr = comp.learner
    while lr.env_steps < 50_000:
        lr.iterate()
    table = run_eval(comp, 200, seed=99, deterministic=True)
    rate = float(np.mean([v["trial_success"] for v in table.values()]))
    elapsed = time.perf_counter() - start
    ok = rate >= 0.95 and elapsed < 300.0
    acceptance(name, ok, f"optimal-action rate {rate:.3f} after {lr.env_steps} steps, {elapsed:.0f}s")
    assert ok


def test_fifo_contract(acceptance):
    name = "FIFO buffer holds b x T_target trajectories after warmup"
    suite, bank = load_suite(), default_bank()
    proto = Protocol(suite, bank)
    tasks = suite.train
    cfg = PolicyConfig(observation_width=proto.observation_width, layers=1, width=8, heads=2,
                       memory_length=proto.max_episode_steps(), mlp_width=8, n_tasks=len(tasks))
    pol = GTrXLPolicy(cfg, seed=0)
    pa = PopArt(tasks, pol.params["value.W"], pol.params["value.b"])
    lcfg = LearnerConfig(batch_size=3, t_target=4)
    lr = Learner(pol, proto, pa, lcfg, tasks, seed=11)
    sizes = []
    for _ in range(3 * lcfg.t_target):
        lr.iterate()
        sizes.append(len(lr.buffer))
    cap = lcfg.batch_size * lcfg.t_target
    warm = sizes[lcfg.t_target - 1:]
    live = lr.buffer.pushed - len(lr.buffer.evicted)
    reuse = max(lr.buffer.sample_counts.values())
    ok = all(s == cap for s in warm) and live == cap and reuse <= lcfg.t_target
    acceptance(name, ok, f"sizes after warmup {sorted(set(warm))} (expected {cap}), max reuse {reuse}")
    assert ok


E2E_VARIANTS = ("full", "no-popart", "no-instructions")
E2E_SEEDS = (0, 1, 2)


def _e2e_results(root):
    from million.runner import build, restore_checkpoint, run_eval
    from million.tensor import load_checkpoint

    results = {}
    for variant in E2E_VARIANTS:
        for seed in E2E_SEEDS:
            ckpt = load_checkpoint(os.path.join(root, variant, f"seed{seed}", "checkpoints", "latest.ckpt"))
            from million.config import parse_config
            comp = build(parse_config(ckpt.meta["config"]))
            restore_checkpoint(comp, ckpt, training_state=False)
            table = run_eval(comp, 30, seed=4242, deterministic=True)
            train = float(np.mean([table[t]["trial_success"] for t in comp.train_tasks]))
            test = float(np.mean([table[t]["trial_success"] for t in comp.test_tasks]))
            results[variant, seed] = (train, test, int(ckpt.meta["env_steps"]))
    return results


@pytest.mark.slow
def test_end_to_end_ordering(acceptance):
    name = "end-to-end ordering (3 seeds x full / no-popart / no-instructions, <= 5M steps)"
    if os.environ.get("MILLION_E2E") != "1":
        acceptance(name, None, "opt-in, set MILLION_E2E=1")
        pytest.skip("set MILLION_E2E=1 to train and check the nine desk-suite runs")
    from million.runner import train

    root = os.environ.get("MILLION_E2E_DIR", os.path.join("runs", "e2e"))
    base = load_config("builtin:desk.ini")
    import dataclasses
    for variant in E2E_VARIANTS:
        for seed in E2E_SEEDS:
            out = os.path.join(root, variant, f"seed{seed}")
            if not os.path.exists(os.path.join(out, "done")):
                cfg = dataclasses.replace(base.with_variant(variant),
                                          run=dataclasses.replace(base.run, seed=seed, variant=variant))
                train(cfg, out)
                with open(os.path.join(out, "done"), "w") as fh:
                    fh.write("ok\n")
    res = _e2e_results(root)
    mean = lambda v, k: float(np.mean([res[v, s][k] for s in E2E_SEEDS]))  # noqa: E731
    full_train, full_test = mean("full", 0), mean("full", 1)
    np_train = mean("no-popart", 0)
    ni_test = mean("no-instructions", 1)
    steps = max(r[2] for r in res.values())
    a = full_train >= 0.90
    b = full_train - np_train >= 0.20
    c = ni_test < full_test
    within = steps <= 5_000_000
    acceptance(name + " (a) full train >= 0.90", a and within, f"{full_train:.3f} (max steps {steps})")
    acceptance(name + " (b) no-popart train <= full - 0.20", b, f"{np_train:.3f} vs {full_train:.3f}")
    acceptance(name + " (c) no-instructions test < full test", c, f"{ni_test:.3f} vs {full_test:.3f}")
    assert a and b and c and within
