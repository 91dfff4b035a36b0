import dataclasses
from collections import Counter

import numpy as np
import pytest

from million import tensor as T
from million.envs import load_suite
from million.lang import default_bank
from million.learner import (Duals, FifoBuffer, Learner, LearnerConfig, TrainingDiverged, collect, draw_tasks,
                             make_batch, nstep_targets, select_top_half, softplus_inverse, trial_segment_ends,
                             vmpo_loss, vmpo_weights)
from million.policy import GTrXLPolicy, PolicyConfig
from million.popart import PopArt
from million.protocol import Phase, Protocol, Trajectory
from million.tensor import Tensor
from million.tensor.gradcheck import check_with_frozen_stop_gradients, max_rel_error
from oracles import brute_force_targets


@pytest.fixture(scope="module")
def protocol():
    return Protocol(load_suite(), default_bank())


def small_learner(protocol, tasks=("reach", "push"), seed=0, **kw):
    cfg = PolicyConfig(observation_width=protocol.observation_width, layers=1, width=8, heads=2,
                       memory_length=protocol.max_episode_steps(list(tasks)), mlp_width=8, n_tasks=len(tasks))
    pol = GTrXLPolicy(cfg, seed=seed)
    pa = PopArt(list(tasks), pol.params["value.W"], pol.params["value.b"], beta=0.01)
    opts = dict(batch_size=2, t_target=3)
    opts.update(kw)
    return Learner(pol, protocol, pa, LearnerConfig(**opts), list(tasks), seed=seed)


def fake_traj(task, rewards, trial_ids, rng):
    """Trajectory with given per-step rewards; trial id -1 marks an instruction step."""
    n = len(rewards)
    trial_ids = np.asarray(trial_ids)
    phases = np.where(trial_ids < 0, Phase.INSTRUCTION, Phase.TRIAL).astype(np.int8)
    end = np.zeros(n, dtype=bool)
    for t in range(n):
        if trial_ids[t] >= 0 and (t == n - 1 or trial_ids[t + 1] != trial_ids[t]):
            end[t] = True
    return Trajectory(task, rng.normal(size=(n, 4)), rng.normal(size=(n, 3)), np.asarray(rewards, float), phases,
                      trial_ids, end, np.zeros((n, 3)), np.zeros((n, 3)), [False] * int(end.sum()))


def random_trial_ids(rng):
    ids = []
    for trial in range(3):
        ids += [-1] * int(rng.integers(0, 4))
        ids += [trial] * int(rng.integers(1, 12))
    return ids


# buffer


def test_buffer_gains_b_per_push():
    buf = FifoBuffer(10)
    for i in range(4):
        buf.push(i)
    assert len(buf) == 4


def test_buffer_evicts_oldest_first():
    buf = FifoBuffer(3)
    for i in range(5):
        buf.push(f"t{i}")
    assert buf.ids() == [2, 3, 4]
    assert buf.evicted == [0, 1]


def test_buffer_samples_distinct():
    buf = FifoBuffer(50)
    for i in range(50):
        buf.push(i)
    picks = buf.sample(20, np.random.default_rng(0))
    assert len(set(picks)) == 20
    assert len(buf.sample(80, np.random.default_rng(0))) == 50
    with pytest.raises(RuntimeError):
        FifoBuffer(2).sample(1, np.random.default_rng(0))


def test_buffer_size_and_reuse_in_seeded_run(protocol):
    lr = small_learner(protocol, batch_size=2, t_target=3)
    sizes = []
    for _ in range(8):
        lr.iterate()
        sizes.append(len(lr.buffer))
    assert sizes[:3] == [2, 4, 6]
    assert all(s == 6 for s in sizes[2:])
    assert max(lr.buffer.sample_counts.values()) <= 3


# collection


def test_task_draws_are_uniform():
    tasks = load_suite().train
    counts = Counter(draw_tasks(tasks, 10_000, np.random.default_rng(0)))
    assert set(counts) == set(tasks)
    assert all(abs(c - 1250) <= 200 for c in counts.values())


def test_collected_episodes_start_with_instructions(protocol):
    lr = small_learner(protocol)
    trajs = collect(lr.policy.snapshot(), protocol, ["reach", "push"], 4, np.random.default_rng(1))
    assert len(trajs) == 4
    for tr in trajs:
        assert tr.phases[0] == Phase.INSTRUCTION
        assert tr.trials == 3
        np.testing.assert_array_equal(tr.behavior_log_std[0], lr.policy.params["log_std"].data)


def test_threaded_collection(protocol):
    lr = small_learner(protocol)
    trajs = collect(lr.policy.snapshot(), protocol, ["reach"], 5, np.random.default_rng(2), workers=2)
    assert len(trajs) == 5 and all(t.task == "reach" for t in trajs)


# targets


def test_geometric_example():
    rewards = np.array([[1.0, 1.0, 1.0]])
    seg = np.array([[3, 3, 3]])
    g = nstep_targets(rewards, np.zeros((1, 3)), seg, np.ones((1, 3), bool), 0.9, 5)
    assert g[0, 0] == pytest.approx(2.71)


def test_instruction_steps_get_no_target():
    rng = np.random.default_rng(0)
    tr = fake_traj("reach", [5.0, 5.0, 1.0, 1.0], [-1, -1, 0, 0], rng)
    batch = make_batch([tr], {"reach": 0})
    g = nstep_targets(batch.rewards, np.ones((1, 4)), batch.seg_end, batch.learnable, 0.9, 2)
    assert g[0, 0] == g[0, 1] == 0.0
    assert g[0, 2] == pytest.approx(1.9)


def test_segment_ends():
    tr = fake_traj("reach", np.zeros(7), [-1, 0, 0, 1, 1, -1, 2], np.random.default_rng(0))
    np.testing.assert_array_equal(trial_segment_ends(tr), [-1, 3, 3, 5, 5, -1, 7])


@pytest.mark.parametrize("n", [1, 3, 16])
def test_targets_match_brute_force(n):
    rng = np.random.default_rng(n)
    trajs = []
    for _ in range(50):
        ids = random_trial_ids(rng)
        trajs.append(fake_traj("reach", rng.normal(size=len(ids)) * 10, ids, rng))
    batch = make_batch(trajs, {"reach": 0})
    values = rng.normal(size=batch.rewards.shape)
    got = nstep_targets(batch.rewards, values, batch.seg_end, batch.learnable, 0.97, n)
    for i, tr in enumerate(trajs):
        L = len(tr)
        ref = brute_force_targets(tr.rewards, values[i, :L], tr.trial_index, tr.learnable, 0.97, n)
        np.testing.assert_allclose(got[i, :L], ref, rtol=1e-12, atol=1e-12)


# loss


def test_weights_hand_computed():
    adv = np.array([0.3, -1.0, 2.0, 0.5, -0.2, 1.1])
    sel, w = vmpo_weights(adv, eta=0.7)
    np.testing.assert_array_equal(sel, [2, 3, 5])
    e = np.exp(np.array([2.0, 0.5, 1.1]) / 0.7)
    np.testing.assert_allclose(w, e / e.sum(), rtol=1e-12, atol=1e-12)


def test_equal_advantages_give_uniform_weights():
    sel, w = vmpo_weights(np.full(8, 0.4), eta=1.0)
    assert len(sel) == 4
    np.testing.assert_allclose(w, 0.25)


def test_large_temperature_gives_uniform_weights():
    _, w = vmpo_weights(np.random.default_rng(0).normal(size=10), eta=1e9)
    np.testing.assert_allclose(w, 0.2, rtol=1e-6)


def test_single_sample_falls_back_to_full_batch():
    np.testing.assert_array_equal(select_top_half(np.array([3.0])), [0])
    sel, w = vmpo_weights(np.array([3.0]), 1.0)
    assert list(sel) == [0] and w[0] == 1.0


def loss_inputs(seed, n=6, a=3):
    rng = np.random.default_rng(seed)
    mean = Tensor(rng.normal(size=(n, a)), requires_grad=True)
    log_std = Tensor(rng.normal(size=a) * 0.3, requires_grad=True)
    value = Tensor(rng.normal(size=n), requires_grad=True)
    duals = Duals.create(0.8, 1.3, 0.6)
    fixed = dict(actions=rng.normal(size=(n, a)), old_mean=rng.normal(size=(n, a)),
                 old_log_std=rng.normal(size=a) * 0.3, advantages=rng.normal(size=n),
                 value_target=rng.normal(size=n))
    return mean, log_std, value, duals, fixed


def call_loss(mean, log_std, value, duals, f):
    return vmpo_loss(mean, log_std, f["actions"], f["old_mean"], f["old_log_std"], f["advantages"], value,
                     f["value_target"], duals)[0]


@pytest.mark.parametrize("seed", range(5))
def test_loss_gradient_matches_finite_differences(seed):
    mean, log_std, value, duals, fixed = loss_inputs(seed)
    params = [mean, log_std, value, *duals.parameters()]
    analytic, numeric = check_with_frozen_stop_gradients(lambda: call_loss(mean, log_std, value, duals, fixed), params)
    for a, n in zip(analytic, numeric):
        assert max_rel_error(a, n, floor=1e-6) < 1e-4


def test_policy_term_with_equal_advantages_is_weighted_likelihood():
    mean, log_std, value, duals, fixed = loss_inputs(0)
    fixed["advantages"] = np.zeros(6)
    _, info = vmpo_loss(mean, log_std, fixed["actions"], fixed["old_mean"], fixed["old_log_std"],
                        fixed["advantages"], value, fixed["value_target"], duals)
    from million.policy import log_prob
    sel = select_top_half(fixed["advantages"])
    ref = -np.mean(log_prob(mean.data[sel], log_std.data, fixed["actions"][sel]))
    assert info["loss_policy"] == pytest.approx(ref, rel=1e-12)
    T.current_tape().clear()


def test_kl_terms_vanish_when_policies_match():
    mean, log_std, value, duals, fixed = loss_inputs(1)
    fixed["old_mean"] = mean.data.copy()
    fixed["old_log_std"] = log_std.data.copy()
    _, info = vmpo_loss(mean, log_std, fixed["actions"], fixed["old_mean"], fixed["old_log_std"],
                        fixed["advantages"], value, fixed["value_target"], duals)
    assert info["kl_mu"] == 0.0 and info["kl_sigma"] == 0.0
    T.current_tape().clear()


def test_softplus_inverse():
    for y in (1e-3, 0.5, 1.0, 30.0):
        assert np.logaddexp(0.0, softplus_inverse(y)) == pytest.approx(y, rel=1e-12)


# iterations


def test_duals_stay_positive(protocol):
    lr = small_learner(protocol, dual_lr=0.5)
    for _ in range(6):
        lr.iterate()
        assert all(v > 0 for v in lr.duals.values().values())


def test_old_policy_refresh(protocol):
    lr = small_learner(protocol, t_target=2)
    lr.iterate()
    assert lr.refreshes == 0
    assert np.any(lr.old_policy.params["pi.W"].data != lr.policy.params["pi.W"].data)
    lr.iterate()
    assert lr.refreshes == 1
    for k, p in lr.policy.params.items():
        np.testing.assert_array_equal(lr.old_policy.params[k].data, p.data)


def test_instruction_steps_do_not_affect_loss(protocol):
    a, b = small_learner(protocol, seed=3), small_learner(protocol, seed=3)
    trajs = a.collect()
    changed = []
    rng = np.random.default_rng(0)
    for tr in trajs:
        instr = tr.phases == Phase.INSTRUCTION
        rewards, actions = tr.rewards.copy(), tr.actions.copy()
        rewards[instr] = rng.normal(size=instr.sum()) * 100
        actions[instr] = rng.normal(size=(instr.sum(), 3))
        changed.append(dataclasses.replace(tr, rewards=rewards, actions=actions))
    assert a.train_step(trajs)["loss"] == b.train_step(changed)["loss"]


def test_env_step_counters(protocol):
    lr = small_learner(protocol)
    m = lr.iterate()
    trajs = list(lr.buffer._items)
    assert m.env_steps == sum(len(t) for _, t in trajs)
    assert m.inner_steps == sum(t.inner_steps for _, t in trajs)
    assert m.inner_steps > m.env_steps - sum(int(np.sum(t.phases == 0)) for _, t in trajs)


def test_metrics_row_keys(protocol):
    m = small_learner(protocol).iterate()
    for key in ("loss", "loss_policy", "loss_value", "eta", "alpha_mu", "alpha_sigma", "kl_mu", "kl_sigma",
                "success_mean", "return_mean"):
        assert key in m.values


def test_lr_schedule():
    assert LearnerConfig(lr=1e-3).lr_at(10**9) == 1e-3
    cfg = LearnerConfig(lr=1e-3, lr_decay_steps=1000, lr_final=1e-4)
    assert cfg.lr_at(0) == 1e-3
    assert cfg.lr_at(500) == pytest.approx(5.5e-4)
    assert cfg.lr_at(1000) == cfg.lr_at(5000) == pytest.approx(1e-4)
    with pytest.raises(ValueError):
        LearnerConfig(lr_decay_steps=-1)


def test_optimizer_follows_schedule(protocol):
    lr = small_learner(protocol, lr=1e-3, lr_decay_steps=400, lr_final=1e-4)
    first = lr.iterate()
    assert 1e-4 < first.values["lr"] < 1e-3
    assert first.values["lr"] == pytest.approx(lr.config.lr_at(first.env_steps))
    while lr.env_steps < 400:
        lr.iterate()
    assert lr.iterate().values["lr"] == pytest.approx(1e-4)


def test_nan_loss_raises_with_diagnostics(protocol):
    lr = small_learner(protocol)
    lr.policy.params["pi.b"].data[:] = np.nan
    with pytest.raises(TrainingDiverged) as info:
        lr.iterate()
    assert "iteration" in info.value.diagnostics


def test_seeded_learners_agree(protocol):
    a, b = small_learner(protocol, seed=5), small_learner(protocol, seed=5)
    for _ in range(3):
        assert a.iterate().values == b.iterate().values
