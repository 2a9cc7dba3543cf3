import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from merge_kit.dqn import (
    MAX_OBSERVED_VEHICLES, N_ACTIONS, DqnLearner, NetworkSizes, Observation, ObservationStack, QNetwork,
    StackSnapshot, TrainConfig, Transition, action_mode, double_dqn_targets, epsilon_at, load_agent, q_forward,
    save_agent, select_action, td_loss_and_grads, td_targets, train_step,
)
from merge_kit.planner import ManeuverMode


H = 4
SIZES = NetworkSizes(history=H)


def net(seed=0, sizes=SIZES):
    return QNetwork.build(sizes, np.random.default_rng(seed))


def random_snapshot(rng, n, h=H):
    ego = rng.normal(size=(h, 4)) * [30.0, 30.0, 5.0, 2.0]
    veh = rng.normal(size=(n, h, 2)) * [40.0, 5.0]
    return StackSnapshot(ego, veh, tuple(range(n)))


def obs(step, ids=()):
    return Observation((80.0 - step, 106.0 - step, float(step), 0.0),
                       {i: (10.0 * i - step, 5.0 + i) for i in ids})


# ---------------------------------------------------------------- observation stack

def test_first_push_backfills_every_slot():
    stack = ObservationStack(5)
    stack.push(obs(1, ids=(3,)))
    snap = stack.snapshot()
    assert np.all(snap.ego == snap.ego[0])
    assert np.all(snap.vehicles[0] == snap.vehicles[0, 0])
    assert len(stack) == 1 and stack.warm


def test_history_one_keeps_only_latest():
    stack = ObservationStack(1)
    for k in range(3):
        stack.push(obs(k))
    np.testing.assert_array_equal(stack.snapshot().ego, [[78.0, 104.0, 2.0, 0.0]])


def test_thirty_pushes_evict_oldest_six_in_order():
    stack = ObservationStack(24)
    for k in range(30):
        stack.push(obs(k))
    v = stack.snapshot().ego[:, 2]
    np.testing.assert_array_equal(v, np.arange(29, 5, -1))
    assert len(stack) == 24


def test_new_vehicle_backfilled_and_departed_vehicle_dropped():
    stack = ObservationStack(3)
    stack.push(obs(0, ids=(1,)))
    stack.push(obs(1, ids=(1, 2)))
    snap = stack.snapshot()
    assert snap.ids == (1, 2)
    np.testing.assert_array_equal(snap.vehicles[1], np.tile([19.0, 7.0], (3, 1)))
    np.testing.assert_array_equal(snap.vehicles[0, :, 0], [9.0, 10.0, 10.0])
    stack.push(obs(2, ids=(2,)))
    assert stack.snapshot().ids == (2,)


def test_snapshot_is_immutable_copy():
    stack = ObservationStack(2)
    stack.push(obs(0, ids=(1,)))
    snap = stack.snapshot()
    stack.push(obs(5, ids=(1,)))
    assert snap.ego[0, 2] == 0.0
    with pytest.raises(ValueError):
        snap.ego[0, 0] = 1.0


# ---------------------------------------------------------------- Q-network

@settings(max_examples=30, deadline=None)
@given(n=st.integers(0, MAX_OBSERVED_VEHICLES), seed=st.integers(0, 2**31 - 1))
def test_permutation_invariance_and_finiteness(n, seed):
    rng = np.random.default_rng(seed)
    q_net = net(seed % 7)
    snap = random_snapshot(rng, n)
    perm = rng.permutation(n)
    shuffled = StackSnapshot(snap.ego, snap.vehicles[perm], tuple(np.array(snap.ids, dtype=int)[perm]))
    q1, q2 = q_net([snap])[0], q_net([shuffled])[0]
    assert q1.shape == (N_ACTIONS,) and np.all(np.isfinite(q1))
    np.testing.assert_allclose(q1, q2, rtol=0, atol=1e-9)


def test_empty_set_depends_only_on_ego():
    q_net = net(1)
    rng = np.random.default_rng(3)
    snap = random_snapshot(rng, 0)
    # pooled vector of the empty set is zero: equals rho on [0, ego_code]
    e = q_net.nets["ego_encoder"](snap.ego_features())
    pooled = np.zeros(q_net.nets["phi"].out_dim)
    expected = q_net.nets["head"](q_net.nets["rho"](np.concatenate([pooled, e])))
    np.testing.assert_allclose(q_net([snap])[0], expected, atol=1e-12)


def test_duplicated_vehicle_changes_q():
    q_net = net(2)
    snap = random_snapshot(np.random.default_rng(5), 2)
    dup = StackSnapshot(snap.ego, np.concatenate([snap.vehicles, snap.vehicles[:1]]), (0, 1, 2))
    assert np.max(np.abs(q_net([snap])[0] - q_net([dup])[0])) > 1e-8


def test_batch_matches_single_forward():
    q_net = net(3)
    rng = np.random.default_rng(4)
    snaps = [random_snapshot(rng, n) for n in (0, 3, 1, 16)]
    batch = q_net(snaps)
    for k, s in enumerate(snaps):
        np.testing.assert_allclose(batch[k], q_net([s])[0], atol=1e-12)


def test_qnetwork_gradient_matches_finite_differences():
    sizes = NetworkSizes(history=2, ego_hidden=(5, 4), vehicle_hidden=(5, 3), phi=(4, 4), rho=(5,), head=(4, 3))
    q_net = net(6, sizes)
    rng = np.random.default_rng(7)
    snaps = [random_snapshot(rng, n, h=2) for n in (0, 2, 3)]
    w = rng.normal(size=(3, N_ACTIONS))
    _, cache = q_net.forward(snaps)
    grads = q_net.backward(cache, w)
    h = 1e-6
    worst = 0.0
    for p, g in zip(q_net.parameters(), grads):
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in rng.choice(flat.size, size=min(flat.size, 6), replace=False):
            old = flat[i]
            flat[i] = old + h
            q_net.touch()
            up = float(np.sum(q_net(snaps) * w))
            flat[i] = old - h
            q_net.touch()
            down = float(np.sum(q_net(snaps) * w))
            flat[i] = old
            q_net.touch()
            num = (up - down) / (2 * h)
            worst = max(worst, abs(num - gflat[i]) / max(abs(num), abs(gflat[i]), 1e-6))
    assert worst < 1e-4


def test_history_mismatch_rejected():
    with pytest.raises(ValueError):
        net(0)([random_snapshot(np.random.default_rng(0), 1, h=H + 1)])


# ---------------------------------------------------------------- action selection

class FixedQ:
    """Stands in for a network; ``q_forward`` only needs ``__call__``."""

    def __init__(self, q):
        self.q = np.asarray(q, dtype=np.float64)

    def __call__(self, states):
        return np.tile(self.q, (len(states), 1))


SNAP = random_snapshot(np.random.default_rng(0), 1)


@pytest.mark.parametrize("q, expected", [((0.1, 0.9, 0.3), 1), ((0.5, 0.5, 0.2), 0), ((0.0, 0.0, 0.0), 0)])
def test_greedy_action_and_tie_break(q, expected):
    assert select_action(FixedQ(q), SNAP, 0.0, np.random.default_rng(0)) == expected


def test_full_exploration_is_reproducible_and_uniform():
    picks = [select_action(FixedQ((0, 1, 0)), SNAP, 1.0, np.random.default_rng(s)) for s in range(3000)]
    again = [select_action(FixedQ((0, 1, 0)), SNAP, 1.0, np.random.default_rng(s)) for s in range(3000)]
    assert picks == again
    counts = np.bincount(picks, minlength=3)
    sigma = np.sqrt(3000 * (1 / 3) * (2 / 3))
    assert np.all(np.abs(counts - 1000) < 3 * sigma)


def test_epsilon_out_of_range_rejected():
    with pytest.raises(ValueError):
        select_action(FixedQ((0, 0, 0)), SNAP, 1.5, np.random.default_rng(0))


def test_action_index_mapping_is_frozen():
    assert [action_mode(k) for k in range(3)] == [
        ManeuverMode.PROGRESSIVE, ManeuverMode.COOPERATIVE, ManeuverMode.DEFENSIVE]


def test_q_forward_needs_warm_stack():
    with pytest.raises(ValueError):
        q_forward(net(0), ObservationStack(H))


# ---------------------------------------------------------------- targets and training

def test_double_dqn_target_example():
    y = td_targets([0.0], [False], [[1.0, 2.0, 0.0]], [[0.5, 0.7, 0.9]], 0.99)
    assert y[0] == pytest.approx(0.693, abs=1e-12)


def test_terminal_target_is_reward():
    y = td_targets([1.0], [True], [[1.0, 2.0, 0.0]], [[5.0, 5.0, 5.0]], 0.99)
    assert y[0] == 1.0


def test_zero_discount_gives_reward():
    rng = np.random.default_rng(1)
    y = td_targets([0.3, -1.0], [False, False], rng.normal(size=(2, 3)), rng.normal(size=(2, 3)), 0.0)
    np.testing.assert_array_equal(y, [0.3, -1.0])


def transitions(n, seed=0, terminal=False):
    rng = np.random.default_rng(seed)
    return [Transition(random_snapshot(rng, int(rng.integers(0, 4))), int(rng.integers(3)), float(rng.normal()),
                       random_snapshot(rng, int(rng.integers(0, 4))), terminal) for _ in range(n)]


def test_single_transition_loss_is_squared_td_error():
    q_net = net(4)
    (t,) = transitions(1, seed=2)
    y = double_dqn_targets([t], q_net, q_net.copy(), 0.99)
    loss, _ = td_loss_and_grads(q_net, [t], y)
    q = q_net([t.state])[0, t.action]
    assert loss == pytest.approx((y[0] - q) ** 2, rel=1e-12)


def test_zero_td_error_gives_zero_gradients():
    q_net = net(4)
    batch = transitions(3, seed=3)
    targets = q_net([t.state for t in batch])[np.arange(3), [t.action for t in batch]]
    loss, grads = td_loss_and_grads(q_net, batch, targets)
    assert loss == 0.0
    assert all(np.all(g == 0) for g in grads)


def learner(lr=9e-7, batch_size=4, **kw):
    cfg = TrainConfig(lr=lr, batch_size=batch_size, history=H, **kw)
    return DqnLearner(net(5), cfg, np.random.default_rng(0))


def test_target_synced_bit_equal_on_200th_update():
    ln = learner(lr=1e-3)
    batch = transitions(4, seed=4)
    for _ in range(199):
        train_step(ln, batch)
    assert any(not np.array_equal(a, b) for a, b in zip(ln.online.parameters(), ln.target.parameters()))
    train_step(ln, batch)
    for a, b in zip(ln.online.parameters(), ln.target.parameters()):
        assert np.array_equal(a, b)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_overfit_frozen_batch_loss_non_increasing(seed):
    ln = learner(lr=1e-3, target_update_every=10_000)
    batch = transitions(16, seed=seed, terminal=True)
    losses = np.array([train_step(ln, batch) for _ in range(100)])
    # Adam momentum lets the loss bounce by a fraction of a percent near the optimum
    assert np.all(np.diff(losses) <= 1e-2 * losses[0])
    assert losses[-1] < 1e-3 * losses[0]


def test_train_step_on_small_replay_is_noop(caplog):
    ln = learner()
    before = [p.copy() for p in ln.online.parameters()]
    with caplog.at_level(logging.WARNING, logger="merge_kit.dqn"):
        assert train_step(ln) is None
    assert "skipped" in caplog.text
    assert all(np.array_equal(a, b) for a, b in zip(before, ln.online.parameters()))


def test_replay_ring_overwrites_oldest():
    ln = learner(replay_capacity=3)
    items = transitions(5, seed=7)
    for t in items:
        ln.replay.add(t)
    assert len(ln.replay) == 3
    assert ln.replay.items == [items[3], items[4], items[2]]


@settings(max_examples=40, deadline=None)
@given(total=st.integers(0, 5000), frac=st.floats(0.0, 1.0))
def test_epsilon_schedule_monotone(total, frac):
    cfg = TrainConfig(total_steps=total, eps_decay_fraction=frac)
    steps = list(range(0, total, max(1, total // 50))) + [total, total + 1]
    eps = [epsilon_at(s, cfg) for s in steps]
    assert np.all(np.diff(eps) <= 0)
    assert eps[-1] == pytest.approx(0.2)
    assert all(0.2 - 1e-12 <= e <= 0.3 + 1e-12 for e in eps)


def test_epsilon_endpoints():
    cfg = TrainConfig(total_steps=1000)
    assert epsilon_at(0, cfg) == pytest.approx(0.3)
    assert epsilon_at(250, cfg) == pytest.approx(0.25)
    assert epsilon_at(500, cfg) == pytest.approx(0.2)
    assert epsilon_at(900, cfg) == pytest.approx(0.2)


def test_train_config_rejects_inconsistent_periods():
    with pytest.raises(ValueError):
        TrainConfig(n_p=5)


def test_agent_round_trip(tmp_path):
    q_net = net(8)
    manifest = save_agent(tmp_path / "a.ckpt", q_net, step=12, epsilon=0.25)
    assert manifest["history"] == H and manifest["training_step"] == 12
    assert (tmp_path / "a.ckpt.json").exists()
    loaded = load_agent(tmp_path / "a.ckpt")
    snap = random_snapshot(np.random.default_rng(0), 3)
    np.testing.assert_array_equal(loaded([snap]), q_net([snap]))
