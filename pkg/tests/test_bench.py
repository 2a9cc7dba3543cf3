import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from merge_kit.bench import (
    SWEEP_COLUMNS, EpisodeRunner, SweepCell, aggregate, comfort_cost, discounted, parse_policies, run_episode,
    run_sweep, step_reward, total_cost, write_sweep_csv,
)
from merge_kit.dqn import NetworkSizes, QNetwork
from merge_kit.planner import ManeuverMode, MpcConfig
from merge_kit.policies import Policy
from merge_kit.traffic import RoadLayout, ScenarioConfig


# ---------------------------------------------------------------- formulas

def test_step_reward_examples():
    assert step_reward([9.0] * 6, True) == 1.0
    assert step_reward([5.0, 4.0, -12.0, 0.0, 1.0, 5.0], False) == 0.0
    assert step_reward([8, 0, 0, 0, 0, 0], False) == pytest.approx(-1.5)


def test_comfort_cost_examples():
    assert comfort_cost([1.0, 5.0, -14.0]) == 0.0
    assert comfort_cost([7, 3, 6], 3) == pytest.approx(5 / 3)
    with pytest.raises(ValueError):
        comfort_cost([])


@pytest.mark.parametrize("j, t, c", [(1.08, 15.3, 252.8172), (7.45, 15.9, 1883.4345), (0.0, 42.0, 0.0)])
def test_total_cost_examples(j, t, c):
    assert total_cost(j, t) == pytest.approx(c, abs=1e-9)


@pytest.mark.parametrize("t, j, c", [(15.9, 7.45, 1885), (15.9, 1.63, 412.6), (15.3, 1.08, 253), (14.1, 1.08, 211)])
def test_cost_table_within_three_percent(t, j, c):
    assert abs(total_cost(j, t) - c) / c < 0.03


def test_negative_cost_inputs_rejected():
    with pytest.raises(ValueError):
        total_cost(-1.0, 3.0)


def test_discounted_return():
    assert discounted([1.0, 1.0, 1.0], 0.5) == pytest.approx(1.75)
    assert discounted([-2.0], 0.99) == -2.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=1, max_size=60))
def test_comfort_is_mean_of_tick_penalties(jerks):
    # with whole ticks, J_emg equals minus the mean reward per planner step
    padded = jerks + [0.0] * (-len(jerks) % 6)
    ticks = [padded[k:k + 6] for k in range(0, len(padded), 6)]
    mean_reward = np.mean([step_reward(t, False) for t in ticks])
    assert comfort_cost(padded) == pytest.approx(-mean_reward, abs=1e-9)


# ---------------------------------------------------------------- episodes

def minimum_time_to_goal(distance, v_max=15.0, a_max=2.5, j_max=15.0):
    """Rest-to-distance minimum time with jerk and acceleration limits (distance past the v_max ramp)."""
    t_j = a_max / j_max
    t_a = (v_max - a_max * t_j) / a_max  # constant-acceleration phase
    ramp_time = t_a + 2 * t_j
    ramp_distance = v_max * ramp_time / 2  # symmetric trapezoidal acceleration profile
    assert distance > ramp_distance
    return ramp_time + (distance - ramp_distance) / v_max


@pytest.mark.parametrize("kind", ["neutral", "defensive", "random"])
def test_empty_road_reaches_goal_near_minimum_time(kind):
    layout = RoadLayout()
    t_min = minimum_time_to_goal(layout.goal_position)
    assert t_min == pytest.approx(10.15, abs=1e-9)
    result = run_episode(ScenarioConfig(p_new=0.0, seed=1), Policy.create(kind))
    assert result.reached_goal and not result.collision
    assert t_min <= result.crossing_time <= t_min + 0.2
    assert set(result.modes) == {"take_way"}


def test_same_seed_gives_identical_result():
    cfg = ScenarioConfig(p_new=0.2, seed=21, episode_timeout=20.0)
    a = run_episode(cfg, Policy.create("random"))
    b = run_episode(cfg, Policy.create("random"))
    assert a.crossing_time == b.crossing_time
    np.testing.assert_array_equal(a.jerks, b.jerks)
    assert a.modes == b.modes and a.rewards == b.rewards


def spawns(runner):
    seen = {}
    for time, vid, lane, _, _, _, coop in runner.traffic_trace:
        if lane == "merge" and vid not in seen:
            seen[vid] = (time, coop)
    return seen


def test_paired_seeding_independent_of_policy():
    cfg = ScenarioConfig(p_new=0.2, seed=8, episode_timeout=8.0)
    _, a = run_episode(cfg, Policy.create("progressive"), record=True)
    _, b = run_episode(cfg, Policy.create("random"), record=True)
    sa, sb = spawns(a), spawns(b)
    common = sorted(set(sa) & set(sb))
    assert len(common) >= 5
    assert all(sa[v] == sb[v] for v in common)


def test_returns_match_training_loop_definition():
    cfg = ScenarioConfig(p_new=0.1, seed=5, episode_timeout=15.0)
    result = run_episode(cfg, Policy.create("progressive"))
    runner = EpisodeRunner(cfg)
    rewards = []
    while not runner.done:
        rewards.append(runner.run_tick(ManeuverMode.PROGRESSIVE))
    assert rewards == result.rewards
    assert result.discounted_return == pytest.approx(sum(r * 0.99**k for k, r in enumerate(rewards)), abs=1e-12)


def test_cooperative_traffic_not_slower_for_defensive():
    base = ScenarioConfig(p_new=0.05, velocity_mu_choices=(5.0,), episode_timeout=30.0)
    seeds = range(50)
    times = {}
    for p_coop in (0.0, 1.0):
        results = [run_episode(replace(base, p_coop=p_coop, seed=s), Policy.create("defensive")) for s in seeds]
        times[p_coop] = np.mean([r.crossing_time for r in results])
    assert times[1.0] <= times[0.0]


def test_runner_requires_matching_steps():
    with pytest.raises(ValueError):
        EpisodeRunner(ScenarioConfig(), MpcConfig(horizon_steps=25, step=0.2))


# ---------------------------------------------------------------- aggregation and sweeps

def test_aggregate_identities():
    results = [run_episode(ScenarioConfig(p_new=0.1, seed=s, episode_timeout=12.0), Policy.create("random"))
               for s in range(4)]
    report = aggregate(results)
    assert math.isclose(report.total_cost, report.comfort_cost * report.avg_time**2, rel_tol=1e-9)
    assert report.episodes == 4 and report.collisions == 0
    assert all(r.crossing_time <= 12.0 for r in results)
    with pytest.raises(ValueError):
        aggregate([])


def test_sweep_row_count_and_zero_collisions(tmp_path):
    base = ScenarioConfig(episode_timeout=1.2)
    grid = [SweepCell(p, 0.4) for p in (0.02, 0.1, 0.3)]
    policies = [Policy.create(k) for k in parse_policies("random,progressive,neutral,defensive")]
    rl = QNetwork.build(NetworkSizes(history=2), np.random.default_rng(0))
    policies.append(Policy.create("rl", network=rl))
    with pytest.raises(ValueError):
        run_sweep(grid, range(2), policies + policies[:1], base)
    rows = run_sweep(grid, range(50), policies, base)
    assert len(rows) == 15
    assert sum(len(r.episodes) for r in rows) == 750
    assert all(r.report.collisions == 0 for r in rows)
    path = tmp_path / "sweep.csv"
    write_sweep_csv(path, rows)
    lines = path.read_text().splitlines()
    assert lines[0].split(",") == list(SWEEP_COLUMNS) and len(lines) == 16


def test_parallel_sweep_matches_serial():
    base = ScenarioConfig(episode_timeout=4.0)
    grid = [SweepCell(0.2, 0.4, "15"), SweepCell(0.05, 1.0, "8")]
    policies = [Policy.create("random"), Policy.create("neutral")]
    serial = run_sweep(grid, range(3), policies, base, workers=1)
    parallel = run_sweep(grid, range(3), policies, base, workers=2)
    assert [r.csv_row() for r in serial] == [r.csv_row() for r in parallel]


def test_unknown_velocity_class_and_policy_rejected():
    with pytest.raises(ValueError):
        SweepCell(0.1, 0.4, "fast").scenario(ScenarioConfig(), 0)
    with pytest.raises(ValueError):
        parse_policies("random,sporty")
    assert parse_policies("all") == ["random", "progressive", "neutral", "defensive", "rl"]
