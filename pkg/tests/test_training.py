import numpy as np

from merge_kit.dqn import NetworkSizes, TrainConfig
from merge_kit.traffic import ScenarioConfig
from merge_kit.training import TrainingSchedule, train_agent

SIZES = NetworkSizes(history=2)


def small(total, **kw):
    return TrainConfig(total_steps=total, batch_size=4, history=2, lr=1e-4, **kw)


def test_training_is_deterministic():
    schedule = TrainingSchedule(log_every=10, eval_every=20, eval_episodes=1)
    base = ScenarioConfig(episode_timeout=4.0)
    a = train_agent(small(40), seed=3, base=base, schedule=schedule, sizes=SIZES)
    b = train_agent(small(40), seed=3, base=base, schedule=schedule, sizes=SIZES)
    assert a.log_rows == b.log_rows and a.steps == 40
    for p, q in zip(a.learner.online.parameters(), b.learner.online.parameters()):
        assert np.array_equal(p, q)
    assert [r[0] for r in a.log_rows] == [10, 20, 30, 40]
    assert a.log_rows[1][3] != "" and a.log_rows[0][3] == ""


def test_goal_is_terminal_and_timeout_is_not():
    empty = TrainingSchedule(log_every=100, eval_every=0, densities=(0.0,), cooperation_levels=(0.4,))
    reach = train_agent(small(40), seed=0, base=ScenarioConfig(episode_timeout=12.0), schedule=empty, sizes=SIZES)
    items = reach.learner.replay.items
    goals = [t for t in items if t.terminal]
    assert goals and all(t.reward == 1.0 for t in goals)
    cut = train_agent(small(12), seed=0, base=ScenarioConfig(episode_timeout=1.2), schedule=empty, sizes=SIZES)
    assert cut.episodes == 6
    assert not any(t.terminal for t in cut.learner.replay.items)


def test_updates_follow_replay_fill():
    run = train_agent(small(10), seed=1, base=ScenarioConfig(episode_timeout=3.0),
                      schedule=TrainingSchedule(log_every=5, eval_every=0), sizes=SIZES)
    # one update per step once the replay holds a batch of 4
    assert run.learner.updates == 10 - 3
