"""Double-DQN training loop over simulated merge episodes."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .bench import DENSITIES, EpisodeRunner, aggregate, run_episode
from .dqn import (
    DqnLearner, NetworkSizes, QNetwork, TrainConfig, Transition, action_mode, epsilon_at, select_action,
    train_step,
)
from .planner import ManeuverCostWeights, MpcConfig
from .policies import Policy, PolicyKind
from .traffic import ScenarioConfig

log = logging.getLogger(__name__)

COOPERATION_LEVELS = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
# training episodes draw scenario seeds from here, away from evaluation seeds
TRAIN_SEED_OFFSET = 1_000_000_000
TRAIN_LOG_COLUMNS = ("step", "loss", "epsilon", "eval_return")


@dataclass(frozen=True)
class TrainingSchedule:
    log_every: int = 500
    eval_every: int = 5000
    eval_episodes: int = 5
    eval_seed_base: int = 0
    densities: tuple = DENSITIES
    cooperation_levels: tuple = COOPERATION_LEVELS


@dataclass
class TrainingRun:
    learner: DqnLearner
    log_rows: list = field(default_factory=list)
    episodes: int = 0
    steps: int = 0


def training_scenario(base: ScenarioConfig, rng: np.random.Generator, schedule: TrainingSchedule) -> ScenarioConfig:
    p_new = float(schedule.densities[int(rng.integers(len(schedule.densities)))])
    p_coop = float(schedule.cooperation_levels[int(rng.integers(len(schedule.cooperation_levels)))])
    seed = TRAIN_SEED_OFFSET + int(rng.integers(TRAIN_SEED_OFFSET))
    return replace(base, p_new=p_new, p_coop=p_coop, seed=seed)


def evaluate_network(net: QNetwork, base: ScenarioConfig, seeds, mpc: MpcConfig, weights: ManeuverCostWeights):
    policy = Policy(PolicyKind.RL, net)
    return aggregate(run_episode(replace(base, seed=int(s)), policy, mpc, weights) for s in seeds)


def train_agent(cfg: TrainConfig, seed: int = 0, base: ScenarioConfig | None = None,
                mpc: MpcConfig | None = None, weights: ManeuverCostWeights | None = None,
                schedule: TrainingSchedule | None = None, sizes: NetworkSizes | None = None,
                on_eval=None) -> TrainingRun:
    """``cfg.total_steps`` policy ticks, each followed by one update once the replay holds a batch.

    Episodes that end by timeout are stored as non-terminal (the observation
    carries no clock, so the cut-off is not part of the environment).
    ``on_eval(step, learner)`` runs after every periodic evaluation.
    """
    base = base or ScenarioConfig()
    mpc = mpc or MpcConfig()
    weights = weights or ManeuverCostWeights()
    schedule = schedule or TrainingSchedule()
    sizes = sizes or NetworkSizes(history=cfg.history)
    if sizes.history != cfg.history:
        raise ValueError("network history length differs from the training config")
    root = np.random.SeedSequence(int(seed))
    init_ss, replay_ss, act_ss, scen_ss = root.spawn(4)
    net = QNetwork.build(sizes, np.random.default_rng(init_ss))
    learner = DqnLearner(net, cfg, np.random.default_rng(replay_ss))
    act_rng = np.random.default_rng(act_ss)
    scen_rng = np.random.default_rng(scen_ss)
    run = TrainingRun(learner)
    eval_seeds = [schedule.eval_seed_base + k for k in range(schedule.eval_episodes)]
    losses = []

    while run.steps < cfg.total_steps:
        scenario = training_scenario(base, scen_rng, schedule)
        runner = EpisodeRunner(scenario, mpc, weights, history=cfg.history, n_p=cfg.n_p)
        state = runner.stack.snapshot()
        while not runner.done and run.steps < cfg.total_steps:
            eps = epsilon_at(run.steps, cfg)
            action = select_action(learner.online, state, eps, act_rng)
            reward = runner.run_tick(action_mode(action))
            nxt = runner.stack.snapshot()
            terminal = runner.reached_goal or runner.collision
            learner.replay.add(Transition(state, action, reward, nxt, terminal))
            state = nxt
            if len(learner.replay) >= cfg.batch_size:
                losses.append(train_step(learner))
            run.steps += 1
            step = run.steps
            eval_return = ""
            if schedule.eval_every and step % schedule.eval_every == 0:
                report = evaluate_network(learner.online, base, eval_seeds, mpc, weights)
                eval_return = repr(report.avg_return)
                log.info("step %d: eval return %.4f, comfort %.4f, time %.2f",
                         step, report.avg_return, report.comfort_cost, report.avg_time)
                if on_eval is not None:
                    on_eval(step, learner)
            if step % schedule.log_every == 0 or eval_return or step == cfg.total_steps:
                loss = repr(float(np.mean(losses))) if losses else ""
                run.log_rows.append((step, loss, repr(epsilon_at(step, cfg)), eval_return))
                log.debug("step %d loss %s epsilon %.4f", step, loss, epsilon_at(step, cfg))
                losses = []
        run.episodes += 1
    return run
