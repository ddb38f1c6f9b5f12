"""Transfer-learning and multi-agent deployment strategies plus fold-based evaluation."""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import patterns
from .qlearn import (
    QNetwork,
    TrainResult,
    act_many,
    build_state,
    individual_reward,
    joint_reward,
    state_dim,
    train_dqn,
)
from .sim import N_ACTIONS, ObservationSpec, SimConfig, TrajectoryLog, World, init_world, observe_many, step

MAX_AGENTS = 11


def _check_agents(n_agents: int) -> None:
    if not 1 <= n_agents <= MAX_AGENTS:
        raise ValueError(f"n_agents must lie in [1, {MAX_AGENTS}], got {n_agents}")


@dataclass
class Policy:
    """Greedy/epsilon controller shared by every agent it is deployed on."""

    net: QNetwork
    obs_spec: ObservationSpec
    epsilon: float

    def actions(self, states: np.ndarray, rng: np.random.Generator) -> list[int]:
        return act_many(self.net, states, self.epsilon, rng)


@dataclass
class RandomPolicy:
    obs_spec: ObservationSpec

    def actions(self, states: np.ndarray, rng: np.random.Generator) -> list[int]:
        return [int(a) for a in rng.integers(N_ACTIONS, size=len(states))]


def _world_factory(sim_cfg: SimConfig, n_agents: int) -> Callable[[int], World]:
    cfg = sim_cfg.replace(n_controllable=n_agents)

    def make(seed: int) -> World:
        return init_world(cfg.replace(rng_seed=seed))

    return make


def train_core(lam, seed: int, sim_cfg: SimConfig | None = None, target_update_period: int = 0) -> TrainResult:
    """Train the single-agent core network with reward = own speed / 80."""
    sim_cfg = sim_cfg or SimConfig()
    return train_dqn(
        _world_factory(sim_cfg, 1),
        lam.obs_spec(),
        lam.net_spec(),
        lam.schedule(target_update_period),
        individual_reward,
        seed,
    )


def train_multiagent(
    lam,
    n_agents: int,
    reward_mode: str = "joint",
    seed: int = 0,
    sim_cfg: SimConfig | None = None,
    target_update_period: int = 0,
) -> TrainResult:
    """Train one shared network on ``n_agents`` simultaneous agents.

    All agents write to a single replay buffer. In ``joint`` mode each agent's
    reward is the mean trained-agent speed of the tick, divided by 80.
    """
    _check_agents(n_agents)
    rewards = {"joint": joint_reward, "individual": individual_reward}
    if reward_mode not in rewards:
        raise ValueError(f"unknown reward mode {reward_mode!r}")
    sim_cfg = sim_cfg or SimConfig()
    return train_dqn(
        _world_factory(sim_cfg, n_agents),
        lam.obs_spec(),
        lam.net_spec(),
        lam.schedule(target_update_period),
        rewards[reward_mode],
        seed,
    )


def deploy_transfer(core: QNetwork, n_agents: int, obs_spec: ObservationSpec, epsilon: float) -> Policy:
    """Hand the core network's weights, untouched, to ``n_agents`` independent agents."""
    _check_agents(n_agents)
    if core.spec.input_dim != state_dim(obs_spec.n_cells, obs_spec.temporal_window):
        raise ValueError("observation spec does not match the network input")
    return Policy(core, obs_spec, epsilon)


@dataclass
class EvalReport:
    n_agents: int
    fold_speeds: list[float]
    fold_events: list[int]
    strategy: str = ""
    log_paths: list[str] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.fold_speeds))

    @property
    def min(self) -> float:
        return float(np.min(self.fold_speeds))

    @property
    def max(self) -> float:
        return float(np.max(self.fold_speeds))

    @property
    def spread(self) -> float:
        return self.max - self.min

    def rows(self) -> list[tuple]:
        return [
            (self.strategy, self.n_agents, f, speed, n_cp)
            for f, (speed, n_cp) in enumerate(zip(self.fold_speeds, self.fold_events))
        ]

    def summary(self) -> dict:
        return {
            "strategy": self.strategy,
            "n_agents": self.n_agents,
            "folds": len(self.fold_speeds),
            "min": self.min,
            "mean": self.mean,
            "max": self.max,
            "spread": self.spread,
        }


REPORT_COLUMNS = ("strategy", "n_agents", "fold", "avg_speed_mph", "n_cp")


def _run_fold(policy, n_agents, fold, eval_ticks, base_seed, sim_cfg, world_factory, log_fh):
    seed = base_seed + fold
    world = world_factory(seed) if world_factory else init_world(sim_cfg.replace(n_controllable=n_agents, rng_seed=seed))
    agents = world.policy_ids[:n_agents]
    if len(agents) != n_agents:
        raise ValueError(f"world has {len(agents)} policy vehicles, need {n_agents}")
    rng = np.random.default_rng(np.random.SeedSequence([base_seed, fold]))
    spec = policy.obs_spec
    w = spec.temporal_window
    histories = [[] for _ in agents]
    writer = TrajectoryLog(log_fh) if log_fh is not None else None
    front = np.zeros((eval_ticks, len(agents)), dtype=bool)
    total = 0.0
    for t in range(eval_ticks):
        x = observe_many(world, agents, spec)
        states = np.stack([build_state(h, xi, w) for h, xi in zip(histories, x)])
        actions = policy.actions(states, rng)
        if w:
            for h, xi, a in zip(histories, x, actions):
                h.append((xi, a))
                del h[:-w]
        outcome = step(world, dict(zip(agents, actions)))
        front[t] = outcome.blocked[agents, 0]
        total += float(np.mean(world.speed[agents]))
        if writer is not None:
            writer.record(outcome)
    n_cp = sum(len(patterns.detect_onsets(front[:, k])) for k in range(len(agents)))
    return total / max(eval_ticks, 1), n_cp


def _fold_task(args):
    *head, want_log = args
    buf = io.StringIO() if want_log else None
    speed, n_cp = _run_fold(*head, buf)
    return speed, n_cp, buf.getvalue() if buf is not None else ""


def evaluate_policy(
    policy,
    n_agents: int,
    folds: int = 5,
    eval_ticks: int = 10_000,
    base_seed: int = 0,
    sim_cfg: SimConfig | None = None,
    world_factory: Callable[[int], World] | None = None,
    log_dir: str | Path | None = None,
    strategy: str = "",
    jobs: int = 1,
) -> EvalReport:
    """Average trained-agent speed over ``folds`` fresh worlds seeded ``base_seed + f``.

    When ``log_dir`` is given, one trajectory CSV per fold is written there.
    """
    if folds < 1:
        raise ValueError("folds must be >= 1")
    sim_cfg = sim_cfg or SimConfig()
    tasks = [
        (policy, n_agents, f, eval_ticks, base_seed, sim_cfg, world_factory, log_dir is not None)
        for f in range(folds)
    ]
    if jobs > 1 and world_factory is None and folds > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(min(jobs, folds)) as pool:
            results = list(pool.map(_fold_task, tasks))
    else:
        results = [_fold_task(t) for t in tasks]
    speeds, events, paths = [], [], []
    for f, (speed, n_cp, text) in enumerate(results):
        if log_dir is not None:
            path = Path(log_dir) / f"{strategy or 'policy'}_n{n_agents:02d}_fold{f}.csv"
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(text)
            paths.append(str(path))
        speeds.append(speed)
        events.append(n_cp)
    return EvalReport(n_agents, speeds, events, strategy, paths)


def write_reports(reports: list[EvalReport], csv_path: Path, json_path: Path | None = None) -> None:
    import csv

    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for rep in reports:
            for strategy, n, fold, speed, n_cp in rep.rows():
                w.writerow((strategy, n, fold, f"{speed:.6f}", n_cp))
    if json_path is not None:
        json_path.write_text(json.dumps([r.summary() for r in reports], indent=2, sort_keys=True) + "\n")
