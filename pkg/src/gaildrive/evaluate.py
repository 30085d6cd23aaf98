"""Crossed-dense-points evaluation and trajectory export."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .agent import Policy
from .expert import ExpertDriver, run_expert_lap
from .sim import Command, DrivingEnv, RouteSpec

MODES = ("stochastic", "deterministic")


@dataclass
class EvalReport:
    mode: str
    rewards: list[int] = field(default_factory=list)
    trajectories: list[list[tuple[float, float, str | None]]] = field(default_factory=list)
    max_reward: int = 0

    @property
    def episodes(self) -> int:
        return len(self.rewards)

    @property
    def mean(self) -> float:
        return float(np.mean(self.rewards)) if self.rewards else 0.0

    @property
    def std(self) -> float:
        return float(np.std(self.rewards)) if self.rewards else 0.0

    @property
    def max(self) -> int:
        return int(max(self.rewards)) if self.rewards else 0

    def summary(self) -> str:
        return (
            f"{self.mode}: episodes={self.episodes} mean={self.mean:.2f} std={self.std:.2f} "
            f"max={self.max} (route max {self.max_reward})"
        )


_LAP_STEPS: dict[tuple, int] = {}


def expert_lap_steps(route: RouteSpec) -> int:
    key = (route.kind, route.n_dense, round(route.length, 6))
    if key not in _LAP_STEPS:
        obs, _, _, _ = run_expert_lap(route)
        _LAP_STEPS[key] = len(obs)
    return _LAP_STEPS[key]


def run_episode(actor, route: RouteSpec, mode: str, rng: np.random.Generator, max_steps: int,
                raster: bool = False, record: bool = True):
    """One evaluation episode from the route start; returns (reward, trajectory)."""
    env = DrivingEnv(route, rng, raster=raster)
    obs = env.reset(start=True)
    if isinstance(actor, ExpertDriver):
        actor.reset()
    traj = [(env.x, env.y, None)] if record else []
    reward = 0
    for _ in range(max_steps):
        if isinstance(actor, ExpertDriver):
            action = actor.act(env.state, Command(int(np.argmax(obs.command_onehot))))
        else:
            action = actor.act(obs, rng, deterministic=(mode == "deterministic"))
        res = env.step(action)
        reward = res.dense_crossed_total
        if record:
            traj.append((env.x, env.y, None if res.infraction is None else res.infraction.value))
        obs = res.observation
        if res.done:
            break
    return reward, traj


def evaluate(actor: Policy | ExpertDriver, route: RouteSpec, episodes: int = 10, mode: str = "stochastic",
             rng: np.random.Generator | None = None, max_steps: int | None = None,
             record: bool = True) -> EvalReport:
    """Run full episodes from the route start; reward is dense points crossed.

    An infraction ends the episode at its current count.  ``max_steps``
    defaults to twice the expert's lap length on this route.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    rng = rng if rng is not None else np.random.default_rng(0)
    if max_steps is None:
        max_steps = 2 * expert_lap_steps(route)
    raster = isinstance(actor, Policy) and actor.obs_mode == "raster"
    report = EvalReport(mode, max_reward=route.n_dense)
    for _ in range(episodes):
        reward, traj = run_episode(actor, route, mode, rng, max_steps, raster, record)
        report.rewards.append(int(reward))
        if record:
            report.trajectories.append(traj)
    return report


def dump_trajectory(report: EvalReport, path) -> None:
    """Write per-episode polylines as ``x y [infraction]`` lines."""
    with open(path, "w") as fh:
        fh.write(f"# trajectories mode {report.mode} episodes {len(report.trajectories)}\n")
        for i, traj in enumerate(report.trajectories):
            fh.write(f"# episode {i} points {len(traj)} reward {report.rewards[i]}\n")
            for x, y, kind in traj:
                fh.write(f"{x:.6f} {y:.6f}" + (f" {kind}" if kind else "") + "\n")


def read_trajectories(path) -> list[list[tuple[float, float, str | None]]]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("# episode"):
                out.append([])
            elif line.startswith("#") or not line.strip():
                continue
            else:
                parts = line.split()
                out[-1].append((float(parts[0]), float(parts[1]), parts[2] if len(parts) > 2 else None))
    return out
