"""Rollouts, GAE, PPO and BC losses, and the BC / GAIL / BC-GAIL training loops."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .agent import (
    ACT_DIM,
    PolicyDist,
    Policy,
    build_actor_critic,
    build_discriminator,
    clamp_actions,
    disc_input,
    disc_loss,
    disc_reward,
    log_prob,
    log_prob_grad_mean,
    policy_input,
)
from .errors import ConfigurationError, NumericalError
from .evaluate import evaluate, expert_lap_steps
from .expert import Dataset
from .sim import OBS_DIM, RASTER_SHAPE, Action, DrivingEnv, RouteSpec, make_route

log = logging.getLogger(__name__)

METRICS_HEADER = [
    "update",
    "env_steps",
    "eval_reward_stoch",
    "eval_reward_det",
    "actor_loss",
    "value_loss",
    "disc_loss",
    "bc_loss",
    "alpha",
    "gp_penalty",
    "wall_clock_s",
]
BC_METRICS_HEADER = ["epoch", "train_loss", "val_loss", "best_val_loss", "wall_clock_s"]
MODES = ("bc", "gail", "bc_gail")

# per-route (minibatch, steps per actor)
ROUTE_BATCHING = {"short": (300, 240), "medium": (900, 720), "long": (900, 720)}


@dataclass
class TrainConfig:
    route: str = "short"
    obs_mode: str = "vector"
    n_envs: int = 10
    lr: float = 1e-4
    ppo_epochs: int = 4
    minibatch: int = 300
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.1
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    steps_per_actor: int = 240
    log_std: tuple[float, float] = (-2.0, -3.2)
    gp_coef: float = 10.0
    eps_fd: float = 1e-3
    alpha0: float = 0.9
    alpha_decay: float = 0.995
    total_updates: int = 200
    seed: int = 0
    disc_lr: float = 1e-3
    disc_epochs: int = 1
    normalize_rewards: bool = True
    eval_stochastic_episodes: int = 1
    checkpoint_every: int = 10
    bc_lr: float = 3e-4
    bc_epochs: int = 300
    bc_batch: int = 64
    bc_train_fraction: float = 0.7
    record_wall_clock: bool = False

    def __post_init__(self):
        self.log_std = tuple(float(v) for v in self.log_std)
        if not 0.0 <= self.alpha0 <= 1.0:
            raise ConfigurationError("alpha0 must lie in [0, 1]")
        if not 0.0 < self.alpha_decay <= 1.0:
            raise ConfigurationError("alpha_decay must lie in (0, 1]")
        if self.timesteps_per_update % self.minibatch:
            raise ConfigurationError("minibatch must divide n_envs * steps_per_actor")

    @property
    def timesteps_per_update(self) -> int:
        return self.n_envs * self.steps_per_actor

    @classmethod
    def for_route(cls, route: str = "short", **overrides) -> "TrainConfig":
        m, steps = ROUTE_BATCHING[route]
        kwargs = {"route": route, "minibatch": m, "steps_per_actor": steps}
        kwargs.update(overrides)
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# ---------------------------------------------------------------------------
# closed-form pieces


def gae(rewards, values, dones, bootstrap, gamma: float = 0.99, lam: float = 0.95):
    """Generalized advantage estimation along axis 0 (time).

    Extra trailing axes are independent environment streams.  ``dones[t]``
    marks that the episode ended after step ``t``.
    """
    rewards = np.asarray(rewards, np.float64)
    values = np.asarray(values, np.float64)
    notdone = 1.0 - np.asarray(dones, np.float64)
    adv = np.zeros_like(rewards)
    next_value = np.asarray(bootstrap, np.float64)
    running = np.zeros_like(rewards[0])
    for t in range(len(rewards) - 1, -1, -1):
        delta = rewards[t] + gamma * next_value * notdone[t] - values[t]
        running = delta + gamma * lam * notdone[t] * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + values


def standardize(x) -> np.ndarray:
    x = np.asarray(x, np.float64)
    return (x - x.mean()) / (x.std() + 1e-8)


def ppo_actor_loss(log_prob_new, log_prob_old, advantages, clip: float = 0.1):
    """Clipped surrogate loss and its gradient with respect to ``log_prob_new``."""
    ratio = np.exp(np.asarray(log_prob_new, np.float64) - np.asarray(log_prob_old, np.float64))
    adv = np.asarray(advantages, np.float64)
    s1 = ratio * adv
    s2 = np.clip(ratio, 1.0 - clip, 1.0 + clip) * adv
    loss = -float(np.mean(np.minimum(s1, s2)))
    grad = np.where(s1 <= s2, -adv * ratio, 0.0) / len(adv)
    return loss, grad


def value_loss(value_pred, returns) -> float:
    return float(np.mean((np.asarray(value_pred, np.float64) - returns) ** 2))


def total_ppo_loss(actor_loss: float, value_pred, returns, entropy: float, c1: float = 0.5, c2: float = 0.0) -> float:
    total = actor_loss + c1 * value_loss(value_pred, returns)
    if c2:
        total -= c2 * entropy
    return total


def bc_loss(dist: PolicyDist, expert_actions) -> float:
    return -float(np.mean(log_prob(dist, expert_actions)))


def alpha_schedule(alpha0: float, decay: float, k: int) -> float:
    return alpha0 * decay**k


def combined_actor_loss(l_bc: float, l_gail: float, alpha: float) -> float:
    return alpha * l_bc + (1.0 - alpha) * l_gail


# ---------------------------------------------------------------------------
# rollouts


@dataclass
class TransitionBatch:
    """Arrays indexed ``[step, env]``."""

    obs: np.ndarray
    raw_actions: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    bootstrap: np.ndarray
    rasters: np.ndarray | None = None
    episodes_finished: int = 0

    def __len__(self) -> int:
        return self.rewards.size

    @property
    def env_index(self) -> np.ndarray:
        return np.broadcast_to(np.arange(self.rewards.shape[1]), self.rewards.shape)

    def flat(self, name: str) -> np.ndarray:
        arr = getattr(self, name)
        return arr.reshape((-1,) + arr.shape[2:])


def make_envs(route: RouteSpec, n: int, seed: int, raster: bool = False) -> tuple[list[DrivingEnv], list]:
    """Independent environments and action-noise streams keyed by (seed, env index)."""
    envs, rngs = [], []
    for i in range(n):
        env_seq, act_seq = np.random.SeedSequence([seed, i]).spawn(2)
        envs.append(DrivingEnv(route, np.random.default_rng(env_seq), raster=raster))
        rngs.append(np.random.default_rng(act_seq))
    return envs, rngs


def collect_rollout(policy: Policy, envs: list[DrivingEnv], rngs: list, steps_per_actor: int,
                    disc: nn.Network | None = None, last_obs: list | None = None):
    """Step every environment ``steps_per_actor`` times in lockstep.

    Terminated episodes are reset in place and collection continues.  Rewards
    are critic scores of the (clamped) executed actions; zero without a
    critic.  Returns ``(batch, last_obs)`` so the next rollout resumes the
    running episodes.
    """
    n = len(envs)
    raster = envs[0].raster
    if last_obs is None:
        last_obs = [env.reset() for env in envs]
    obs = np.zeros((steps_per_actor, n, OBS_DIM), np.float32)
    rasters = np.zeros((steps_per_actor, n) + RASTER_SHAPE, np.float32) if raster else None
    raw = np.zeros((steps_per_actor, n, ACT_DIM))
    logp = np.zeros((steps_per_actor, n))
    values = np.zeros((steps_per_actor, n))
    dones = np.zeros((steps_per_actor, n), bool)
    finished = 0
    current = last_obs
    for t in range(steps_per_actor):
        vec = np.stack([o.vector for o in current])
        obs[t] = vec
        r_t = np.stack([o.raster for o in current]) if raster else None
        if raster:
            rasters[t] = r_t
        dist, v = policy.evaluate(vec, r_t)
        z = np.stack([g.standard_normal(ACT_DIM) for g in rngs])
        a = dist.mean + dist.std * z
        raw[t] = a
        logp[t] = log_prob(dist, a)
        values[t] = v
        nxt = []
        for i, env in enumerate(envs):
            res = env.step(Action(float(a[i, 0]), float(a[i, 1])))
            if res.done:
                dones[t, i] = True
                finished += 1
                nxt.append(env.reset())
            else:
                nxt.append(res.observation)
        current = nxt
    vec = np.stack([o.vector for o in current])
    r_t = np.stack([o.raster for o in current]) if raster else None
    _, bootstrap = policy.evaluate(vec, r_t)
    rewards = np.zeros((steps_per_actor, n))
    if disc is not None:
        x = disc_input(obs.reshape(-1, OBS_DIM), clamp_actions(raw.reshape(-1, ACT_DIM)),
                       None if rasters is None else rasters.reshape((-1,) + RASTER_SHAPE))
        rewards = disc_reward(disc, x).reshape(steps_per_actor, n)
    batch = TransitionBatch(obs, raw, logp, values, rewards, dones, bootstrap, rasters, finished)
    return batch, current


# ---------------------------------------------------------------------------
# update steps


def bc_step(policy: Policy, obs, actions, rasters=None, weight: float = 1.0) -> float:
    """Accumulate ``weight * bc_loss`` gradients into the policy network."""
    dist, _ = policy.evaluate(obs, rasters, cache=True)
    loss = bc_loss(dist, actions)
    g_mean = -log_prob_grad_mean(dist, actions) / len(actions)
    out_grad = np.zeros((len(actions), 3))
    out_grad[:, :ACT_DIM] = weight * g_mean
    policy.net.backward(out_grad)
    return loss


def ppo_step(policy: Policy, obs, raw, logp_old, adv, returns, cfg: TrainConfig, actor_weight: float = 1.0,
             rasters=None):
    """Accumulate gradients of ``actor_weight * actor + c1 * value`` for one minibatch."""
    dist, v = policy.evaluate(obs, rasters, cache=True)
    logp_new = log_prob(dist, raw)
    a_loss, g_logp = ppo_actor_loss(logp_new, logp_old, adv, cfg.clip)
    v_loss = value_loss(v, returns)
    out_grad = np.zeros((len(adv), 3))
    out_grad[:, :ACT_DIM] = actor_weight * g_logp[:, None] * log_prob_grad_mean(dist, raw)
    out_grad[:, ACT_DIM] = cfg.value_coef * 2.0 * (v - returns) / len(adv)
    policy.net.backward(out_grad)
    return a_loss, v_loss, np.exp(logp_new - logp_old)


class RewardScaler:
    """Divide rewards by the running std of the discounted return."""

    def __init__(self, gamma: float, n_envs: int):
        self.gamma = gamma
        self.ret = np.zeros(n_envs)
        self.count = 0
        self.mean = 0.0
        self.m2 = 0.0

    def __call__(self, rewards, dones):
        for t in range(len(rewards)):
            self.ret = self.ret * self.gamma + rewards[t]
            for r in self.ret:
                self.count += 1
                d = r - self.mean
                self.mean += d / self.count
                self.m2 += d * (r - self.mean)
            self.ret[dones[t]] = 0.0
        std = math.sqrt(self.m2 / max(self.count - 1, 1)) if self.count > 1 else 1.0
        return rewards / (std + 1e-8)


def _finite(**values):
    bad = {k: v for k, v in values.items() if not np.isfinite(v)}
    if bad:
        raise NumericalError(f"non-finite training quantities: {bad}")


# ---------------------------------------------------------------------------
# run bookkeeping


class MetricsWriter:
    def __init__(self, path: Path | None, header: list[str]):
        self.path = path
        self.header = header
        self.rows: list[dict] = []
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", newline="") as fh:
                csv.writer(fh).writerow(header)

    def append(self, row: dict):
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow([_fmt(row[k]) for k in self.header])


def _fmt(v):
    if isinstance(v, float):
        return repr(round(v, 9))
    return v


def save_checkpoint(net: nn.Network, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(nn.save_params(net))


def load_policy(path, log_std=(-2.0, -3.2)) -> Policy:
    """Rebuild an actor-critic from a checkpoint file (mode read from the layer table)."""
    blob = Path(path).read_bytes()
    image, _, _ = nn.read_layout(blob)
    net = build_actor_critic("raster" if image else "vector")
    nn.load_params(net, blob)
    return Policy(net, log_std)


@dataclass
class TrainResult:
    policy: Policy
    disc: nn.Network | None
    metrics: list[dict] = field(default_factory=list)
    first_solved_env_steps: int | None = None


def _expert_tensors(dataset: Dataset, obs_mode: str):
    if obs_mode == "raster" and dataset.rasters is None:
        raise ConfigurationError("raster training needs a dataset recorded with rasters")
    return dataset.observations, dataset.actions, (dataset.rasters if obs_mode == "raster" else None)


def train_gail(cfg: TrainConfig, dataset: Dataset, mode: str = "gail", run_dir: Path | None = None,
               route: RouteSpec | None = None, stop_at_reward: float | None = None) -> TrainResult:
    """Wasserstein GAIL with PPO; ``mode="bc_gail"`` blends in the BC loss.

    Per update: rollout under frozen networks, one critic pass over the
    rollout, ``ppo_epochs`` policy epochs, alpha decay, evaluation.
    ``stop_at_reward`` ends training early once the deterministic evaluation
    reaches it.
    """
    if mode not in ("gail", "bc_gail"):
        raise ConfigurationError(f"unknown GAIL mode {mode!r}")
    route = route if route is not None else make_route(cfg.route)
    e_obs, e_act, e_rast = _expert_tensors(dataset, cfg.obs_mode)
    if len(e_obs) == 0:
        raise ConfigurationError("empty expert dataset")
    raster = cfg.obs_mode == "raster"
    root = np.random.SeedSequence(cfg.seed)
    init_seq, disc_seq, batch_seq, eval_seq = root.spawn(4)
    policy = Policy(build_actor_critic(cfg.obs_mode, np.random.default_rng(init_seq)), cfg.log_std)
    disc = build_discriminator(cfg.obs_mode, np.random.default_rng(disc_seq))
    opt = nn.Adam(policy.net, lr=cfg.lr)
    d_opt = nn.Adam(disc, lr=cfg.disc_lr)
    rng = np.random.default_rng(batch_seq)
    eval_rng = np.random.default_rng(eval_seq)
    envs, act_rngs = make_envs(route, cfg.n_envs, cfg.seed, raster)
    lap = expert_lap_steps(route)

    ckpt_dir = run_dir / "checkpoints" if run_dir else None
    writer = MetricsWriter(run_dir / "metrics.csv" if run_dir else None, METRICS_HEADER)
    if ckpt_dir:
        save_checkpoint(policy.net, ckpt_dir / "actor_00000.gdck")
        save_checkpoint(disc, ckpt_dir / "disc_00000.gdck")
    result = TrainResult(policy, disc, writer.rows)
    best = -1.0
    env_steps = 0
    last_obs = None
    reward_norm = RewardScaler(cfg.gamma, cfg.n_envs)
    t0 = time.perf_counter()
    m = cfg.minibatch
    for k in range(cfg.total_updates):
        alpha = alpha_schedule(cfg.alpha0, cfg.alpha_decay, k) if mode == "bc_gail" else 0.0
        batch, last_obs = collect_rollout(policy, envs, act_rngs, cfg.steps_per_actor, disc, last_obs)
        env_steps += len(batch)
        if cfg.normalize_rewards:
            batch.rewards = reward_norm(batch.rewards, batch.dones)
        adv, returns = gae(batch.rewards, batch.values, batch.dones, batch.bootstrap, cfg.gamma, cfg.gae_lambda)

        obs = batch.flat("obs")
        raw = batch.flat("raw_actions")
        rasters = batch.flat("rasters") if raster else None
        logp_old = batch.flat("log_probs")
        adv = standardize(adv.reshape(-1))
        returns = returns.reshape(-1)
        n = len(obs)

        # critic: one pass over the rollout paired with expert minibatches
        x_pol = disc_input(obs, clamp_actions(raw), rasters)
        d_losses, penalties = [], []
        for idx in [i for _ in range(cfg.disc_epochs) for i in np.split(rng.permutation(n), n // m)]:
            e_idx = rng.integers(len(e_obs), size=m)
            x_exp = disc_input(e_obs[e_idx], e_act[e_idx], None if e_rast is None else e_rast[e_idx])
            d_l, pen = disc_loss(disc, x_exp, x_pol[idx], cfg.gp_coef, cfg.eps_fd, rng)
            d_opt.step()
            d_losses.append(d_l)
            penalties.append(pen)

        a_losses, v_losses, b_losses = [], [], []
        for _ in range(cfg.ppo_epochs):
            for idx in np.split(rng.permutation(n), n // m):
                r_mb = None if rasters is None else rasters[idx]
                a_l, v_l, _ = ppo_step(policy, obs[idx], raw[idx], logp_old[idx], adv[idx], returns[idx], cfg,
                                       1.0 - alpha, r_mb)
                a_losses.append(a_l)
                v_losses.append(v_l)
                if mode == "bc_gail":
                    e_idx = rng.integers(len(e_obs), size=m)
                    b_l = bc_step(policy, e_obs[e_idx], e_act[e_idx],
                                  None if e_rast is None else e_rast[e_idx], alpha)
                    b_losses.append(b_l)
                opt.step()

        det = evaluate(policy, route, 1, "deterministic", eval_rng, 2 * lap, record=False)
        sto = evaluate(policy, route, cfg.eval_stochastic_episodes, "stochastic", eval_rng, 2 * lap, record=False)
        row = {
            "update": k + 1,
            "env_steps": env_steps,
            "eval_reward_stoch": sto.mean,
            "eval_reward_det": det.mean,
            "actor_loss": float(np.mean(a_losses)),
            "value_loss": float(np.mean(v_losses)),
            "disc_loss": float(np.mean(d_losses)),
            "bc_loss": float(np.mean(b_losses)) if b_losses else 0.0,
            "alpha": alpha,
            "gp_penalty": float(np.mean(penalties)),
            "wall_clock_s": time.perf_counter() - t0 if cfg.record_wall_clock else 0.0,
        }
        try:
            _finite(**{k2: v for k2, v in row.items() if isinstance(v, float)})
        except NumericalError:
            if run_dir:
                (run_dir / "diagnostic.json").write_text(json.dumps({"row": row, "config": cfg.to_dict()}, indent=2))
            raise
        writer.append(row)
        log.info("update %d steps %d det %.0f stoch %.1f alpha %.3f", k + 1, env_steps, det.mean, sto.mean, alpha)
        if result.first_solved_env_steps is None and stop_at_reward is not None and det.mean >= stop_at_reward:
            result.first_solved_env_steps = env_steps
        if ckpt_dir:
            if (k + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(policy.net, ckpt_dir / f"actor_{k + 1:05d}.gdck")
                save_checkpoint(disc, ckpt_dir / f"disc_{k + 1:05d}.gdck")
            if det.mean > best:
                best = det.mean
                save_checkpoint(policy.net, ckpt_dir / "best_actor.gdck")
        if result.first_solved_env_steps is not None:
            break
    return result


def train_bc(cfg: TrainConfig, dataset: Dataset, run_dir: Path | None = None) -> TrainResult:
    """Behaviour cloning with a 70/30 split; keeps the best-validation parameters."""
    if len(dataset) == 0:
        raise ConfigurationError("empty dataset")
    e_obs, e_act, e_rast = _expert_tensors(dataset, cfg.obs_mode)
    root = np.random.SeedSequence(cfg.seed)
    init_seq, split_seq, batch_seq = root.spawn(3)
    policy = Policy(build_actor_critic(cfg.obs_mode, np.random.default_rng(init_seq)), cfg.log_std)
    opt = nn.Adam(policy.net, lr=cfg.bc_lr)
    rng = np.random.default_rng(batch_seq)
    split_seed = int(split_seq.generate_state(1)[0])
    train_idx, val_idx = dataset.split(cfg.bc_train_fraction, seed=split_seed)
    if len(val_idx) == 0:
        val_idx = train_idx

    def sub(arr, idx):
        return None if arr is None else arr[idx]

    def val_loss():
        dist, _ = policy.evaluate(e_obs[val_idx], sub(e_rast, val_idx))
        return bc_loss(dist, e_act[val_idx])

    best_net = policy.net.copy()
    best_val = val_loss()
    writer = MetricsWriter(run_dir / "metrics.csv" if run_dir else None, BC_METRICS_HEADER)
    t0 = time.perf_counter()
    b = min(cfg.bc_batch, len(train_idx))
    for epoch in range(cfg.bc_epochs):
        order = rng.permutation(train_idx)
        losses = []
        for start in range(0, len(order), b):
            idx = order[start : start + b]
            losses.append(bc_step(policy, e_obs[idx], e_act[idx], sub(e_rast, idx)))
            opt.step()
        vl = val_loss()
        _finite(train_loss=float(np.mean(losses)), val_loss=vl)
        if vl < best_val:
            best_val = vl
            best_net = policy.net.copy()
        writer.append({
            "epoch": epoch + 1,
            "train_loss": float(np.mean(losses)),
            "val_loss": vl,
            "best_val_loss": best_val,
            "wall_clock_s": time.perf_counter() - t0 if cfg.record_wall_clock else 0.0,
        })
    policy.net.load_state(best_net)
    if run_dir:
        save_checkpoint(policy.net, run_dir / "checkpoints" / "best_actor.gdck")
    return TrainResult(policy, None, writer.rows)
