"""Actor-critic and Wasserstein critic networks, Gaussian policy math, critic losses."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ConfigurationError
from .sim import OBS_DIM, RASTER_SHAPE, Action

ACT_DIM = 2
HIDDEN = 256
LOG_2PI = math.log(2.0 * math.pi)
DEFAULT_LOG_STD = (-2.0, -3.2)
OBS_MODES = ("vector", "raster")

# fixed per-feature input scaling: speed, target x, target y, command one-hot
FEATURE_SCALE = np.array([0.2, 0.05, 0.25, 1, 1, 1, 1, 1, 1], dtype=np.float32)


def _trunk(obs_mode: str, side_dim: int, n_out: int):
    if obs_mode == "vector":
        specs = [nn.dense(side_dim, HIDDEN), nn.leaky_relu(), nn.dense(HIDDEN, n_out)]
        return specs, None
    if obs_mode != "raster":
        raise ConfigurationError(f"obs_mode must be one of {OBS_MODES}")
    specs, c, size = [], RASTER_SHAPE[0], RASTER_SHAPE[1]
    for ch in nn.CONV_CHANNELS:
        specs += [nn.conv2d(c, ch), nn.leaky_relu()]
        c, size = ch, nn.conv_output_size(size)
    specs += [
        nn.flatten(),
        nn.concat(side_dim),
        nn.dense(c * size * size + side_dim, HIDDEN),
        nn.leaky_relu(),
        nn.dense(HIDDEN, n_out),
    ]
    return specs, RASTER_SHAPE


def build_actor_critic(obs_mode: str = "vector", rng: np.random.Generator | None = None) -> nn.Network:
    """Outputs per row: ``[steer_mean (tanh), throttle_mean (sigmoid), value (linear)]``."""
    specs, image = _trunk(obs_mode, OBS_DIM, 3)
    specs += [nn.tanh(0, 1), nn.sigmoid(1, 2)]
    net = nn.Network(specs, image, OBS_DIM)
    return net.init(rng if rng is not None else np.random.default_rng(0))


def build_discriminator(obs_mode: str = "vector", rng: np.random.Generator | None = None,
                        zero_last: bool = True) -> nn.Network:
    """Unbounded linear score over ``(observation, action)``."""
    specs, image = _trunk(obs_mode, OBS_DIM + ACT_DIM, 1)
    net = nn.Network(specs, image, OBS_DIM + ACT_DIM)
    net.init(rng if rng is not None else np.random.default_rng(0))
    if zero_last:
        for p in net.params[-1]:
            p.fill(0)
    return net


def obs_mode_of(net: nn.Network) -> str:
    return "raster" if net.image_shape else "vector"


def policy_input(obs_vec, raster=None) -> np.ndarray:
    x = np.asarray(obs_vec, np.float32).reshape(-1, OBS_DIM) * FEATURE_SCALE
    if raster is None:
        return x
    r = np.asarray(raster, np.float32).reshape(len(x), -1)
    return np.concatenate([r, x], axis=1)


def disc_input(obs_vec, actions, raster=None) -> np.ndarray:
    a = np.asarray(actions, np.float32).reshape(-1, ACT_DIM)
    return np.concatenate([policy_input(obs_vec, raster), a], axis=1)


def clamp_actions(raw) -> np.ndarray:
    raw = np.asarray(raw)
    return np.stack([np.clip(raw[..., 0], -1.0, 1.0), np.clip(raw[..., 1], 0.0, 1.0)], axis=-1)


# ---------------------------------------------------------------------------
# Gaussian policy


@dataclass
class PolicyDist:
    mean: np.ndarray
    log_std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, np.float64)
        self.log_std = np.asarray(self.log_std, np.float64)

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)


def log_prob(dist: PolicyDist, raw_action) -> np.ndarray:
    """Diagonal Gaussian log density summed over the two action dims."""
    z = (np.asarray(raw_action, np.float64) - dist.mean) / dist.std
    return np.sum(-0.5 * z * z - dist.log_std - 0.5 * LOG_2PI, axis=-1)


def log_prob_grad_mean(dist: PolicyDist, raw_action) -> np.ndarray:
    """d log_prob / d mean, per sample and dim."""
    return (np.asarray(raw_action, np.float64) - dist.mean) / dist.std**2


def entropy(dist: PolicyDist) -> float:
    return float(np.sum(dist.log_std + 0.5 * (LOG_2PI + 1.0)))


def sample_action(dist: PolicyDist, rng: np.random.Generator):
    z = rng.standard_normal(dist.mean.shape)
    raw = dist.mean + dist.std * z
    return raw, log_prob(dist, raw)


def deterministic_action(dist: PolicyDist) -> np.ndarray:
    return dist.mean.copy()


class Policy:
    """Actor-critic network plus the fixed log standard deviation."""

    def __init__(self, net: nn.Network, log_std=DEFAULT_LOG_STD):
        self.net = net
        self.log_std = np.asarray(log_std, np.float64)

    @property
    def obs_mode(self) -> str:
        return obs_mode_of(self.net)

    def evaluate(self, obs_vec, raster=None, cache: bool = False):
        """Return ``(PolicyDist, values)`` for a batch of observations."""
        out = self.net.forward(policy_input(obs_vec, raster), cache=cache)
        return PolicyDist(out[:, :ACT_DIM], self.log_std), out[:, ACT_DIM].astype(np.float64)

    def act(self, obs, rng: np.random.Generator | None = None, deterministic: bool = False) -> Action:
        """Single-observation convenience used by evaluation."""
        dist, _ = self.evaluate(obs.vector, obs.raster)
        raw = deterministic_action(dist) if deterministic else sample_action(dist, rng)[0]
        return Action(float(raw[0, 0]), float(raw[0, 1]))


# ---------------------------------------------------------------------------
# Wasserstein critic


def disc_reward(disc: nn.Network, x) -> np.ndarray:
    """Critic score per row; callers pass a frozen snapshot of the critic."""
    return np.asarray(disc(x)[:, 0], np.float64)


def directional_slope(disc: nn.Network, x_hat, direction, eps_fd: float) -> np.ndarray:
    plus = disc(x_hat + eps_fd * direction)[:, 0].astype(np.float64)
    minus = disc(x_hat - eps_fd * direction)[:, 0].astype(np.float64)
    return (plus - minus) / (2.0 * eps_fd)


def disc_loss(disc: nn.Network, expert_x, policy_x, gp_coef: float = 10.0, eps_fd: float = 1e-3,
              rng: np.random.Generator | None = None, backward: bool = True):
    """Critic loss ``mean D(policy) - mean D(expert) + gp_coef * penalty``.

    The penalty uses a central difference of the critic along the unit
    direction from the expert sample to the policy sample, evaluated at a
    random interpolate.  With ``backward=True`` the gradient is accumulated
    into ``disc.grads``.  Returns ``(loss, penalty)``.
    """
    xe = np.asarray(expert_x, disc.dtype)
    xp = np.asarray(policy_x, disc.dtype)
    if xe.shape != xp.shape or xe.ndim != 2 or xe.shape[1] != disc.input_dim or len(xe) == 0:
        raise ConfigurationError(f"critic batches must both be (B, {disc.input_dim})")
    rng = rng if rng is not None else np.random.default_rng()
    b = len(xe)
    u = rng.random((b, 1)).astype(disc.dtype)
    x_hat = u * xe + (1 - u) * xp
    diff = xp - xe
    direction = diff / np.maximum(np.linalg.norm(diff, axis=1, keepdims=True), 1e-8)
    stacked = np.concatenate([xp, xe, x_hat + eps_fd * direction, x_hat - eps_fd * direction])
    out = disc.forward(stacked, cache=backward)[:, 0].astype(np.float64)
    o_p, o_e, o_plus, o_minus = out[:b], out[b : 2 * b], out[2 * b : 3 * b], out[3 * b :]
    slope = (o_plus - o_minus) / (2.0 * eps_fd)
    penalty = float(np.mean((np.abs(slope) - 1.0) ** 2))
    loss = float(o_p.mean() - o_e.mean() + gp_coef * penalty)
    if backward:
        d_slope = gp_coef * 2.0 * (np.abs(slope) - 1.0) * np.sign(slope) / b
        grad = np.concatenate(
            [np.full(b, 1.0 / b), np.full(b, -1.0 / b), d_slope / (2 * eps_fd), -d_slope / (2 * eps_fd)]
        )
        disc.backward(grad[:, None])
    return loss, penalty
