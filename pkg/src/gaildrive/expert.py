"""Scripted PID expert and the demonstration dataset file format."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CollectionError, FormatError
from .sim import (
    DEFAULT_SIM,
    OBS_DIM,
    RASTER_SHAPE,
    Action,
    Command,
    DrivingEnv,
    RouteSpec,
    SimConfig,
    VehicleState,
    nearest_segment,
    plan,
    signed_cross_track,
    to_car_frame,
)

ACT_DIM = 2
RATE_HZ = 10
MAGIC = b"GDRV"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class PidParams:
    kp: float = 0.12
    ki: float = 0.0
    kd: float = 0.05
    k_heading: float = 1.6
    target_speed: float = 5.0
    turn_speed: float = 2.5
    lookahead: float = 5.0
    speed_kp: float = 0.5
    speed_ki: float = 0.05

    def __post_init__(self):
        gains = (self.kp, self.ki, self.kd, self.k_heading, self.speed_kp, self.speed_ki)
        if not all(math.isfinite(g) for g in gains):
            raise ValueError("PID gains must be finite")
        if not 0 < self.turn_speed <= self.target_speed:
            raise ValueError("need 0 < turn_speed <= target_speed")


class ExpertDriver:
    """Path-tracking PID over the dense trajectory.

    Steering combines a PID on the signed cross-track error with a heading
    term towards the point ``lookahead`` metres ahead on the dense path.
    Throttle is drag feed-forward plus a PI loop on speed; the speed set-point
    drops to ``turn_speed`` while the planner command is LEFT or RIGHT.
    """

    def __init__(self, route: RouteSpec, params: PidParams = PidParams(), sim: SimConfig = DEFAULT_SIM):
        self.route = route
        self.params = params
        self.sim = sim
        self.cum_s = np.concatenate([[0.0], np.cumsum(route.seg_len)])
        self.reset()

    def reset(self, progress: int = 0):
        self.ct_integral = 0.0
        self.prev_ct = None
        self.speed_integral = 0.0
        self.progress = progress

    def lookahead_point(self, seg: int, x: float, y: float) -> tuple[float, float]:
        route = self.route
        a = route.dense_points[seg]
        d = route.seg_dir[seg]
        along = float(np.clip(np.dot([x - a[0], y - a[1]], d), 0.0, route.seg_len[seg]))
        s = min(self.cum_s[seg] + along + self.params.lookahead, self.cum_s[-1])
        i = int(np.clip(np.searchsorted(self.cum_s, s, side="right") - 1, 0, route.n_dense - 2))
        u = s - self.cum_s[i]
        return tuple(route.dense_points[i] + u * route.seg_dir[i])

    def act(self, state: VehicleState, command: Command | None = None) -> Action:
        p, dt = self.params, self.sim.dt
        if command is None:
            _, command, self.progress = plan(self.route, state, self.progress)
        seg, _ = nearest_segment(self.route, state.x, state.y)
        ct = signed_cross_track(self.route, seg, state.x, state.y)
        d_ct = 0.0 if self.prev_ct is None else (ct - self.prev_ct) / dt
        self.prev_ct = ct
        self.ct_integral += ct * dt
        lx, ly = to_car_frame(state, self.lookahead_point(seg, state.x, state.y))
        bearing = math.atan2(ly, lx)
        steer = p.kp * ct + p.ki * self.ct_integral + p.kd * d_ct + p.k_heading * bearing

        v_ref = p.turn_speed if command in (Command.LEFT, Command.RIGHT) else p.target_speed
        err = v_ref - state.speed
        self.speed_integral = float(np.clip(self.speed_integral + err * dt, -2.0, 2.0))
        throttle = self.sim.drag * v_ref / self.sim.max_accel + p.speed_kp * err + p.speed_ki * self.speed_integral
        return Action(float(np.clip(steer, -1.0, 1.0)), float(np.clip(throttle, 0.0, 1.0)))


def expert_action(state: VehicleState, route: RouteSpec, params: PidParams = PidParams(),
                  command: Command = Command.LANE_FOLLOW) -> Action:
    """Memoryless single-step expert action (no integral or derivative history)."""
    return ExpertDriver(route, params).act(state, command)


# ---------------------------------------------------------------------------
# dataset


@dataclass
class Dataset:
    route_kind: str
    observations: np.ndarray
    actions: np.ndarray
    boundaries: list[int] = field(default_factory=list)
    rasters: np.ndarray | None = None
    rate_hz: int = RATE_HZ

    def __post_init__(self):
        self.observations = np.asarray(self.observations, np.float32).reshape(-1, OBS_DIM)
        self.actions = np.asarray(self.actions, np.float32).reshape(-1, ACT_DIM)
        if len(self.observations) != len(self.actions):
            raise ValueError("observation/action count mismatch")
        if self.rasters is not None:
            self.rasters = np.asarray(self.rasters, np.float32).reshape((-1,) + RASTER_SHAPE)

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def manifest(self) -> dict:
        return {
            "route_kind": self.route_kind,
            "count": len(self),
            "obs_dim": OBS_DIM,
            "act_dim": ACT_DIM,
            "raster": self.rasters is not None,
            "rate_hz": self.rate_hz,
            "boundaries": list(self.boundaries),
        }

    def trajectories(self):
        """Yield ``(start, stop)`` record ranges, one per recorded lap."""
        edges = list(self.boundaries) + [len(self)]
        return list(zip(edges[:-1], edges[1:]))

    def split(self, train_fraction: float = 0.7, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """Per-sample seeded partition into train and validation indices."""
        order = np.random.default_rng(seed).permutation(len(self))
        n_train = int(round(train_fraction * len(self)))
        return np.sort(order[:n_train]), np.sort(order[n_train:])

    def sample_batch(self, m: int, rng: np.random.Generator, indices: np.ndarray | None = None):
        """Uniform sample with replacement, optionally restricted to ``indices``."""
        pool = np.arange(len(self)) if indices is None else np.asarray(indices)
        pick = pool[rng.integers(len(pool), size=m)]
        rast = None if self.rasters is None else self.rasters[pick]
        return self.observations[pick], self.actions[pick], rast


def write_dataset(ds: Dataset, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dataset_bytes(ds))


def dataset_bytes(ds: Dataset) -> bytes:
    manifest = json.dumps(ds.manifest, sort_keys=True).encode()
    parts = [ds.observations.astype("<f4")]
    if ds.rasters is not None:
        parts.append(ds.rasters.reshape(len(ds), -1).astype("<f4"))
    parts.append(ds.actions.astype("<f4"))
    records = np.concatenate(parts, axis=1) if len(ds) else np.zeros((0, 0), "<f4")
    return b"".join(
        [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(manifest)), manifest, records.tobytes()]
    )


def parse_dataset(blob: bytes) -> Dataset:
    if len(blob) < 10 or blob[:4] != MAGIC:
        raise FormatError("not a dataset file (bad magic)")
    version, mlen = struct.unpack_from("<HI", blob, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    if len(blob) < 10 + mlen:
        raise FormatError("dataset manifest truncated")
    try:
        manifest = json.loads(blob[10 : 10 + mlen])
    except ValueError as exc:
        raise FormatError(f"bad dataset manifest: {exc}") from None
    count = manifest["count"]
    width = manifest["obs_dim"] + manifest["act_dim"]
    if manifest["raster"]:
        width += int(np.prod(RASTER_SHAPE))
    body = blob[10 + mlen :]
    if len(body) != 4 * width * count:
        raise FormatError(f"dataset body has {len(body)} bytes, expected {4 * width * count}")
    rec = np.frombuffer(body, dtype="<f4").reshape(count, width)
    obs = rec[:, :OBS_DIM]
    rasters = rec[:, OBS_DIM:-ACT_DIM] if manifest["raster"] else None
    return Dataset(
        manifest["route_kind"],
        obs.copy(),
        rec[:, -ACT_DIM:].copy(),
        manifest["boundaries"],
        None if rasters is None else rasters.copy(),
        manifest["rate_hz"],
    )


def read_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        return parse_dataset(fh.read())


def run_expert_lap(route: RouteSpec, params: PidParams = PidParams(), raster: bool = False,
                   max_steps: int = 20000, sim: SimConfig = DEFAULT_SIM):
    """Drive one lap from the route start; returns (obs, actions, rasters, result)."""
    env = DrivingEnv(route, np.random.default_rng(0), raster=raster, sim=sim)
    driver = ExpertDriver(route, params, sim)
    obs = env.reset(start=True)
    observations, actions, rasters = [], [], []
    result = None
    for _ in range(max_steps):
        command = Command(int(np.argmax(obs.command_onehot)))
        action = driver.act(env.state, command)
        observations.append(obs.vector)
        actions.append((action.steer, action.throttle))
        if raster:
            rasters.append(obs.raster)
        result = env.step(action)
        obs = result.observation
        if result.done:
            break
    return observations, actions, rasters, result


def collect(route: RouteSpec, params: PidParams = PidParams(), n_trajectories: int = 10,
            out=None, raster: bool = False, sim: SimConfig = DEFAULT_SIM) -> Dataset:
    """Record ``n_trajectories`` expert laps at 10 Hz.

    The simulator is deterministic, so every lap is identical; the repetition
    mirrors how demonstrations are gathered and sets the dataset size.
    """
    all_obs, all_act, all_rast, bounds = [], [], [], []
    for _ in range(n_trajectories):
        obs, act, rast, result = run_expert_lap(route, params, raster, sim=sim)
        if result is None or not result.route_complete:
            kind = None if result is None else result.infraction
            raise CollectionError(f"expert failed to complete the {route.kind} route ({kind})")
        bounds.append(sum(len(o) for o in all_obs))
        all_obs.append(np.array(obs))
        all_act.append(np.array(act))
        if raster:
            all_rast.append(np.array(rast))
    if all_obs:
        observations, actions = np.concatenate(all_obs), np.concatenate(all_act)
    else:
        observations, actions = np.zeros((0, OBS_DIM)), np.zeros((0, ACT_DIM))
    rasters = None
    if raster:
        rasters = np.concatenate(all_rast) if all_rast else np.zeros((0,) + RASTER_SHAPE)
    ds = Dataset(route.kind, observations, actions, bounds, rasters)
    if out is not None:
        write_dataset(ds, out)
    return ds
