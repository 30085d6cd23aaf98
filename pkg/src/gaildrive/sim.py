"""Deterministic 2-D kinematic driving world.

Coordinates follow the left-handed convention of game-engine simulators:
``+x`` east, ``+y`` to the right of ``+x`` (south), heading measured from
``+x`` towards ``+y``.  A positive steer therefore turns the car to the right.
The car frame has ``x`` forward and ``y`` to the right.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, StateError

OBS_DIM = 9
COMMAND_SLOTS = 6
RASTER_SHAPE = (3, 32, 32)
VIEW_OFFSETS = (-math.radians(30.0), 0.0, math.radians(30.0))


class Command(enum.IntEnum):
    LANE_FOLLOW = 0
    LEFT = 1
    RIGHT = 2


class Infraction(str, enum.Enum):
    LANE_INVASION = "LANE_INVASION"
    STAGNATION = "STAGNATION"


@dataclass(frozen=True)
class SimConfig:
    wheelbase: float = 2.5
    max_steer: float = math.radians(35.0)
    max_accel: float = 3.0
    drag: float = 0.3
    dt: float = 0.1
    lane_half_width: float = 1.75
    crossing_radius: float = 2.0
    stagnation_speed: float = 0.1
    stagnation_steps: int = 50
    turn_radius: float = 10.0

    @property
    def meters_per_pixel(self) -> float:
        # half-width spans exactly 4 pixels, so no pixel centre sits on the lane edge
        return self.lane_half_width / 4.0


DEFAULT_SIM = SimConfig()


@dataclass(frozen=True)
class VehicleState:
    x: float = 0.0
    y: float = 0.0
    heading: float = 0.0
    speed: float = 0.0


@dataclass(frozen=True)
class Action:
    steer: float = 0.0
    throttle: float = 0.0

    def clamped(self) -> "Action":
        return Action(min(max(self.steer, -1.0), 1.0), min(max(self.throttle, 0.0), 1.0))


@dataclass
class Observation:
    vector: np.ndarray
    raster: np.ndarray | None = None

    @property
    def speed(self) -> float:
        return float(self.vector[0])

    @property
    def target(self) -> np.ndarray:
        return self.vector[1:3]

    @property
    def command_onehot(self) -> np.ndarray:
        return self.vector[3:]


@dataclass
class StepResult:
    observation: Observation
    infraction: Infraction | None
    route_complete: bool
    dense_crossed_total: int

    @property
    def done(self) -> bool:
        return self.infraction is not None or self.route_complete


def wrap_angle(a: float) -> float:
    """Map an angle into (-pi, pi]."""
    if -math.pi < a <= math.pi:
        return a
    a = math.fmod(a + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


# ---------------------------------------------------------------------------
# routes


@dataclass
class RouteSpec:
    kind: str
    dense_points: np.ndarray
    dense_headings: np.ndarray
    sparse_points: np.ndarray
    sparse_dense_index: np.ndarray
    commands: list[Command]
    lane_half_width: float = DEFAULT_SIM.lane_half_width
    crossing_radius: float = DEFAULT_SIM.crossing_radius
    length: float = 0.0
    seg_dir: np.ndarray = field(init=False, repr=False)
    seg_len: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        d = np.diff(self.dense_points, axis=0)
        self.seg_len = np.hypot(d[:, 0], d[:, 1])
        self.seg_dir = d / self.seg_len[:, None]
        # plain lists are much faster than numpy for the per-step scalar loops
        self._pts = self.dense_points.tolist()
        self._dirs = self.seg_dir.tolist()
        self._lens = self.seg_len.tolist()

    @property
    def n_dense(self) -> int:
        return len(self.dense_points)

    @property
    def n_sparse(self) -> int:
        return len(self.sparse_points)


ROUTE_KINDS = ("short", "medium", "long")

# (first straight, turn directions, total length, dense count, sparse count)
_ROUTE_LAYOUTS = {
    "short": (40.0, (Command.LEFT,), 100.0, 80, 4),
    # reduced long route: 1000 m with two turns, same dense spacing as "long"
    "medium": (40.0, (Command.LEFT, Command.RIGHT), 1000.0, 304, 10),
    "long": (40.0, (Command.LEFT, Command.LEFT, Command.RIGHT, Command.RIGHT), 2500.0, 760, 20),
}


def _segments(kind, seed, radius):
    first, turns, total, n_dense, n_sparse = _ROUTE_LAYOUTS[kind]
    arc = 0.5 * math.pi * radius
    rest = total - first - len(turns) * arc
    if kind == "short":
        weights = np.ones(1)
    else:
        weights = np.ones(len(turns))
        if seed:
            weights = np.random.default_rng(seed).uniform(0.8, 1.2, size=len(turns))
    lengths = [first] + list(rest * weights / weights.sum())
    return lengths, turns, n_dense, n_sparse


def make_route(kind: str = "short", seed: int = 0, sim: SimConfig = DEFAULT_SIM) -> RouteSpec:
    """Build a route of straights joined by 90 degree turns.

    The route starts at the origin heading north (``-y``).  ``seed=0`` gives the
    canonical layout; other seeds jitter how the straight length after the
    first turn is shared among the later straights.
    """
    if kind not in _ROUTE_LAYOUTS:
        raise ConfigurationError(f"unknown route kind {kind!r}; choose from {ROUTE_KINDS}")
    straights, turns, n_dense, n_sparse = _segments(kind, seed, sim.turn_radius)
    r = sim.turn_radius
    arc = 0.5 * math.pi * r

    # piecewise geometry: (start_s, length, kind, start pose, turn sign)
    pieces = []
    x, y, th, s = 0.0, 0.0, -0.5 * math.pi, 0.0
    turn_spans = []
    for i, length in enumerate(straights):
        pieces.append((s, length, "S", x, y, th, 0))
        x += length * math.cos(th)
        y += length * math.sin(th)
        s += length
        if i < len(turns):
            sign = -1 if turns[i] == Command.LEFT else 1
            pieces.append((s, arc, "T", x, y, th, sign))
            turn_spans.append((s, s + arc, turns[i]))
            # centre of the turn circle lies to the turning side
            cx = x + r * math.cos(th + sign * 0.5 * math.pi)
            cy = y + r * math.sin(th + sign * 0.5 * math.pi)
            th2 = th + sign * 0.5 * math.pi
            x = cx + r * math.cos(th2 - sign * 0.5 * math.pi)
            y = cy + r * math.sin(th2 - sign * 0.5 * math.pi)
            th = th2
            s += arc
    total = s

    def pose(sq):
        for s0, length, kind_, px, py, pth, sign in pieces:
            if sq <= s0 + length + 1e-9:
                u = min(max(sq - s0, 0.0), length)
                if kind_ == "S":
                    return px + u * math.cos(pth), py + u * math.sin(pth), pth
                cx = px + r * math.cos(pth + sign * 0.5 * math.pi)
                cy = py + r * math.sin(pth + sign * 0.5 * math.pi)
                phi = u / r
                a0 = pth - sign * 0.5 * math.pi
                a = a0 + sign * phi
                return cx + r * math.cos(a), cy + r * math.sin(a), pth + sign * phi
        raise AssertionError("arc length beyond route")

    dense_s = np.linspace(0.0, total, n_dense)
    poses = [pose(sq) for sq in dense_s]
    dense = np.array([(p[0], p[1]) for p in poses])
    headings = np.array([wrap_angle(p[2]) for p in poses])

    # sparse targets: entry, apex and exit of every turn, the route end, and
    # evenly spaced points on the straights after the first one
    sparse = []
    for a, b, cmd in turn_spans:
        sparse += [(a, cmd), (0.5 * (a + b), cmd), (b, Command.LANE_FOLLOW)]
    sparse.append((total, Command.LANE_FOLLOW))
    n_extra = n_sparse - len(sparse)
    if n_extra < 0:
        raise ConfigurationError("too few sparse points for the turns")
    if n_extra:
        later = [(b, straights[i + 1]) for i, (_, b, _) in enumerate(turn_spans)]
        lens = np.array([ln for _, ln in later])
        share = n_extra * lens / lens.sum()
        counts = np.floor(share).astype(int)
        for j in np.argsort(-(share - counts))[: n_extra - counts.sum()]:
            counts[j] += 1
        # every straight already ends at a sparse point (turn entry or route end)
        for (start, ln), c in zip(later, counts):
            for k in range(1, c + 1):
                sparse.append((start + ln * k / (c + 1), Command.LANE_FOLLOW))
    sparse.sort(key=lambda t: t[0])
    sparse_idx = np.array([int(round(sq / total * (n_dense - 1))) for sq, _ in sparse])
    if len(set(sparse_idx.tolist())) != len(sparse_idx):
        raise ConfigurationError("sparse points collapse onto the same dense point")
    return RouteSpec(
        kind=kind,
        dense_points=dense,
        dense_headings=headings,
        sparse_points=dense[sparse_idx].copy(),
        sparse_dense_index=sparse_idx,
        commands=[c for _, c in sparse],
        lane_half_width=sim.lane_half_width,
        crossing_radius=sim.crossing_radius,
        length=total,
    )


def _point_segment(px, py, ax, ay, dx, dy, ln):
    """Distance, along-segment fraction and signed side of a point vs a segment.

    Side is positive when the point lies to the left of the travel direction.
    """
    rx, ry = px - ax, py - ay
    t = (rx * dx + ry * dy) / ln
    t = 0.0 if t < 0.0 else (1.0 if t > 1.0 else t)
    qx, qy = rx - t * ln * dx, ry - t * ln * dy
    return math.hypot(qx, qy), t, (rx * dy - ry * dx)


def nearest_segment(route: RouteSpec, x: float, y: float) -> tuple[int, float]:
    """Index of the closest dense-polyline segment and the distance to it."""
    a = route.dense_points[:-1]
    rel = np.array([x, y]) - a
    t = np.clip(np.einsum("ij,ij->i", rel, route.seg_dir) / route.seg_len, 0.0, 1.0)
    q = rel - (t * route.seg_len)[:, None] * route.seg_dir
    dist = np.hypot(q[:, 0], q[:, 1])
    i = int(np.argmin(dist))
    return i, float(dist[i])


def lateral_distance(route: RouteSpec, x: float, y: float) -> float:
    return nearest_segment(route, x, y)[1]


def signed_cross_track(route: RouteSpec, seg: int, x: float, y: float) -> float:
    """Cross-track error on segment ``seg``; positive when the car is left of the path."""
    ax, ay = route._pts[seg]
    dx, dy = route._dirs[seg]
    d, _, side = _point_segment(x, y, ax, ay, dx, dy, route._lens[seg])
    # with +y pointing right of +x, "left of the travel direction" has side > 0
    return d if side > 0 else -d


# ---------------------------------------------------------------------------
# dynamics, infractions, planner


def step_dynamics(state: VehicleState, action: Action, dt: float = 0.1, sim: SimConfig = DEFAULT_SIM) -> VehicleState:
    """Kinematic bicycle update (explicit Euler)."""
    v, th = state.speed, state.heading
    x = state.x + v * math.cos(th) * dt
    y = state.y + v * math.sin(th) * dt
    th = wrap_angle(th + v / sim.wheelbase * math.tan(sim.max_steer * action.steer) * dt)
    v = max(v + (sim.max_accel * action.throttle - sim.drag * v) * dt, 0.0)
    return VehicleState(x, y, th, v)


def detect_infraction(
    state: VehicleState, route: RouteSpec, still_steps: int = 0, sim: SimConfig = DEFAULT_SIM
) -> Infraction | None:
    """Lane invasion beyond the half-width, or ``still_steps`` slow steps in a row."""
    if lateral_distance(route, state.x, state.y) > route.lane_half_width:
        return Infraction.LANE_INVASION
    if still_steps >= sim.stagnation_steps:
        return Infraction.STAGNATION
    return None


def to_car_frame(state: VehicleState, point) -> tuple[float, float]:
    dx, dy = point[0] - state.x, point[1] - state.y
    c, s = math.cos(state.heading), math.sin(state.heading)
    return c * dx + s * dy, -s * dx + c * dy


def plan(route: RouteSpec, state: VehicleState, progress: int) -> tuple[tuple[float, float], Command, int]:
    """Advance the sparse target index and express the target in the car frame."""
    r2 = route.crossing_radius**2
    pts = route.sparse_points
    last = route.n_sparse - 1
    while progress < last:
        dx, dy = pts[progress, 0] - state.x, pts[progress, 1] - state.y
        if dx * dx + dy * dy >= r2:
            break
        progress += 1
    return to_car_frame(state, pts[progress]), route.commands[progress], progress


def observation_vector(speed: float, target, command: Command) -> np.ndarray:
    vec = np.zeros(OBS_DIM)
    vec[0] = speed
    vec[1], vec[2] = target
    vec[3 + int(command)] = 1.0
    return vec


def render_raster(state: VehicleState, route: RouteSpec, sim: SimConfig = DEFAULT_SIM) -> np.ndarray:
    """Three top-down crops ahead of the car, at -30, 0 and +30 degrees of yaw.

    Lane surface is 1.0, pixels holding a dense waypoint 0.5, off-road 0.0.
    Row 0 is the far edge of the crop; columns run left to right.
    """
    _, h, w = RASTER_SHAPE
    mpp = sim.meters_per_pixel
    fwd = (h / 2 - (np.arange(h) + 0.5)) * mpp
    lat = ((np.arange(w) + 0.5) - w / 2) * mpp
    ff, ll = np.meshgrid(fwd, lat, indexing="ij")
    half_extent = 0.5 * h * mpp
    reach = 2.0 * half_extent * math.sqrt(2.0) + route.seg_len.max()
    near = np.hypot(*(route.dense_points - [state.x, state.y]).T) < reach
    seg_near = np.flatnonzero(near[:-1] | near[1:])
    out = np.zeros(RASTER_SHAPE)
    if seg_near.size == 0:
        return out
    a = route.dense_points[seg_near]
    sd = route.seg_dir[seg_near]
    sl = route.seg_len[seg_near]
    dense_near = route.dense_points[near]
    for k, off in enumerate(VIEW_OFFSETS):
        phi = state.heading + off
        c, s = math.cos(phi), math.sin(phi)
        cx, cy = state.x + half_extent * c, state.y + half_extent * s
        px = cx + ff * c - ll * s
        py = cy + ff * s + ll * c
        pts = np.stack([px.ravel(), py.ravel()], axis=1)
        rel = pts[:, None, :] - a[None, :, :]
        t = np.clip(np.einsum("pkj,kj->pk", rel, sd) / sl, 0.0, 1.0)
        q = rel - (t * sl)[..., None] * sd
        dist = np.sqrt((q**2).sum(-1)).min(axis=1)
        img = np.where(dist <= route.lane_half_width, 1.0, 0.0).reshape(h, w)
        # mark the pixel containing each nearby dense point
        rel_d = dense_near - [cx, cy]
        f = rel_d[:, 0] * c + rel_d[:, 1] * s
        lt = -rel_d[:, 0] * s + rel_d[:, 1] * c
        rows = np.floor(h / 2 - f / mpp).astype(int)
        cols = np.floor(lt / mpp + w / 2).astype(int)
        ok = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
        img[rows[ok], cols[ok]] = 0.5
        out[k] = img
    return out


# ---------------------------------------------------------------------------
# environment


class DrivingEnv:
    """One route-following episode stream with the infraction restart protocol.

    After an infraction the next :meth:`reset` restarts at the dense point
    just behind the infraction with probability 0.9, otherwise at a uniformly
    random dense point.  Fresh environments and completed routes restart at
    the route start.
    """

    RESTART_RANDOM_P = 0.1

    def __init__(self, route: RouteSpec, rng: np.random.Generator | None = None, raster: bool = False,
                 sim: SimConfig = DEFAULT_SIM):
        self.route = route
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.raster = raster
        self.sim = sim
        self._terminal = True
        self._needs_start = True
        self._last_infraction_index = 0
        self.x = self.y = self.heading = self.speed = 0.0

    @property
    def state(self) -> VehicleState:
        return VehicleState(self.x, self.y, self.heading, self.speed)

    @property
    def terminal(self) -> bool:
        return self._terminal

    def _place(self, index: int):
        px, py = self.route._pts[index]
        self.x, self.y = px, py
        self.heading = float(self.route.dense_headings[index])
        self.speed = 0.0
        self.seg = min(index, self.route.n_dense - 2)
        self.next_dense = index
        self.dense_crossed = index
        self.still = 0
        later = np.flatnonzero(self.route.sparse_dense_index > index)
        self.progress = int(later[0]) if later.size else self.route.n_sparse - 1
        self._terminal = False

    def restart_index(self, u: float, rng: np.random.Generator) -> int:
        """Restart point after an infraction given a uniform draw ``u``."""
        if u < self.RESTART_RANDOM_P:
            return int(rng.integers(self.route.n_dense))
        return self._last_infraction_index

    def reset(self, rng: np.random.Generator | None = None, start: bool = False) -> Observation:
        rng = rng if rng is not None else self.rng
        if start or self._needs_start:
            index = 0
        else:
            index = self.restart_index(float(rng.random()), rng)
        self._place(index)
        self._needs_start = False
        return self._observe()

    def _observe(self) -> Observation:
        target, cmd, self.progress = plan(self.route, self.state, self.progress)
        vec = observation_vector(self.speed, target, cmd)
        raster = render_raster(self.state, self.route, self.sim) if self.raster else None
        return Observation(vec, raster)

    def _update_seg(self):
        route = self.route
        best, best_d, best_side = self.seg, math.inf, 0.0
        lo, hi = max(self.seg - 2, 0), min(self.seg + 5, route.n_dense - 1)
        pts, dirs, lens = route._pts, route._dirs, route._lens
        for i in range(lo, hi):
            ax, ay = pts[i]
            dx, dy = dirs[i]
            d, _, side = _point_segment(self.x, self.y, ax, ay, dx, dy, lens[i])
            if d < best_d:
                best, best_d, best_side = i, d, side
        self.seg = best
        return best_d

    def step(self, action: Action) -> StepResult:
        if self._terminal:
            raise StateError("step() on a terminal environment; call reset()")
        a = action.clamped()
        sim = self.sim
        dt = sim.dt
        v, th = self.speed, self.heading
        self.x += v * math.cos(th) * dt
        self.y += v * math.sin(th) * dt
        self.heading = wrap_angle(th + v / sim.wheelbase * math.tan(sim.max_steer * a.steer) * dt)
        self.speed = max(v + (sim.max_accel * a.throttle - sim.drag * v) * dt, 0.0)

        route = self.route
        r2 = route.crossing_radius**2
        pts = route._pts
        n = route.n_dense
        # a point is only "passed" by a moving car; the start pose already
        # sits within the crossing radius of the first couple of points
        while v > 0.0 and self.next_dense < n:
            px, py = pts[self.next_dense]
            if (px - self.x) ** 2 + (py - self.y) ** 2 >= r2:
                break
            self.next_dense += 1
            self.dense_crossed += 1

        lateral = self._update_seg()
        self.still = self.still + 1 if self.speed < sim.stagnation_speed else 0
        infraction = None
        if lateral > route.lane_half_width:
            infraction = Infraction.LANE_INVASION
        elif self.still >= sim.stagnation_steps:
            infraction = Infraction.STAGNATION
        complete = self.next_dense >= n
        if complete:
            infraction = None
        obs = self._observe()
        if infraction is not None:
            self._last_infraction_index = self.seg
            self._terminal = True
        if complete:
            self._terminal = True
            self._needs_start = True
        return StepResult(obs, infraction, complete, self.dense_crossed)


def dump_route(route: RouteSpec, path) -> None:
    """Write route geometry as ``x y [command]`` lines for plotting."""
    with open(path, "w") as fh:
        fh.write(f"# route {route.kind} dense {route.n_dense} sparse {route.n_sparse}\n")
        fh.write("# dense\n")
        for x, y in route.dense_points:
            fh.write(f"{x:.6f} {y:.6f}\n")
        fh.write("# sparse\n")
        for (x, y), c in zip(route.sparse_points, route.commands):
            fh.write(f"{x:.6f} {y:.6f} {c.name}\n")
