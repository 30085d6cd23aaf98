"""End-to-end acceptance checks.

Each test prints one ``[criterion N] PASS|FAIL`` line straight to the
terminal (bypassing capture) so the summary shows up in a plain
``pytest -v`` log.  The training criteria are slow: expect several minutes
for the whole module.
"""

import math
import time

import numpy as np
import pytest

from gaildrive import nn
from gaildrive.agent import (
    PolicyDist,
    build_actor_critic,
    build_discriminator,
    directional_slope,
    disc_loss,
    entropy,
    log_prob,
)
from gaildrive.errors import FormatError
from gaildrive.evaluate import evaluate
from gaildrive.expert import ExpertDriver, collect, dataset_bytes, parse_dataset
from gaildrive.sim import make_route
from gaildrive.train import (
    TrainConfig,
    alpha_schedule,
    combined_actor_loss,
    gae,
    ppo_actor_loss,
    train_bc,
    train_gail,
)


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}", flush=True)


@pytest.fixture(scope="module")
def short():
    return make_route("short")


@pytest.fixture(scope="module")
def short_ds(short):
    return collect(short, n_trajectories=10)


@pytest.fixture(scope="module")
def long_route():
    return make_route("long")


@pytest.fixture(scope="module")
def long_ds(long_route):
    return collect(long_route, n_trajectories=10)


# -- 1: gradients ---------------------------------------------------------------


def layer_nets():
    return {
        "dense": nn.Network([nn.dense(5, 4)], side_dim=5),
        "conv2d": nn.Network([nn.conv2d(2, 3), nn.flatten(), nn.dense(48, 2)], image_shape=(2, 8, 8)),
        "leaky_relu": nn.Network([nn.dense(5, 6), nn.leaky_relu(), nn.dense(6, 3)], side_dim=5),
        "tanh": nn.Network([nn.dense(5, 3), nn.tanh(0, 2)], side_dim=5),
        "sigmoid": nn.Network([nn.dense(5, 3), nn.sigmoid(1, 3)], side_dim=5),
        "flatten": nn.Network([nn.conv2d(1, 2), nn.flatten(), nn.dense(32, 2)], image_shape=(1, 8, 8)),
        "concat": nn.Network(
            [nn.conv2d(1, 2), nn.leaky_relu(), nn.flatten(), nn.concat(3), nn.dense(35, 2)],
            image_shape=(1, 8, 8),
            side_dim=3,
        ),
    }


def full_nets(rng):
    return {
        "actor_critic/vector": build_actor_critic("vector", rng),
        "actor_critic/raster": build_actor_critic("raster", rng),
        "critic/vector": build_discriminator("vector", rng, zero_last=False),
        "critic/raster": build_discriminator("raster", rng, zero_last=False),
    }


def kink_free(net, rng, margin, batch):
    # keep every leaky-relu input clear of zero so the finite difference never straddles the kink
    while True:
        x = rng.standard_normal((batch, net.input_dim))
        if net.kink_distance(x) > margin:
            return x


def test_gradient_suite(capsys):
    t0 = time.perf_counter()
    worst = {}
    for seed in range(20):
        rng = np.random.default_rng(seed)
        nets = {k: v.astype(np.float64).init(rng) for k, v in layer_nets().items()}
        nets.update({k: v.astype(np.float64) for k, v in full_nets(rng).items()})
        for name, net in nets.items():
            big = net.num_params() > 5000
            x = kink_free(net, rng, 1e-5 if big else 1e-3, 2 if big else 3)
            errs = nn.gradient_check(net, x, rng, h=1e-6, max_coords=6 if big else None)
            worst[name] = max(worst.get(name, 0.0), max(errs.values()))
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and elapsed < 120
    detail = ", ".join(f"{k}={v:.1e}" for k, v in worst.items())
    report(capsys, 1, ok, f"worst rel err over 20 seeds: {detail}; {elapsed:.0f}s")
    assert max(worst.values()) < 1e-4, worst
    assert elapsed < 120


# -- 2: closed forms --------------------------------------------------------------


def gae_oracle(r, v, dones, bootstrap, gamma, lam):
    n = len(r)
    v_next = [v[t + 1] if t + 1 < n else bootstrap for t in range(n)]
    delta = [r[t] + gamma * v_next[t] * (1 - dones[t]) - v[t] for t in range(n)]
    out = np.zeros(n)
    for t in range(n):
        w = 1.0
        for j in range(t, n):
            out[t] += w * delta[j]
            if dones[j]:
                break
            w *= gamma * lam
    return out


def test_closed_form_oracles(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    errs = {}

    mean = rng.standard_normal((50, 2))
    log_std = rng.uniform(-3.5, 0.5, 2)
    a = rng.standard_normal((50, 2))
    sd = np.exp(log_std)
    dens = np.prod(np.exp(-0.5 * ((a - mean) / sd) ** 2) / (sd * math.sqrt(2 * math.pi)), axis=1)
    errs["log_prob"] = np.max(np.abs(log_prob(PolicyDist(mean, log_std), a) - np.log(dens)))
    errs["entropy"] = abs(entropy(PolicyDist(mean, log_std)) - sum(0.5 * math.log(2 * math.pi * math.e * s * s) for s in sd))

    r, v = rng.standard_normal(12), rng.standard_normal(12)
    no_done = np.zeros(12)
    adv0, _ = gae(r, v, no_done, 0.3, 0.99, 0.0)
    v_next = np.append(v[1:], 0.3)
    e = np.max(np.abs(adv0 - (r + 0.99 * v_next - v)))
    adv1, _ = gae(r, v, no_done, 0.3, 0.99, 1.0)
    disc_ret = [sum(0.99 ** (j - t) * r[j] for j in range(t, 12)) + 0.99 ** (12 - t) * 0.3 for t in range(12)]
    e = max(e, np.max(np.abs(adv1 - (np.array(disc_ret) - v))))
    for _ in range(50):
        n = int(rng.integers(1, 30))
        r, v = rng.standard_normal(n), rng.standard_normal(n)
        dones = (rng.random(n) < 0.2).astype(float)
        b, gamma, lam = rng.standard_normal(), rng.uniform(0.5, 1), rng.uniform(0, 1)
        adv, ret = gae(r, v, dones, b, gamma, lam)
        e = max(e, np.max(np.abs(adv - gae_oracle(r, v, dones, b, gamma, lam))), np.max(np.abs(ret - adv - v)))
    errs["gae"] = e

    cases = [  # ratio, advantage, expected surrogate
        (1.5, 1.0, 1.1), (0.5, 1.0, 0.5), (1.5, -1.0, -1.5), (0.5, -1.0, -0.9), (1.05, 2.0, 2.1),
    ]
    e = 0.0
    for ratio, adv, sur in cases:
        loss, _ = ppo_actor_loss([math.log(ratio)], [0.0], [adv], clip=0.1)
        e = max(e, abs(loss + sur))
    errs["ppo_clip"] = e

    e = 0.0
    for _ in range(100):
        l1, l2, al = rng.standard_normal(), rng.standard_normal(), rng.random()
        e = max(e, abs(combined_actor_loss(l1, l2, al) - (al * l1 + (1 - al) * l2)))
    e = max(e, abs(combined_actor_loss(3.0, 5.0, 1.0) - 3.0), abs(combined_actor_loss(3.0, 5.0, 0.0) - 5.0))
    errs["blend"] = e

    e = max(abs(alpha_schedule(0.9, 0.995, k) - 0.9 * math.exp(k * math.log(0.995))) for k in range(0, 1001, 7))
    errs["alpha"] = max(e, abs(alpha_schedule(0.9, 0.995, 0) - 0.9))

    elapsed = time.perf_counter() - t0
    ok = max(errs.values()) < 1e-6 and elapsed < 60
    report(capsys, 2, ok, ", ".join(f"{k}={v:.1e}" for k, v in errs.items()) + f"; {elapsed:.1f}s")
    assert max(errs.values()) < 1e-6, errs
    assert elapsed < 60


# -- 3: gradient penalty -----------------------------------------------------------


def test_gradient_penalty(capsys):
    rng = np.random.default_rng(11)
    w = rng.standard_normal(11)
    w /= np.linalg.norm(w)
    lin = nn.Network([nn.dense(11, 1)], side_dim=11, dtype=np.float64)
    lin.params[0][0][0] = w
    xe = rng.standard_normal((32, 11))
    xp = xe + rng.uniform(0.2, 4.0, (32, 1)) * w
    _, penalty = disc_loss(lin, xe, xp, rng=rng, backward=False)

    worst = 0.0
    for seed in range(20):
        r = np.random.default_rng(seed)
        d = nn.Network([nn.dense(11, 32), nn.leaky_relu(), nn.dense(32, 1)], side_dim=11, dtype=np.float64).init(r)
        while True:
            x = r.standard_normal((4, 11))
            u = r.standard_normal((4, 11))
            u /= np.linalg.norm(u, axis=1, keepdims=True)
            if min(d.kink_distance(x + s * u) for s in (-1e-3, 0.0, 1e-3)) > 1e-2:
                break
        worst = max(worst, nn.relative_error(directional_slope(d, x, u, 1e-3), directional_slope(d, x, u, 1e-6)))
    ok = abs(penalty) < 1e-10 and worst < 1e-3
    report(capsys, 3, ok, f"linear aligned penalty={penalty:.1e}, directional slope rel err={worst:.1e}")
    assert abs(penalty) < 1e-10
    assert worst < 1e-3


# -- 4: expert ----------------------------------------------------------------------


def test_expert_completeness(short, capsys):
    t0 = time.perf_counter()
    rep = evaluate(ExpertDriver(short), short, episodes=10, rng=np.random.default_rng(0))
    elapsed = time.perf_counter() - t0
    full = sum(r == short.n_dense for r in rep.rewards)
    ok = full == 10 and elapsed < 30
    report(capsys, 4, ok, f"{full}/10 episodes at {short.n_dense}; {elapsed:.1f}s")
    assert full == 10 and short.n_dense == 80
    assert elapsed < 30


# -- 5: behaviour cloning -----------------------------------------------------------


def test_bc_short_route(short, short_ds, capsys):
    t0 = time.perf_counter()
    res = train_bc(TrainConfig.for_route("short", seed=0), short_ds)
    rep = evaluate(res.policy, short, 10, "deterministic")
    elapsed = time.perf_counter() - t0
    target = 0.95 * short.n_dense
    ok = rep.mean >= target and elapsed < 600
    report(capsys, 5, ok, f"deterministic mean {rep.mean:.1f} (need >= {target:.0f}); {elapsed:.0f}s")
    assert rep.mean >= target
    assert elapsed < 600


# -- 6: convergence ordering on the short route ---------------------------------------


def steps_to_solve(mode, route, ds, seed, budget, threshold):
    cfg = TrainConfig.for_route(route.kind, seed=seed)
    cfg.total_updates = budget // cfg.timesteps_per_update
    return train_gail(cfg, ds, mode, route=route, stop_at_reward=threshold).first_solved_env_steps


def test_convergence_ordering(short, short_ds, capsys):
    t0 = time.perf_counter()
    budget, threshold = 500_000, 0.95 * short.n_dense
    found = {
        mode: [steps_to_solve(mode, short, short_ds, s, budget, threshold) for s in range(3)]
        for mode in ("bc_gail", "gail")
    }
    elapsed = time.perf_counter() - t0
    solved = all(v is not None for runs in found.values() for v in runs)
    med = {m: float(np.median([math.inf if v is None else v for v in runs])) for m, runs in found.items()}
    ratio = med["bc_gail"] / med["gail"]
    ok = solved and ratio <= 0.7 and elapsed <= 7200
    report(capsys, 6, ok, f"env steps to {threshold:.0f}: {found}; median ratio {ratio:.2f}; {elapsed:.0f}s")
    assert solved, found
    assert ratio <= 0.7
    assert elapsed <= 7200


# -- 7: long route ------------------------------------------------------------------


def test_long_route_ordering(long_route, long_ds, capsys):
    t0 = time.perf_counter()
    n = long_route.n_dense
    bc = []
    for seed in range(2):
        res = train_bc(TrainConfig.for_route("long", seed=seed, bc_epochs=30), long_ds)
        bc.append(evaluate(res.policy, long_route, 10, "deterministic").mean)
    gail = [steps_to_solve("bc_gail", long_route, long_ds, s, 2_000_000, 0.9 * n) for s in range(2)]
    elapsed = time.perf_counter() - t0
    ok = all(r < 0.5 * n for r in bc) and all(g is not None for g in gail)
    report(capsys, 7, ok, f"BC deterministic {bc} (< {0.5 * n:.0f}); BC-GAIL steps to {0.9 * n:.0f}: {gail}; "
                          f"{elapsed:.0f}s")
    assert all(r < 0.5 * n for r in bc), bc
    assert all(g is not None for g in gail), gail


# -- 8: determinism -------------------------------------------------------------------


def test_determinism(short, short_ds, tmp_path, capsys):
    t0 = time.perf_counter()
    raster_ds = collect(short, n_trajectories=1, raster=True)
    cases = {
        "bc": (TrainConfig.for_route("short", seed=3, bc_epochs=3), short_ds),
        "gail": (TrainConfig.for_route("short", seed=3, total_updates=3), short_ds),
        "bc_gail": (TrainConfig.for_route("short", seed=3, total_updates=3), short_ds),
        "bc_gail/raster": (TrainConfig(obs_mode="raster", seed=3, total_updates=3, n_envs=2, steps_per_actor=20,
                                       minibatch=20), raster_ds),
    }
    same = {}
    for name, (cfg, ds) in cases.items():
        blobs = []
        for rep in ("a", "b"):
            run = tmp_path / name.replace("/", "_") / rep
            if name == "bc":
                train_bc(cfg, ds, run_dir=run)
            else:
                train_gail(cfg, ds, name.split("/")[0], run_dir=run, route=short)
            blobs.append((run / "metrics.csv").read_bytes())
        same[name] = blobs[0] == blobs[1] and blobs[0].count(b"\n") == 4
    elapsed = time.perf_counter() - t0
    ok = all(same.values()) and elapsed < 300
    report(capsys, 8, ok, f"identical CSVs: {same}; {elapsed:.0f}s")
    assert all(same.values()), same
    assert elapsed < 300


# -- 9: formats -----------------------------------------------------------------------


def test_format_round_trips(short, short_ds, capsys):
    blob = dataset_bytes(short_ds)
    back = parse_dataset(blob)
    data_ok = dataset_bytes(back) == blob and back.observations.tobytes() == short_ds.observations.tobytes()

    net = build_actor_critic("raster", np.random.default_rng(4))
    ckpt = nn.save_params(net)
    other = build_actor_critic("raster", np.random.default_rng(5))
    nn.load_params(other, ckpt)
    ckpt_ok = nn.save_params(other) == ckpt and all(
        a.tobytes() == b.tobytes() for (a, _), (b, _) in zip(net.parameters(), other.parameters())
    )

    rejected = 0
    for bad in (b"XXXX" + blob[4:], blob[:-3], blob + b"\0"):
        with pytest.raises(FormatError):
            parse_dataset(bad)
        rejected += 1
    for bad in (b"XXXX" + ckpt[4:], ckpt[:-4], ckpt + b"\0\0\0\0"):
        with pytest.raises(FormatError):
            nn.load_params(other, bad)
        rejected += 1
    ok = data_ok and ckpt_ok and rejected == 6
    report(capsys, 9, ok, f"dataset round trip={data_ok}, checkpoint round trip={ckpt_ok}, corrupt rejected={rejected}/6")
    assert data_ok and ckpt_ok
