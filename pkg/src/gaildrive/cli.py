"""Command-line entry point: ``gaildrive {collect,train,eval,routes}``.

Exit codes: 0 success, 1 expert collection failure, 2 usage or
configuration problems, 3 numeric failure during training.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from .errors import CollectionError, ConfigurationError, FormatError, NumericalError
from .evaluate import MODES as EVAL_MODES
from .evaluate import dump_trajectory, evaluate
from .expert import ExpertDriver, PidParams, collect, read_dataset
from .sim import ROUTE_KINDS, dump_route, make_route
from .train import MODES as TRAIN_MODES
from .train import TrainConfig, load_policy, train_bc, train_gail

log = logging.getLogger("gaildrive")

EXIT_OK, EXIT_COLLECT, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

RUN_KEYS = {"route", "obs_mode", "seed", "dataset", "name", "runs_dir", "mode", "train", "expert"}
TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} - {"route", "obs_mode", "seed"}
PID_KEYS = {f.name for f in dataclasses.fields(PidParams)}

# settings that only matter for the adversarial trainers
GAIL_ONLY = {
    "n_envs", "ppo_epochs", "minibatch", "gamma", "gae_lambda", "clip", "value_coef", "entropy_coef",
    "steps_per_actor", "gp_coef", "eps_fd", "alpha0", "alpha_decay", "total_updates", "disc_lr",
    "disc_epochs", "normalize_rewards", "eval_stochastic_episodes", "checkpoint_every", "lr",
}

# explicit flags mapped onto TrainConfig fields
TRAIN_FLAGS = {
    "updates": ("total_updates", int),
    "lr": ("lr", float),
    "n_envs": ("n_envs", int),
    "minibatch": ("minibatch", int),
    "steps_per_actor": ("steps_per_actor", int),
    "disc_lr": ("disc_lr", float),
    "gp_coef": ("gp_coef", float),
    "alpha0": ("alpha0", float),
    "alpha_decay": ("alpha_decay", float),
    "bc_epochs": ("bc_epochs", int),
    "bc_lr": ("bc_lr", float),
}


class UsageError(Exception):
    pass


def default_seed() -> int:
    raw = os.environ.get("GDRV_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"GDRV_SEED must be an integer, got {raw!r}") from None


def load_config(path) -> dict:
    """Read a YAML run config and reject keys nobody understands."""
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    data = yaml.safe_load(p.read_text()) or {}
    if not isinstance(data, dict):
        raise UsageError("config file must hold a mapping")
    _reject_unknown(data, RUN_KEYS, "config")
    _reject_unknown(data.get("train") or {}, TRAIN_KEYS, "train")
    _reject_unknown(data.get("expert") or {}, PID_KEYS, "expert")
    return data


def _reject_unknown(section: dict, allowed: set, where: str):
    if not isinstance(section, dict):
        raise UsageError(f"'{where}' must be a mapping")
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise UsageError(f"unknown {where} keys: {', '.join(unknown)}")


def parse_overrides(pairs) -> dict:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = yaml.safe_load(value)
    _reject_unknown(out, TRAIN_KEYS, "train")
    return out


def resolve(args, cfg: dict, key: str, default):
    """Flag value if given, else config file value, else default."""
    flag = getattr(args, key, None)
    if flag is not None:
        return flag
    return cfg.get(key, default)


# ---------------------------------------------------------------------------
# subcommands


def cmd_collect(args) -> int:
    cfg = load_config(args.config)
    route_kind = resolve(args, cfg, "route", "short")
    _check_route(route_kind)
    params = PidParams(**(cfg.get("expert") or {}))
    route = make_route(route_kind)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    try:
        ds = collect(route, params, args.trajectories, out, raster=args.raster)
    except CollectionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COLLECT
    print(f"collected {len(ds)} samples from {args.trajectories} {route_kind} laps -> {out}")
    return EXIT_OK


def build_train_config(args, cfg: dict) -> tuple[TrainConfig, set]:
    route_kind = resolve(args, cfg, "route", "short")
    _check_route(route_kind)
    values = dict(cfg.get("train") or {})
    explicit = set()
    for flag, (field, _) in TRAIN_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[field] = v
            explicit.add(field)
    overrides = parse_overrides(args.set)
    values.update(overrides)
    explicit |= set(overrides)
    values["obs_mode"] = resolve(args, cfg, "obs_mode", "vector")
    values["seed"] = resolve(args, cfg, "seed", default_seed())
    try:
        tc = TrainConfig.for_route(route_kind, **values)
    except TypeError as exc:
        raise UsageError(str(exc)) from None
    return tc, explicit


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    mode = resolve(args, cfg, "mode", None)
    if mode not in TRAIN_MODES:
        raise UsageError(f"--mode must be one of {', '.join(TRAIN_MODES)}")
    tc, explicit = build_train_config(args, cfg)
    if mode == "bc":
        ignored = sorted((explicit | set(cfg.get("train") or {})) & GAIL_ONLY)
        if ignored:
            log.warning("--mode bc ignores GAIL-only settings: %s", ", ".join(ignored))
    ds_path = resolve(args, cfg, "dataset", None)
    if ds_path is None or not Path(ds_path).is_file():
        raise UsageError(f"dataset not found: {ds_path}")
    dataset = read_dataset(ds_path)
    if dataset.route_kind != tc.route:
        log.warning("dataset was recorded on the %s route, training on %s", dataset.route_kind, tc.route)

    name = resolve(args, cfg, "name", None) or f"{mode}_{tc.route}_{tc.obs_mode}_s{tc.seed}"
    run_dir = Path(resolve(args, cfg, "runs_dir", "runs")) / name
    (run_dir / "trajectories").mkdir(parents=True, exist_ok=True)
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    resolved = {
        "mode": mode,
        "route": tc.route,
        "obs_mode": tc.obs_mode,
        "seed": tc.seed,
        "dataset": str(ds_path),
        "name": name,
        "runs_dir": str(run_dir.parent),
        "train": {k: v for k, v in tc.to_dict().items() if k in TRAIN_KEYS},
    }
    resolved["train"]["log_std"] = list(tc.log_std)
    (run_dir / "config.yaml").write_text(yaml.safe_dump(resolved, sort_keys=True))

    route = make_route(tc.route)
    if mode == "bc":
        result = train_bc(tc, dataset, run_dir)
    else:
        result = train_gail(tc, dataset, mode, run_dir, route)
    report = evaluate(result.policy, route, args.eval_episodes, "deterministic", np.random.default_rng(tc.seed))
    dump_trajectory(report, run_dir / "trajectories" / "final_deterministic.txt")
    print(f"run {run_dir}: {report.summary()}")
    return EXIT_OK


def cmd_eval(args) -> int:
    route = make_route(args.route)
    if args.expert:
        actor = ExpertDriver(route)
    else:
        if args.checkpoint is None or not Path(args.checkpoint).is_file():
            raise UsageError(f"checkpoint not found: {args.checkpoint}")
        actor = load_policy(args.checkpoint)
        if args.obs_mode and args.obs_mode != actor.obs_mode:
            raise UsageError(f"checkpoint is a {actor.obs_mode} policy, not {args.obs_mode}")
    seed = args.seed if args.seed is not None else default_seed()
    report = evaluate(actor, route, args.episodes, args.mode, np.random.default_rng(seed))
    print(report.summary())
    if args.dump:
        Path(args.dump).parent.mkdir(parents=True, exist_ok=True)
        dump_trajectory(report, args.dump)
    return EXIT_OK


def cmd_routes(args) -> int:
    kinds = ROUTE_KINDS if args.route == "all" else [args.route]
    for kind in kinds:
        route = make_route(kind)
        line = f"{kind}: length {route.length:.0f} m, {route.n_dense} dense, {route.n_sparse} sparse points"
        if args.out:
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            dump_route(route, out / f"{kind}.txt")
            line += f" -> {out / (kind + '.txt')}"
        print(line)
    return EXIT_OK


def _check_route(kind):
    if kind not in ROUTE_KINDS:
        raise UsageError(f"unknown route {kind!r}; choose from {', '.join(ROUTE_KINDS)}")


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gaildrive", description="Imitation learning for a 2D driving simulator.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("collect", help="record expert demonstrations")
    c.add_argument("--route", choices=ROUTE_KINDS)
    c.add_argument("--trajectories", type=int, default=10)
    c.add_argument("--out", required=True)
    c.add_argument("--raster", action="store_true", help="also store the 3x32x32 rasters")
    c.add_argument("--config")
    c.set_defaults(func=cmd_collect)

    t = sub.add_parser("train", help="train a policy (bc, gail or bc_gail)")
    t.add_argument("--mode", choices=TRAIN_MODES)
    t.add_argument("--route", choices=ROUTE_KINDS)
    t.add_argument("--obs-mode", dest="obs_mode", choices=("vector", "raster"))
    t.add_argument("--dataset")
    t.add_argument("--name", help="run directory name under --runs-dir")
    t.add_argument("--runs-dir", dest="runs_dir")
    t.add_argument("--seed", type=int)
    t.add_argument("--config", help="YAML run config; flags override it")
    t.add_argument("--eval-episodes", dest="eval_episodes", type=int, default=1)
    for flag, (_, typ) in TRAIN_FLAGS.items():
        t.add_argument("--" + flag.replace("_", "-"), dest=flag, type=typ)
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="any training setting, repeatable")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint or the expert")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--expert", action="store_true")
    e.add_argument("--route", choices=ROUTE_KINDS, default="short")
    e.add_argument("--obs-mode", dest="obs_mode", choices=("vector", "raster"))
    e.add_argument("--episodes", type=int, default=10)
    e.add_argument("--mode", choices=EVAL_MODES, default="stochastic")
    e.add_argument("--dump", help="write trajectories here")
    e.add_argument("--seed", type=int)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("routes", help="print or dump route geometry")
    r.add_argument("--route", choices=ROUTE_KINDS + ("all",), default="all")
    r.add_argument("--out", help="directory for <kind>.txt dumps")
    r.set_defaults(func=cmd_routes)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors this way
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigurationError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
