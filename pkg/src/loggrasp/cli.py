"""Command-line entry point: ``loggrasp {train,eval,inspect,emit-curves}``.

Every config key is also a flag (``--train.learning_rate 1e-4``); a handful
of short aliases cover the common ones. Flags win over the config file.
Exit codes: 0 ok, 1 usage/config error, 2 numerical failure, 3 I/O error.
Set ``LOGGRASP_LOG`` (DEBUG, INFO, WARNING...) to change verbosity.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as rc
from . import env as genv
from . import evaluation as ev
from . import kinematics as kin
from . import sim
from .errors import CheckpointError, ConfigError, InvalidArgumentError, LimitViolationError, NumericalFailure

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3

ALIASES = {
    "--algo": "train.algo",
    "--total-steps": "train.total_steps",
    "--envs": "train.n_envs",
    "--rollout": "train.rollout_len",
    "--trials": "eval.trials",
    "--diameters": "eval.diameters",
    "--checkpoint": "eval.checkpoint",
    "--log-dir": "paths.log_dir",
    "--action-repeat": "env.action_repeat",
}

log = logging.getLogger("loggrasp")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--seed", dest="cfg:seed", metavar="INT", help="run seed (default 0)")
    for flag, key in ALIASES.items():
        p.add_argument(flag, dest=f"cfg:{key}", metavar="VALUE", help=f"alias for --{key}")
    group = p.add_argument_group("config keys")
    for key, _, default in rc.flat_keys():
        if key == "seed":
            continue
        shown = list(default) if isinstance(default, tuple) else default
        group.add_argument(f"--{key}", dest=f"cfg:{key}", metavar="VALUE", help=f"default: {shown}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="loggrasp", description="Forestry-crane log grasping: training and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train an mPPO (Beta) or PPO (Gaussian) policy")
    _add_config_flags(p)
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("eval", help="Monte Carlo evaluation per log diameter")
    _add_config_flags(p)
    p.add_argument("--noise", action="store_true", help="enable pose-measurement noise")
    p.add_argument("--oracle", action="store_true", help="evaluate the scripted waypoint controller")
    p.add_argument("--out", help="CSV output path (default: <log_dir>/eval.csv)")

    p = sub.add_parser("inspect", help="kinematics, errors and reward for one configuration")
    _add_config_flags(p)
    p.add_argument("--q", help="8 joint values, comma separated (default: a spawned scenario)")
    p.add_argument("--log-pose", help="log x,y,yaw (center on the ground)")
    p.add_argument("--diameter", type=float, default=0.5)
    p.add_argument("--command", dest="velocity", default="0,0,0,0,0,0", help="desired actuated joint velocities")

    p = sub.add_parser("emit-curves", help="convert a metrics log into a reward-vs-update CSV")
    p.add_argument("metrics", help="metrics.jsonl written by train")
    p.add_argument("--out", help="output CSV (default: stdout)")
    return parser


def _overrides(ns: argparse.Namespace) -> dict:
    return {k[4:]: v for k, v in vars(ns).items() if k.startswith("cfg:") and v is not None}


def resolve_config(ns: argparse.Namespace) -> rc.RunConfig:
    cfg = rc.load(ns.config) if ns.config else rc.RunConfig()
    cfg = rc.apply_overrides(cfg, _overrides(ns))
    if getattr(ns, "noise", False):
        cfg = replace(cfg, noise=replace(cfg.noise, enabled=True))
    if getattr(ns, "oracle", False):
        cfg = replace(cfg, eval=replace(cfg.eval, oracle=True))
    return cfg


def cmd_train(ns) -> int:
    from .trainer import format_progress, train

    cfg = resolve_config(ns)
    log_dir = Path(cfg.paths.log_dir)
    rc.dump(cfg, log_dir / "config.yaml")
    tcfg = cfg.train_config()
    if tcfg.n_updates < 1:
        raise ConfigError(f"train.total_steps={tcfg.total_steps} is below one rollout ({tcfg.batch_size})")
    trainer = train(tcfg, cfg.env_config(), log_dir=log_dir, checkpoint_dir=cfg.paths.resolved_checkpoint_dir(),
                    resume=ns.resume, progress=lambda e: print(format_progress(e), flush=True))
    print(f"done: {trainer.update} updates, metrics in {log_dir / 'metrics.jsonl'}")
    return EXIT_OK


def cmd_eval(ns) -> int:
    cfg = resolve_config(ns)
    env_cfg = cfg.env_config()
    if cfg.eval.oracle:
        factory = ev.WaypointController
    else:
        if not cfg.eval.checkpoint:
            raise ConfigError("eval needs --checkpoint PATH or --oracle")
        from .trainer import load_policy

        net = load_policy(cfg.eval.checkpoint)
        factory = lambda: ev.PolicyController(net, env_cfg)
    stats = ev.monte_carlo(factory, cfg.eval.diameters, cfg.eval.trials, cfg.criteria, cfg.seed, env_cfg)
    out = Path(ns.out) if ns.out else Path(cfg.paths.log_dir) / "eval.csv"
    csv_text, table = ev.export_table(stats)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(csv_text)
    rc.dump(cfg, out.with_suffix(".config.yaml"))
    print(table, end="")
    print(f"wrote {out}")
    return EXIT_OK


def _floats(text: str, n: int, what: str) -> np.ndarray:
    try:
        vals = np.array([float(v) for v in text.split(",")])
    except ValueError as exc:
        raise InvalidArgumentError(f"{what}: expected {n} comma-separated numbers") from exc
    if vals.shape != (n,):
        raise InvalidArgumentError(f"{what}: expected {n} values, got {vals.size}")
    return vals


def inspect_report(q, log_xyyaw, diameter: float, command, cfg: genv.EnvConfig = genv.EnvConfig()) -> str:
    q = np.asarray(q, dtype=float)
    frame = kin.forward_kinematics(q, cfg.sim.model)
    state = sim.spawn_scenario(cfg.scenario, np.random.default_rng(0), cfg.sim)
    x, y, yaw = log_xyyaw
    log_spec = replace(state.log, diameter=np.float64(diameter), position=np.array([x, y, diameter / 2]),
                       rotation=sim.yaw_rotation(yaw))
    state = replace(state, q=q, log=log_spec)
    dp, dpsi = genv.pose_errors(state, frame, cfg.reward)
    r = genv.reward(state, command, cfg.reward, frame)
    fmt = lambda v: " ".join(f"{float(c): .6f}" for c in np.ravel(v))
    lines = [
        f"q            {fmt(q)}",
        f"p_C          {fmt(frame.position)}",
        f"e_C,x        {fmt(frame.e_x)}",
        f"e_C,y        {fmt(frame.e_y)}",
        f"e_C,z        {fmt(frame.e_z)}",
        f"log          x={x:.4f} y={y:.4f} yaw={yaw:.4f} d={diameter:.3f}",
        f"dp           {fmt(dp)}   |dp|={np.linalg.norm(dp):.6f}",
        f"dpsi         {float(dpsi):.6f}",
        f"d_combine    {float(genv.combined_distance(dp, dpsi, cfg.reward)):.6f}",
        f"r_distance   {float(r.distance):.6f}",
        f"r_grapple    {float(r.grapple):.6f}",
        f"r_lift       {float(r.lift):.6f}",
        f"r_balance    {float(r.balance):.6f}",
        f"R            {float(r.total):.6f}",
    ]
    return "\n".join(lines) + "\n"


def cmd_inspect(ns) -> int:
    cfg = resolve_config(ns)
    env_cfg = cfg.env_config()
    if ns.q:
        q = _floats(ns.q, 8, "--q")
    else:
        q = sim.spawn_scenario(env_cfg.scenario, np.random.default_rng(cfg.seed), env_cfg.sim).q
    if ns.log_pose:
        pose = _floats(ns.log_pose, 3, "--log-pose")
    else:
        s = sim.spawn_scenario(env_cfg.scenario, np.random.default_rng(cfg.seed), env_cfg.sim)
        pose = np.array([s.log.position[0], s.log.position[1], float(s.log.yaw)])
    command = _floats(ns.velocity, 6, "--command")
    print(inspect_report(q, pose, ns.diameter, command, env_cfg), end="")
    return EXIT_OK


def emit_curves(metrics_path, out=None) -> str:
    rows = []
    with open(metrics_path) as fh:
        for line in fh:
            if line.strip():
                rows.append(json.loads(line))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["update", "steps", "mean_episode_reward", "mean_episode_length", "mean_step_reward"])
    for m in rows:
        r = m.get("mean_episode_reward")
        length = m.get("mean_episode_length")
        w.writerow([m["update"], m["steps"], "" if r is None else repr(r), "" if length is None else repr(length),
                    repr(m["mean_step_reward"])])
    text = buf.getvalue()
    if out:
        Path(out).write_text(text)
    return text


def cmd_emit_curves(ns) -> int:
    text = emit_curves(ns.metrics, ns.out)
    if not ns.out:
        sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "inspect": cmd_inspect, "emit-curves": cmd_emit_curves}


def main(argv=None) -> int:
    level = os.environ.get("LOGGRASP_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        return COMMANDS[ns.command](ns)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"loggrasp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, InvalidArgumentError, LimitViolationError) as exc:
        print(f"loggrasp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalFailure as exc:
        print(f"loggrasp: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, OSError) as exc:
        print(f"loggrasp: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
