"""penn-mpc: command-line entry point.

    penn-mpc <collect|train|ablate-history|explore|deploy|eval> [--config FILE] [--seed N] [--out DIR] [key=value ...]

Exit codes: 0 success, 2 configuration error, 3 runtime failure (a FAILED file is written under --out).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Optional, Sequence

from pennmpc import __version__
from pennmpc.commands.ablation import cmd_ablate_history
from pennmpc.commands.collect import cmd_collect
from pennmpc.commands.common import write_failed
from pennmpc.commands.deploy import cmd_deploy
from pennmpc.commands.evaluate import cmd_eval
from pennmpc.commands.explore import cmd_explore
from pennmpc.commands.train import cmd_train
from pennmpc.config import load_config
from pennmpc.errors import ConfigError, PennMpcError
from pennmpc.models.schemas import ExperimentConfig

logger = logging.getLogger("pennmpc")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_FAILURE = 3


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat dotted.key=value config file")
    common.add_argument("--seed", type=int, help="experiment seed (overrides `seed`)")
    common.add_argument("--out", help="output directory (overrides io.out_dir)")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("overrides", nargs="*", metavar="key=value", help="config overrides, applied last")

    parser = argparse.ArgumentParser(prog="penn-mpc", description="Ensemble dynamics learning and MPPI for a simulated vehicle")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("collect", parents=[common], help="record scripted maneuvers on the desk track")
    p.add_argument("--minutes", type=float, help="total driving time (collect.minutes)")
    p.add_argument("--rate", type=float, help="logging rate in Hz (sets plant.dt = 1/rate)")

    sub.add_parser("train", parents=[common], help="train the ensemble on io.data_dir")

    p = sub.add_parser("ablate-history", parents=[common], help="train once per history length H")
    p.add_argument("--h-min", type=int, default=1)
    p.add_argument("--h-max", type=int, default=10)

    p = sub.add_parser("explore", parents=[common], help="uncertainty-seeking data collection loop")
    p.add_argument("--policy", choices=["explore", "random"], help="explore.policy")
    p.add_argument("--rounds", type=int, help="explore.n_rounds")
    p.add_argument("--steps", type=int, help="explore.steps_per_round")
    p.add_argument("--fresh", action="store_true", help="discard a previous run in --out instead of resuming it")

    p = sub.add_parser("deploy", parents=[common], help="closed-loop laps with the learned model")
    p.add_argument("--checkpoint", help="io.checkpoint")
    p.add_argument("--mode", choices=["direct", "safe"], help="deploy.mode")
    p.add_argument("--laps", type=int, help="deploy.laps")

    p = sub.add_parser("eval", parents=[common], help="RMSE report of a checkpoint on a dataset")
    p.add_argument("--checkpoint", help="io.checkpoint")
    p.add_argument("--split", choices=["test", "all"], default="test")
    return parser


def _flag_overrides(args: argparse.Namespace) -> list[str]:
    """Translate convenience flags into config overrides so they land in config.effective."""
    mapping = {
        "seed": "seed",
        "out": "io.out_dir",
        "minutes": "collect.minutes",
        "policy": "explore.policy",
        "rounds": "explore.n_rounds",
        "steps": "explore.steps_per_round",
        "checkpoint": "io.checkpoint",
        "mode": "deploy.mode",
        "laps": "deploy.laps",
    }
    flags = []
    for attr, key in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            flags.append(f"{key}={json.dumps(value)}")
    rate = getattr(args, "rate", None)
    if rate is not None:
        if rate <= 0:
            raise ConfigError(f"--rate must be positive, got {rate}")
        flags.append(f"plant.dt={1.0 / rate!r}")
    return flags


def run(args: argparse.Namespace, cfg: ExperimentConfig) -> int:
    if args.command == "collect":
        cmd_collect(cfg)
    elif args.command == "train":
        cmd_train(cfg)
    elif args.command == "ablate-history":
        cmd_ablate_history(cfg, args.h_min, args.h_max)
    elif args.command == "explore":
        cmd_explore(cfg, fresh=args.fresh)
    elif args.command == "deploy":
        summary = cmd_deploy(cfg)
        if summary.failure is not None:
            write_failed(cfg.io.out_dir, f"deploy: {summary.failure} after {summary.steps} steps")
            return EXIT_FAILURE
    elif args.command == "eval":
        cmd_eval(cfg, args.split)
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        cfg = load_config(args.config, [*args.overrides, *_flag_overrides(args)])
    except ConfigError as exc:
        logger.error("%s", exc)
        return EXIT_CONFIG

    try:
        return run(args, cfg)
    except ConfigError as exc:
        logger.error("%s", exc)
        return EXIT_CONFIG
    except PennMpcError as exc:
        logger.error("%s failed: %s", args.command, exc)
        write_failed(cfg.io.out_dir, f"{args.command}: {type(exc).__name__}: {exc}")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
