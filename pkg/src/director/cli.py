"""Command line entry point: ``director train | eval | viz-goals``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from .config import load_config
from .diffcore import ConfigError
from .training import EXIT_OK, load_agent, make_eval_env, run_eval, run_train
from .viz import visualize_goals

log = logging.getLogger("director")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML file or preset name (desk, tiny)")
    p.add_argument("--env", help="environment name, e.g. pinpad:three")
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="director", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train an agent")
    _add_common(train)
    train.add_argument("--steps", type=int, help="total environment steps")
    train.add_argument("--logdir")
    train.add_argument("--mode", choices=("sync", "async"))
    train.add_argument("--resume", help="checkpoint to continue from")

    ev = sub.add_parser("eval", help="evaluate a checkpoint or the scripted oracle")
    _add_common(ev)
    ev.add_argument("--checkpoint")
    ev.add_argument("--oracle", action="store_true", help="use the scripted pin pad oracle")
    ev.add_argument("--episodes", type=int, default=1)

    viz = sub.add_parser("viz-goals", help="render frames above decoded goals")
    viz.add_argument("--checkpoint", required=True)
    viz.add_argument("--env")
    viz.add_argument("--seed", type=int)
    viz.add_argument("--steps", type=int, default=32)
    viz.add_argument("--out", default="goals.png")
    viz.add_argument("--greedy-manager", action="store_true",
                     help="take the manager mode instead of sampling goals")
    return parser


def cmd_train(args) -> int:
    config = load_config(args.config, env=args.env, seed=args.seed, steps=args.steps,
                         logdir=args.logdir, mode=args.mode)
    result = run_train(config, config.logdir, resume=args.resume)
    log.info("finished: %d env steps, %d train steps, status %d", result.env_steps,
             result.train_steps, result.status)
    return result.status


def cmd_eval(args) -> int:
    config = load_config(args.config) if args.oracle or args.config else None
    stats = run_eval(args.checkpoint, args.episodes, config, oracle=args.oracle,
                     env=args.env, seed=args.seed)
    print(json.dumps(stats))
    return EXIT_OK


def cmd_viz(args) -> int:
    agent, config, _ = load_agent(args.checkpoint)
    config = config.override(**{k: v for k, v in (("env", args.env), ("seed", args.seed))
                                if v is not None})
    video = visualize_goals(agent, make_eval_env(config), args.out, args.steps,
                            sample_manager=not args.greedy_manager)
    print(json.dumps({"out": str(Path(args.out)), "roundtrip_mse": video.roundtrip_mse,
                      "goal_changes": int(video.refresh.sum())}))
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "viz-goals": cmd_viz}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    torch.set_num_threads(1)
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
