"""
Command line: python muvo.py <verb> [options]

    gen      generate the synthetic dataset
    train    train one configuration
    eval     evaluate a checkpoint on a split
    matrix   run a study (fusion / latent / occupancy / pretrain)
    inspect  dump one decoded window to image, point and voxel files
    config   print the canonical configuration and its hashes
"""

import argparse
import logging
import os
import sys
from typing import Any

from config import LOG_LEVEL_ENV, PRESETS, canonical_form, config_hash, data_hash, load_config, model_hash, parse_overrides
from schemas import ExperimentConfig

logger = logging.getLogger("muvo")


def _overrides(pairs: list[str]) -> dict[str, Any]:
    return parse_overrides("\n".join(pairs))


def _config(args: argparse.Namespace) -> ExperimentConfig:
    return load_config(args.config, preset=args.preset, overrides=_overrides(args.set))


def gen_config(cfg: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    """
    Applies the gen flags on top of the loaded config. --episodes sets the
    train count and a quarter of it (at least one) per validation split;
    --no-domain-shift skips the val_ds split.
    """
    update: dict[str, Any] = {}
    if args.seed is not None:
        update["base_seed"] = args.seed
    if args.episodes is not None:
        val = max(1, args.episodes // 4)
        update.update(train_episodes=args.episodes, val_rl_episodes=val, val_ds_episodes=val)
    if args.frames is not None:
        update["frames"] = args.frames
    if args.domain_shift is False:
        update["val_ds_episodes"] = 0
    elif args.domain_shift and cfg.dataset.val_ds_episodes == 0:
        update["val_ds_episodes"] = update.get("val_rl_episodes", cfg.dataset.val_rl_episodes) or 1
    if not update:
        return cfg
    merged = cfg.model_dump()
    merged["dataset"].update(update)
    return ExperimentConfig.model_validate(merged)


def cmd_gen(args: argparse.Namespace) -> int:
    from dataset import generate_dataset

    cfg = gen_config(_config(args), args)
    manifest = generate_dataset(cfg, args.out, overwrite=args.overwrite)
    print(f"{len(manifest.entries)} episodes written to {args.out} (hash {manifest.config_hash})")
    return 0



def cmd_train(args: argparse.Namespace) -> int:
    from training import train

    result = train(_config(args), args.data, args.run, resume=args.resume, force=args.force)
    print(f"checkpoint: {result.checkpoint}\nmetric log: {result.metric_log}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    from evaluation import evaluate

    result = evaluate(args.checkpoint, _config(args), args.data, args.split, out_dir=args.out, plot=args.plot, force=args.force)
    for name, s in result.summary.items():
        print(f"{name:24s} {s.mean:10.4f} ± {s.std:.4f}  (n={s.count})")
    return 0


def cmd_matrix(args: argparse.Namespace) -> int:
    from matrix import run_study

    report = run_study(args.study, _config(args), args.data, args.out, steps=args.steps, plot=args.plot, core_only=args.core)
    for split, metrics in report.ranking.items():
        for metric, entries in metrics.items():
            best = ", ".join(f"{e.run}={e.value:.3f}" for e in entries[:3])
            print(f"{split:7s} {metric:18s} {best}")
    for row in report.failed:
        print(f"FAILED {row.run} [{row.split}]: {row.error}", file=sys.stderr)
    return 1 if report.failed else 0


def cmd_inspect(args: argparse.Namespace) -> int:
    from export import inspect_window

    written = inspect_window(args.checkpoint, _config(args), args.data, args.split, args.window, args.out, force=args.force)
    print(f"{len(written)} files written to {args.out}")
    return 0


def cmd_config(args: argparse.Namespace) -> int:
    cfg = _config(args)
    print(canonical_form(cfg), end="")
    print(f"# config_hash = {config_hash(cfg)}\n# model_hash = {model_hash(cfg)}\n# data_hash = {data_hash(cfg)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="muvo", description="Desk-scale multimodal world model for driving")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--preset", default="desk", choices=sorted(PRESETS))
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--log-level", default=os.getenv(LOG_LEVEL_ENV, "INFO"))

    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate the dataset")
    p.add_argument("--out", "--data", dest="out", required=True, help="dataset root")
    p.add_argument("--seed", type=int, help="base seed of the episode seeds")
    p.add_argument("--episodes", type=int, help="train episodes; each validation split gets a quarter")
    p.add_argument("--frames", type=int, help="frames per episode")
    p.add_argument("--domain-shift", action=argparse.BooleanOptionalAction, default=None, help="write the val_ds split")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", parents=[common], help="train one configuration")
    p.add_argument("--data", required=True)
    p.add_argument("--run", required=True, help="run directory for checkpoints and the metric log")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--force", action="store_true", help="ignore hash mismatches")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val_rl", choices=("train", "val_rl", "val_ds"))
    p.add_argument("--out")
    p.add_argument("--plot", action="store_true")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("matrix", parents=[common], help="run a study")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--study", default="fusion", choices=("fusion", "latent", "occupancy", "pretrain"))
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--core", action="store_true", help="fusion study: eight-cell subset instead of all 12")
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("inspect", parents=[common], help="dump one decoded window")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val_rl", choices=("train", "val_rl", "val_ds"))
    p.add_argument("--window", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("config", parents=[common], help="print the canonical config")
    p.set_defaults(func=cmd_config)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s: %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as e:
        logger.exception("%s failed: %s", args.verb, e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
