"""Command line entry point: ``gradsteer train|eval|recipe|report``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .. import mixgen, reweight
from ..model import ModelError, NonFiniteGradient
from .config import ConfigError, load_config
from .recipes import recipe_class_bias, recipe_curriculum, recipe_robust_sweep, render_recipe
from .training import evaluate_checkpoint, render_run, train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gradsteer", description="Softmax gradient reweighting for source separation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the config's test set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--split", choices=["val", "test"], default="test")

    p = sub.add_parser("recipe", help="run a named experiment")
    p.add_argument("name", choices=["robust-sweep", "curriculum", "class-bias"])
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", type=int, default=5, help="number of seeds, starting at run.seed")
    p.add_argument("--out")

    p = sub.add_parser("report", help="re-render SVGs from a run or recipe directory")
    p.add_argument("--run", required=True)
    return parser


def _run(args) -> int:
    if args.command == "train":
        config = load_config(args.config)
        res = train(config, args.out, args.seed)
        print(json.dumps({k: res.summary[k] for k in ("test_mean", "test_std", "test_quantiles")}, indent=2))
    elif args.command == "eval":
        config = load_config(args.config)
        rep = evaluate_checkpoint(args.checkpoint, config, args.split)
        print(json.dumps({"mean": rep.mean, "std": rep.std, "quantiles": {f"{q:g}": v for q, v in rep.quantiles.items()},
                          "per_class": {str(c): m for c, (_, m) in rep.per_class.items()}}, indent=2))
    elif args.command == "recipe":
        config = load_config(args.config)
        seeds = tuple(range(config.run.seed, config.run.seed + args.seeds))
        recipe = {"robust-sweep": recipe_robust_sweep, "curriculum": recipe_curriculum,
                  "class-bias": recipe_class_bias}[args.name]
        res = recipe(config, seeds=seeds, out_dir=args.out)
        print(f"wrote {res.out_dir}")
    elif args.command == "report":
        path = Path(args.run)
        if not path.is_dir():
            raise ConfigError(f"{path} is not a directory")
        written = render_run(path) + render_recipe(path)
        for w in written:
            print(w)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return _run(args)
    except (ConfigError, FileNotFoundError, mixgen.MixgenError, reweight.ReweightError, ModelError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteGradient, FloatingPointError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
