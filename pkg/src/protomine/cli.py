"""Command-line front end.

Subcommands: train, eval, ablate, analyze, gen-data.  Every RunConfig
field is exposed as a flag; precedence is defaults < --config file <
explicit flags.  Exit codes: 0 success, 1 runtime failure, 2 bad
configuration or usage.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .config import RunConfig, coerce_value, config_from_text
from .data import SynthSpec, fold_split, sample_episode, write_cache
from .errors import ConfigError, ProtomineError
from .harness import (ABLATION_SUITES, run_ablation, run_analysis, run_evaluation,
                      run_training)

_GEN_SALT = 0x6E0D


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    defaults = RunConfig()
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        default = getattr(defaults, f.name)
        parser.add_argument(flag, dest=f.name, default=None, metavar=str(default),
                            help=f"override config key {f.name}")


def _collect_overrides(args) -> dict:
    defaults = RunConfig()
    overrides = {}
    for f in fields(RunConfig):
        raw = getattr(args, f.name, None)
        if raw is None:
            continue
        overrides[f.name] = coerce_value(raw, getattr(defaults, f.name), f.name)
    return overrides


def _build_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg = config_from_text(Path(args.config).read_text(), cfg)
    return cfg.with_overrides(**_collect_overrides(args))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protomine",
        description="Few-shot segmentation with iterative prototype mining.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model, write a checkpoint")
    p_train.add_argument("--config", help="key=value config file")
    p_train.add_argument("--out", default="model.ckpt", help="checkpoint path")
    p_train.add_argument("--log", help="also write the training log to this file")
    _add_config_flags(p_train)

    p_eval = sub.add_parser("eval", help="score a checkpoint on sampled episodes")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--out", help="prefix for metrics .csv/.json outputs")
    p_eval.add_argument("--baseline", action="store_true",
                        help="score the prior-mask baseline instead of the model")
    _add_config_flags(p_eval)

    p_abl = sub.add_parser("ablate", help="run an ablation suite")
    p_abl.add_argument("--suite", required=True,
                       help=f"one of {', '.join(ABLATION_SUITES)} "
                            "(table4/table5/table6 accepted as aliases)")
    p_abl.add_argument("--config", help="key=value config file")
    p_abl.add_argument("--out", help="comparison CSV path")
    p_abl.add_argument("--seeds", type=int, default=3, help="seeds per row")
    p_abl.add_argument("--rows", help="comma list restricting which rows run")
    _add_config_flags(p_abl)

    p_an = sub.add_parser("analyze", help="prototype-distance study per fold")
    p_an.add_argument("--checkpoints", required=True,
                      help="comma list of checkpoints, one per fold")
    p_an.add_argument("--out", help="prefix for _records.csv and _summary.csv")
    p_an.add_argument("--episodes", type=int, default=200, help="episodes per fold")
    p_an.add_argument("--seed", type=int, help="episode stream seed override")
    p_an.add_argument("--force-support", action="store_true",
                      help="substitute the pooled support prototype (self-check)")
    p_an.add_argument("--all-layers", action="store_true",
                      help="record every layer's prototype, not just the last")

    p_gen = sub.add_parser("gen-data", help="render an episode cache to disk")
    p_gen.add_argument("--out", required=True, help="output directory")
    p_gen.add_argument("--episodes", type=int, default=20)
    p_gen.add_argument("--fold", type=int, default=0)
    p_gen.add_argument("--mode", default="test", choices=("train", "test"))
    p_gen.add_argument("--shots", type=int, default=1)
    p_gen.add_argument("--diversity", type=float, default=0.5)
    p_gen.add_argument("--canvas", type=int, default=64)
    p_gen.add_argument("--seed", type=int, default=0)
    return parser


def _cmd_train(args) -> int:
    cfg = _build_config(args)
    log_lines = []

    def emit(msg):
        print(msg)
        log_lines.append(msg)

    run_training(cfg, checkpoint_path=args.out, emit=emit)
    if args.log:
        Path(args.log).write_text("\n".join(log_lines) + "\n")
    return 0


def _cmd_eval(args) -> int:
    overrides = _collect_overrides(args)
    run_evaluation(args.checkpoint, overrides, out_prefix=args.out, emit=print,
                   predictor="prior" if args.baseline else "model")
    return 0


def _cmd_ablate(args) -> int:
    cfg = _build_config(args)
    rows = [r.strip() for r in args.rows.split(",")] if args.rows else None
    run_ablation(cfg, args.suite, out_csv=args.out, seeds=args.seeds, rows=rows,
                 emit=print)
    return 0


def _cmd_analyze(args) -> int:
    paths = [p.strip() for p in args.checkpoints.split(",") if p.strip()]
    run_analysis(paths, out_prefix=args.out, episodes=args.episodes, seed=args.seed,
                 force_support=args.force_support, all_layers=args.all_layers,
                 emit=print)
    return 0


def _cmd_gen_data(args) -> int:
    spec = SynthSpec(canvas=args.canvas).validate()
    split = fold_split(spec, args.fold)
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([args.seed, _GEN_SALT])))
    episodes = [sample_episode(spec, split, args.mode, args.shots, rng, args.diversity)
                for _ in range(args.episodes)]
    write_cache(args.out, spec, episodes)
    print(f"wrote {len(episodes)} episodes to {args.out}")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "analyze": _cmd_analyze,
    "gen-data": _cmd_gen_data,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ProtomineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
