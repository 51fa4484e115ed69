"""Command-line entry point for running pipeline stages.

Usage:
    tracetune run --config cfg.json [--stage NAME] [--mode replay] [--seed N]
    tracetune collect|filter|sft|gen-candidates|judge|train-rm|ppo|eval \
        --config cfg.json [...]
    tracetune init-config cfg.json       # write a documented default config
    tracetune make-toy-tasks tasks.jsonl # write the bundled 20-task family

Exit status is 0 on success; on failure the offending stage is named on
standard error and the status is 1.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .corpus import save_tasks
from .errors import TracetuneError
from .pipeline import STAGE_ORDER, Pipeline, PipelineConfig, load_config
from .toy import make_toy_tasks


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="pipeline config JSON")
    parser.add_argument("--mode", choices=["record", "replay", "live"],
                        default=None, help="override the teacher cache mode")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the global seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tracetune",
        description="Teacher-to-student repair pipeline: trace collection, "
                    "SFT, preference reward model, PPO, evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run all stages in order")
    _add_common(run)
    run.add_argument("--stage", choices=STAGE_ORDER, default=None,
                     help="stop after this stage")

    for stage in STAGE_ORDER:
        stage_parser = sub.add_parser(stage, help=f"run only the {stage} stage")
        _add_common(stage_parser)

    init = sub.add_parser("init-config", help="write a default config file")
    init.add_argument("path", help="where to write the config JSON")

    toy = sub.add_parser("make-toy-tasks",
                         help="write the bundled toy task family")
    toy.add_argument("path", help="where to write tasks JSONL")
    toy.add_argument("--count", type=int, default=20)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)

    if args.command == "init-config":
        config = PipelineConfig()
        Path(args.path).write_text(
            json.dumps(dataclasses.asdict(config), indent=2, sort_keys=True,
                       default=list) + "\n",
            encoding="utf-8")
        print(f"wrote default config to {args.path}")
        return 0

    if args.command == "make-toy-tasks":
        tasks = make_toy_tasks(args.count)
        save_tasks(args.path, tasks)
        print(f"wrote {len(tasks)} toy tasks to {args.path}")
        return 0

    config = load_config(args.config, mode=args.mode, seed=args.seed)
    pipeline = Pipeline(config)
    stage = None
    try:
        if args.command == "run":
            for name in STAGE_ORDER:
                stage = name
                pipeline.run_stage(name)
                print(f"stage {name}: done")
                if args.stage == name:
                    break
        else:
            stage = args.command
            pipeline.run_stage(stage)
            print(f"stage {stage}: done")
    except TracetuneError as exc:
        print(f"stage {stage} failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
