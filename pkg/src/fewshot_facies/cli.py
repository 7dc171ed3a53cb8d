"""Command-line entry point: ``fewshot-facies <command> --config PATH``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from .baselines import VARIANTS

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3

STAGE_COMMANDS = {
    "preprocess": ["preprocess"],
    "pretrain": ["pretrain"],
    "train": ["train"],
    "evaluate": ["evaluate"],
    "run": list(harness.STAGES),
}


def _emit(**rec):
    print(json.dumps(rec, sort_keys=True), flush=True)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fewshot-facies", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="experiment JSON")
        sp.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        sp.add_argument("--out", default=None, help="output directory")
        return sp

    for name in ("preprocess", "pretrain", "train", "evaluate"):
        common(sub.add_parser(name, help=f"run the {name} stage"))
    run = common(sub.add_parser("run", help="run all stages, or one with --stage"))
    run.add_argument("--stage", choices=harness.STAGES, default=None)
    base = common(sub.add_parser("baseline", help="train and score a comparator"))
    base.add_argument("--variant", choices=VARIANTS, required=True)
    cmp_ = sub.add_parser("compare", help="tabulate metrics across run directories")
    cmp_.add_argument("runs", nargs="+")
    cmp_.add_argument("--config", default=None, help="unused; accepted for symmetry")
    cmp_.add_argument("--out", default=None, help="write the comparison JSON here")
    synth = sub.add_parser("synth", help="write synthetic volumes and a toy config")
    synth.add_argument("--config", required=True, help="path of the config to create")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--size", type=int, default=64)
    return p


def _setup_logging() -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(harness.JsonLineFormatter())
    root = logging.getLogger("fewshot_facies")
    root.handlers[:] = [handler]
    root.setLevel(logging.INFO)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging()
    try:
        if args.command == "synth":
            target = Path(args.config)
            path = harness.make_toy_config(target.parent, seed=args.seed, shape=(args.size,) * 3)
            if path != target:
                path.rename(target)
            _emit(event="synth", config=str(target))
            return EXIT_OK
        if args.command == "compare":
            result = harness.compare_runs(args.runs)
            print(result["text"])
            if args.out:
                Path(args.out).write_text(json.dumps({k: v for k, v in result.items() if k != "text"}, indent=2))
            return EXIT_OK
        cfg = harness.load_config(args.config, seed=args.seed, output_dir=args.out)
    except (harness.ConfigError, ValueError, OSError) as e:
        _emit(event="error", kind="config", error=str(e))
        return EXIT_CONFIG

    try:
        if args.command == "baseline":
            run_dir = harness.run_baseline(cfg, args.variant)
        else:
            stages = STAGE_COMMANDS[args.command]
            if args.command == "run" and args.stage:
                stages = [args.stage]
            run_dir = harness.run_experiment(cfg, stages)
    except harness.ConfigError as e:
        _emit(event="error", kind="config", error=str(e))
        return EXIT_CONFIG
    except (harness.StageError, harness.StageOrderError) as e:
        _emit(event="error", kind="stage", stage=getattr(e, "stage", None), error=str(e))
        return EXIT_STAGE
    _emit(event="done", command=args.command, run_dir=str(run_dir))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
