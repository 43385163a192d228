"""Command-line entry point: ``advjudge <stage> --out DIR [--config FILE] ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .exceptions import AdvJudgeError
from .pipeline import PRESETS, STAGES, ExperimentConfig, Pipeline, StageError

logger = logging.getLogger("advjudge")

# flag -> (config section, key)
OVERRIDES = {
    "classifier_epochs": ("classifier", "epochs"),
    "train_limit": ("classifier", "train_limit"),
    "classifier_checkpoint": ("classifier", "checkpoint"),
    "cw_iterations": ("attacks", "cw-l2", "cw_iterations"),
    "judge_epochs": ("judge", "epochs"),
    "ig_steps": ("attribution", "steps"),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="advjudge", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES + ("run-all",):
        p = sub.add_parser(name, help="run every stage, skipping finished ones" if name == "run-all"
                           else f"run the {name} stage")
        p.add_argument("--config", help="JSON experiment config layered over the preset")
        p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
        p.add_argument("--out", help="output directory (overrides config 'out')")
        p.add_argument("--seed", type=int, help="global seed")
        p.add_argument("--data", help="dataset directory")
        p.add_argument("--dataset", choices=["cifar10", "mnist"])
        p.add_argument("--classifier-epochs", type=int)
        p.add_argument("--train-limit", type=int)
        p.add_argument("--classifier-checkpoint", help="reuse a trained classifier instead of training")
        p.add_argument("--epsilon", type=float, help="FGSM and BIM perturbation budget")
        p.add_argument("--cw-iterations", type=int)
        p.add_argument("--judge-epochs", type=int)
        p.add_argument("--ig-steps", type=int)
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _set(doc, path, value):
    for key in path[:-1]:
        doc = doc.setdefault(key, {})
    doc[path[-1]] = value


def config_from_args(args):
    doc = {}
    if args.config:
        with open(args.config) as f:
            doc = json.load(f)
    if args.out:
        doc["out"] = args.out
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.dataset:
        _set(doc, ("dataset", "name"), args.dataset)
    if args.data:
        _set(doc, ("dataset", "path"), args.data)
    if args.epsilon is not None:
        for method in ("fgsm", "bim"):
            _set(doc, ("attacks", method, "epsilon"), args.epsilon)
    for flag, path in OVERRIDES.items():
        value = getattr(args, flag)
        if value is not None:
            _set(doc, path, value)
    return ExperimentConfig(doc, preset=args.preset)


def _fail(stage, exc, code):
    payload = {"error": type(exc).__name__, "stage": stage, "message": str(exc)}
    print(json.dumps(payload), file=sys.stderr)
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    stage = args.command
    try:
        pipe = Pipeline(config_from_args(args))
        if stage == "run-all":
            report = pipe.run_all()
            print(report)
        else:
            pipe.run(stage)
    except StageError as exc:
        return _fail(exc.stage, exc, 1)
    except (AdvJudgeError, OSError, json.JSONDecodeError) as exc:
        return _fail(stage, exc, 2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
