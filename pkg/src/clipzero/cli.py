"""Command line: ``clipzero {zero-shot-vqa,few-shot-vqa,entailment,report}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import RunConfig, build_config, load_config, parse_override
from .errors import ClipZeroError
from .runs import RUNNERS, check_replay, report

# flag name -> dotted config key
_FLAGS = {
    "out": "output.dir",
    "cache": "output.cache",
    "encoder": "backend.encoder",
    "lm": "backend.lm",
    "parser": "backend.parser",
    "device": "backend.device",
    "questions": "data.questions",
    "annotations": "data.annotations",
    "train_questions": "data.train_questions",
    "train_annotations": "data.train_annotations",
    "vocab": "data.vocab",
    "parses": "data.parses",
    "limit": "data.limit",
    "threshold": "tapc.threshold",
    "k": "tapc.k",
    "K": "few_shot.K",
    "C": "few_shot.C",
    "proportion": "few_shot.proportion",
    "seed": "few_shot.seed",
    "epochs": "few_shot.epochs",
    "direction": "entailment.direction",
    "workers": "workers",
}
_SWITCHES = {
    "no_answer_filter": "tapc.no_answer_filter",
    "qip_baseline": "tapc.qip_baseline",
    "no_demo_template": "tapc.no_demo_template",
    "no_parsing_template": "tapc.no_parsing_template",
    "demo_filter": "tapc.demo_filter",
    "no_masked_control": "entailment.masked_control",
}


def _add_run_args(p: argparse.ArgumentParser, command: str) -> None:
    p.add_argument("--config", type=Path, help="YAML run config")
    p.add_argument("--replay", type=Path, help="manifest.json of an earlier run to repeat")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key, e.g. tapc.k=50 (repeatable)")
    p.add_argument("--out")
    p.add_argument("--cache")
    p.add_argument("--encoder", help="hash:SEED[:DIM] | toy:SEED | lookup:FILE.npz | open_clip:ARCH[:PRETRAINED]")
    p.add_argument("--lm", help="hash:SEED | index | t5:MODEL")
    p.add_argument("--parser", choices=["none", "conllu", "stanza"])
    p.add_argument("--device")
    p.add_argument("--limit", type=int)
    p.add_argument("--workers", type=int)
    if command in ("zero-shot-vqa", "few-shot-vqa"):
        for name in ("questions", "annotations", "vocab", "parses"):
            p.add_argument(f"--{name.replace('_', '-')}")
        p.add_argument("--threshold", type=float)
        p.add_argument("-k", dest="k", type=int, help="number of filtered answers")
        for name in ("no_answer_filter", "qip_baseline", "no_demo_template", "no_parsing_template", "demo_filter"):
            p.add_argument(f"--{name.replace('_', '-')}", action="store_true")
    if command == "few-shot-vqa":
        p.add_argument("--train-questions")
        p.add_argument("--train-annotations")
        p.add_argument("-K", dest="K", type=int, help="shots per way")
        p.add_argument("-C", dest="C", type=int, help="ways per episode")
        p.add_argument("--proportion", type=float)
        p.add_argument("--mode", action="append", choices=["binor", "bitfit", "full"],
                       help="fine-tuning strategy (repeatable)")
        p.add_argument("--seed", type=int)
        p.add_argument("--epochs", type=int)
    if command == "entailment":
        p.add_argument("--direction", choices=["text->image", "image->text"])
        p.add_argument("--no-masked-control", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clipzero", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    for command, help_text in (("zero-shot-vqa", "prompt-based zero-shot VQA"),
                               ("few-shot-vqa", "episodic few-shot fine-tuning and evaluation"),
                               ("entailment", "cross-modality entailment transfer")):
        _add_run_args(sub.add_parser(command, help=help_text), command)
    rep = sub.add_parser("report", help="tabulate result files from earlier runs")
    rep.add_argument("results", nargs="+", type=Path)
    return parser


def resolve_config(args: argparse.Namespace) -> tuple[RunConfig, dict | None]:
    overrides: dict = {}
    for text in args.set:
        key, value = parse_override(text)
        overrides[key] = value
    for flag, key in _FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    for flag, key in _SWITCHES.items():
        if getattr(args, flag, False):
            overrides[key] = flag != "no_masked_control"
    if getattr(args, "mode", None):
        overrides["few_shot.modes"] = args.mode
    overrides["command"] = args.command
    manifest = None
    if args.replay is not None:
        manifest = json.loads(args.replay.read_text())
        if "config" not in manifest:
            raise ClipZeroError(f"{args.replay} is not a run manifest")
        cfg = build_config(manifest["config"], overrides)
    elif args.config is not None:
        cfg = load_config(args.config, overrides)
    else:
        cfg = build_config({}, overrides)
    return cfg, manifest


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            print(report(args.results))
            return 0
        cfg, manifest = resolve_config(args)
        if manifest is not None:
            check_replay(manifest, cfg)
        outcome = RUNNERS[cfg.command](cfg)
        print(json.dumps({"status": "ok", "command": cfg.command, "artifacts": outcome.artifacts,
                          "summary": outcome.summary}, indent=1, sort_keys=True, default=str))
        return 0
    except (ClipZeroError, OSError) as e:
        print(json.dumps({"status": "error", "error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
