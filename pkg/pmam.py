#!/usr/bin/env python3
import argparse
import logging
import sys
from typing import Any, Dict, List, Optional

from constants.config import APP_DESCRIPTION, PRESETS
from utils.errors import PmamError
from utils.init import setup_logging
from utils.pipeline import (
    cmd_analyze,
    cmd_evaluate,
    cmd_experiment,
    cmd_finetune,
    cmd_gen_data,
    cmd_pretrain,
)
from utils.run_config import RunConfig, load_config

logger = logging.getLogger("pmam")

LOSS_CHOICES = {"bce": "prototype_bce", "infonce": "info_nce"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description=APP_DESCRIPTION)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML configuration file")
    common.add_argument("--seed", type=int, help="Master seed")
    common.add_argument("--out", help="Output directory (default: $PMAM_OUT_DIR or runs/default)")
    common.add_argument("--preset", choices=sorted(PRESETS), help="Stage-size preset")
    common.add_argument("--iterations", type=int, help="Number of E/M pretraining iterations")
    common.add_argument("--loss", choices=sorted(LOSS_CHOICES), help="Masked-model objective")
    common.add_argument("--proto", choices=["gmm", "kmeans"], help="Prototype model")
    common.add_argument("--no-mask", action="store_true", help="Disable masking (every frame supervised)")
    common.add_argument("--log-level", help="Logging level (default: $PMAM_LOG_LEVEL or INFO)")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="Generate the synthetic dataset")
    sub.add_parser("pretrain", parents=[common], help="Iterative prototype/masked-model pretraining")

    finetune = sub.add_parser("finetune", parents=[common], help="Mean-teacher fine-tuning")
    finetune.add_argument("--checkpoint", help="Pretraining checkpoint (default: last iteration)")

    evaluate = sub.add_parser("evaluate", parents=[common], help="Score a fine-tuned model")
    evaluate.add_argument("--checkpoint", help="Fine-tuned checkpoint (default: <out>/finetune)")
    evaluate.add_argument("--split", default="validation", choices=["validation", "strong"])
    evaluate.add_argument("--no-median-filter", action="store_true", help="Threshold raw probabilities")
    evaluate.add_argument("--median-window", type=int, help="Odd median filter length in frames")

    analyze = sub.add_parser("analyze", parents=[common], help="Pseudo-label correlation analysis")
    analyze.add_argument("--iteration", type=int, help="Pretraining iteration to analyze (default: last)")

    sub.add_parser("experiment", parents=[common], help="Run the iteration and ablation grid")
    return parser


def config_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    overrides: Dict[str, Any] = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out:
        overrides["out_dir"] = args.out
    if args.iterations is not None:
        overrides.setdefault("pretrain", {})["iterations"] = args.iterations
    if args.loss:
        overrides.setdefault("loss", {})["loss_kind"] = LOSS_CHOICES[args.loss]
    if args.proto:
        overrides.setdefault("proto", {})["kind"] = args.proto
    if args.no_mask:
        overrides.setdefault("mask", {})["enabled"] = False
    if getattr(args, "no_median_filter", False):
        overrides.setdefault("eval", {})["median_filter"] = False
    if getattr(args, "median_window", None) is not None:
        overrides.setdefault("eval", {})["median_window"] = args.median_window
    return overrides


def run(args: argparse.Namespace) -> None:
    config: RunConfig = load_config(args.config, args.preset, config_overrides(args))
    if args.command == "gen-data":
        manifest = cmd_gen_data(config)
        print(
            f"Generated {len(manifest.strong_clips)} strong, {len(manifest.weak_clips)} weak, "
            f"{len(manifest.unlabeled_clips)} unlabeled, {len(manifest.validation_clips)} validation clips"
        )
    elif args.command == "pretrain":
        for path in cmd_pretrain(config):
            print(path)
    elif args.command == "finetune":
        result = cmd_finetune(config, args.checkpoint)
        print(f"Best epoch {result.best_epoch}: validation frame F1 {result.best_frame_f1:.4f}")
    elif args.command == "evaluate":
        report = cmd_evaluate(config, args.checkpoint, split=args.split)
        print(f"frame_macro_f1: {report['frame_macro_f1']:.4f}")
        print(f"event_f1: {report['event_f1']:.4f}")
    elif args.command == "analyze":
        matrix, _, permutation = cmd_analyze(config, args.iteration)
        print(f"Correlation matrix {matrix.values.shape[0]}x{matrix.values.shape[1]}, order {permutation.tolist()}")
    elif args.command == "experiment":
        results = cmd_experiment(config)
        print(results[results["table"] != "grid"].to_string(index=False))


def main(argv: Optional[List[str]] = None) -> int:
    """
    Parse the command line, run one subcommand and map errors to exit codes.

    Returns:
        int: 0 on success, the error's exit code otherwise
    """
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    try:
        run(args)
    except PmamError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
