"""Command-line entry point: ``ditbs <subcommand> [flags]``.

Exit codes: 0 success, 2 missing stage / cache mismatch / bad input,
3 numeric failure, 64 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import costmodel, pipeline
from .model import DiTConfig
from .pipeline import MissingStage, RunConfig, RunDirectory
from .runio import atomic_write_text
from .skip import CacheMismatch, SkipPlan, compute_k
from .train import MODES, NumericError

EXIT_OK, EXIT_STAGE, EXIT_NUMERIC, EXIT_USAGE = 0, 2, 3, 64
SUBCOMMANDS = ("make-dataset", "precompute", "train", "select-blocks", "generate",
               "costmodel", "eval", "plot")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _pair(text: str) -> tuple[int, int]:
    try:
        n, m = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N,M, got {text!r}") from None
    return n, m


def _ids(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated token ids, got {text!r}") from None


def build_parser() -> Parser:
    common = Parser(add_help=False)
    common.add_argument("--run", default="run", help="run directory (default: ./run)")
    common.add_argument("--config", help="initial config JSON (make-dataset only)")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--skip-ratio", type=float, help="fraction of blocks to skip")
    common.add_argument("--schedule", choices=("low_to_high", "high_to_low", "random", "fixed_resize"))
    common.add_argument("--iterations", type=int)
    common.add_argument("--force", action="store_true", help="rerun even if up to date")
    common.add_argument("-v", "--verbose", action="store_true")

    p = Parser(prog="ditbs", description="Block-skipping fine-tuning lab for a toy DiT.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    s = sub.add_parser("make-dataset", parents=[common], help="write dataset, pretrain base model")
    s.add_argument("--images", type=int, help="number of subject images")
    s.add_argument("--base-steps", type=int, help="base pretraining steps")

    s = sub.add_parser("select-blocks", parents=[common], help="build the masking distance table")
    s.add_argument("--checkpoint", action="append", help="fine-tuned checkpoint dir (repeatable)")
    s.add_argument("--embedder", help="JSON file of external embedding vectors")

    s = sub.add_parser("precompute", parents=[common], help="precompute residual features")
    s.add_argument("--skip", type=_pair, metavar="N,M", help="explicit skip plan")
    s.add_argument("--staged", action="store_true", help="load blocks a window at a time")
    s.add_argument("--window", type=int, help="blocks resident at once when staged")

    s = sub.add_parser("train", parents=[common], help="train LoRA adapters")
    s.add_argument("--skip", type=_pair, metavar="N,M", help="explicit skip plan")
    s.add_argument("--mode", choices=MODES, default="residual")

    s = sub.add_parser("generate", parents=[common], help="sample images with the adapted model")
    s.add_argument("--prompt", type=_ids, help="token ids, e.g. 1,16,9,12")
    s.add_argument("--steps", type=int, default=8)
    s.add_argument("--count", type=int, default=4)
    s.add_argument("--size", type=int)

    s = sub.add_parser("costmodel", parents=[common], help="analytic memory / FLOPs table")
    s.add_argument("--preset", default="flux-like", choices=costmodel.PRESETS + ("toy",))
    s.add_argument("--spec", help="architecture JSON instead of a preset")
    s.add_argument("--skip", type=float, nargs="*", default=[0.3, 0.4, 0.5], help="skip ratios")
    s.add_argument("--resolution", type=int, help="full training resolution")
    s.add_argument("--patch-resolution", type=int, help="training resolution with patch sampling")
    s.add_argument("--rank", type=int, help="LoRA rank")
    s.add_argument("--format", choices=("md", "csv"), default="md")
    s.add_argument("--out", help="write the table here instead of stdout")

    s = sub.add_parser("eval", parents=[common], help="held-out loss report")
    s.add_argument("--ablation", action="store_true", help="also run the skip ablation")

    s = sub.add_parser("plot", parents=[common], help="SVG loss curve / heatmap")
    s.add_argument("--metrics", help="metrics CSV (default: run/metrics.csv)")
    s.add_argument("--distances", help="distance table CSV (default: run/selection/distances.csv)")
    return p


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    t = cfg.train.to_dict()
    if args.seed is not None:
        t["seed"] = args.seed
    if args.skip_ratio is not None:
        t.update(skip_ratio=args.skip_ratio, skip_n=None, skip_m=None)
    if args.schedule is not None:
        t["schedule"] = args.schedule
    if args.iterations is not None:
        t["iterations"] = args.iterations
    if getattr(args, "skip", None) is not None and args.command in ("precompute", "train"):
        t.update(skip_n=args.skip[0], skip_m=args.skip[1])
    d = cfg.to_dict()
    d["train"] = t
    if args.command == "make-dataset":
        if args.images is not None:
            d["data"]["n"] = args.images
        if args.base_steps is not None:
            d["base"]["steps"] = args.base_steps
    if args.command == "select-blocks":
        if args.checkpoint:
            d["select"]["checkpoints"] = args.checkpoint
        if args.embedder:
            d["select"]["embedder"] = args.embedder
    if args.command == "precompute":
        if args.staged:
            d["precompute"]["staged"] = True
        if args.window is not None:
            d["precompute"]["window"] = args.window
    return RunConfig.from_dict(d)


def _load_config(run: RunDirectory, args) -> RunConfig:
    if args.command == "make-dataset":
        if args.config:
            cfg = RunConfig.from_dict(json.loads(Path(args.config).read_text()))
        elif run.config.exists():
            cfg = run.load_config()
        else:
            cfg = RunConfig()
    else:
        if args.config:
            raise UsageError("--config is only accepted by make-dataset")
        cfg = run.load_config()
    cfg = _apply_overrides(cfg, args)
    run.save_config(cfg)
    return cfg


def _costmodel(args) -> str:
    if args.spec:
        spec = costmodel.load_spec(args.spec)
    elif args.preset == "toy":
        run = RunDirectory(args.run)
        mcfg = run.load_config().model if run.config.exists() else DiTConfig()
        spec = costmodel.ArchSpec.from_dit_config(mcfg)
    else:
        spec = costmodel.load_preset(args.preset)
    res = args.resolution or (512 if spec.name != "toy" else 64)
    patch_res = args.patch_resolution or res // 2
    reports = [costmodel.memory_report(spec, s, res, rank=args.rank) for s in ("full_ft", "lora")]
    for ratio in args.skip or []:
        k = compute_k(ratio, spec.depth)
        plan = SkipPlan(k // 2, k - k // 2, spec.depth)
        reports.append(costmodel.memory_report(spec, "lora_blockskip", patch_res, plan, args.rank))
    table = costmodel.markdown_table(reports) if args.format == "md" else costmodel.csv_table(reports)
    if args.format == "md":
        table = f"{spec.name}: {spec.note}\n\n" + table
    return table


def run_command(args) -> int:
    if args.command == "costmodel":
        table = _costmodel(args)
        if args.out:
            atomic_write_text(Path(args.out), table)
        else:
            sys.stdout.write(table)
        return EXIT_OK
    run = RunDirectory(args.run)
    if args.command == "plot":
        # plotting reads only the CSVs; no run config is needed
        for path in pipeline.plot_stage(run, args.metrics and Path(args.metrics),
                                        args.distances and Path(args.distances)):
            print(path)
        return EXIT_OK
    cfg = _load_config(run, args)
    cmd = args.command
    if cmd == "make-dataset":
        pipeline.make_dataset(run, cfg, args.force)
    elif cmd == "select-blocks":
        pipeline.select_blocks(run, cfg, args.force)
    elif cmd == "precompute":
        pipeline.precompute_stage(run, cfg, args.force)
    elif cmd == "train":
        pipeline.train_stage(run, cfg, args.mode, args.force)
    elif cmd == "generate":
        for path in pipeline.generate_stage(run, cfg, args.prompt, args.steps, args.count, args.size):
            print(path)
    elif cmd == "eval":
        sys.stdout.write(pipeline.eval_stage(run, cfg, args.ablation))
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return run_command(args)
    except UsageError as e:
        print(f"ditbs: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (MissingStage, CacheMismatch) as e:
        print(f"ditbs: {e}", file=sys.stderr)
        return EXIT_STAGE
    except NumericError as e:
        print(f"ditbs: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, FileNotFoundError, KeyError) as e:
        print(f"ditbs: invalid input: {e}", file=sys.stderr)
        return EXIT_STAGE
