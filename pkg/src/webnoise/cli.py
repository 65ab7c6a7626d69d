"""Command line interface.

Exit codes: 0 success, 1 user error (bad flags, bad config, missing inputs,
refusing to overwrite), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import harness
from .config import ConfigError, default_config_text, load_config


class UserError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); bad flags are user errors
        raise UserError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="webnoise", description="Noise-robust training experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=(name != "report"), help="experiment config file")
        p.add_argument("--out", default=None, help="output root (overrides [run] out_dir)")
        p.add_argument("--force", action="store_true", help="redo completed runs")
        if name in ("pretrain", "probe", "detect", "train", "cotrain"):
            p.add_argument("--seed", type=int, default=None, help="run a single seed")
        return p

    add("build-data", "generate the corpus and the noisy manifest")
    add("pretrain", "unsupervised contrastive pretraining of the encoder")
    add("probe", "per-block linear separability of ID vs OOD (oracle probe)")
    add("detect", "detector quality + naive ignore-the-noise accuracy table")
    add("train", "noise-robust training with the configured detector schedule")
    add("cotrain", "two-network co-training")
    rep = add("report", "aggregate logged artifacts into mean/std tables")
    rep.add_argument("--report-dir", default=None)
    show = sub.add_parser("show-config", help="print the default config file")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    if args.command == "show-config":
        print(default_config_text(), end="")
        return 0

    device = os.environ.get("WEBNOISE_DEVICE", "cpu")
    log = lambda msg: print(msg, flush=True)

    try:
        cfg = None
        out = args.out
        if getattr(args, "config", None):
            cfg = load_config(args.config)
            out = out or cfg["run.out_dir"]
        if args.command == "report":
            if out is None:
                raise UserError("report needs --out or a --config with [run] out_dir")
            written = harness.run_report(out, getattr(args, "report_dir", None))
            log(f"report tables: {', '.join(written) if written else '(no artifacts found)'}")
            return 0
        if cfg is None:
            raise UserError("--config is required")
        if args.command == "build-data":
            path = harness.run_build_data(cfg, out, force=args.force)
            log(f"dataset written to {path}")
        elif args.command == "pretrain":
            path = harness.run_pretrain(cfg, out, device=device, force=args.force, log_fn=log)
            log(f"encoder checkpoint at {path}")
        elif args.command == "probe":
            per_block = harness.run_probe(cfg, out, device=device, force=args.force, seed=args.seed)
            for block, score in sorted(per_block.items()):
                log(f"block {block}: auroc {score:.4f}")
        elif args.command == "detect":
            result = harness.run_detect(cfg, out, device=device, seed=args.seed, force=args.force, log_fn=log)
            for row in result["table"]:
                log(
                    f"{row['metric']:>12}: auroc={row['auroc']} "
                    f"recall_clean={row['recall_clean']} recall_noise={row['recall_noise']} "
                    f"accuracy={row['accuracy']:.2f}"
                )
        elif args.command == "train":
            results = harness.run_train(cfg, out, device=device, seed=args.seed, force=args.force, log_fn=log)
            for r in results:
                log(f"best accuracy {r.best_accuracy:.2f} (epoch {r.best_epoch}), final {r.final_accuracy:.2f}")
        elif args.command == "cotrain":
            results = harness.run_cotrain(cfg, out, device=device, seed=args.seed, force=args.force, log_fn=log)
            for r in results:
                log(
                    f"[{r.strategy.value}] ensemble best {r.best_accuracy['ensemble']:.2f}, "
                    f"individuals {r.best_accuracy['net_a']:.2f}/{r.best_accuracy['net_b']:.2f}"
                )
        return 0
    except (ConfigError, FileNotFoundError, harness.RunExists, UserError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
