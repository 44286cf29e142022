"""Command-line entry point.

Verbs: generate, train-compression, train-predictor, infer, evaluate,
profile, reproduce-all. Each takes a YAML run config; `--set key=value`
flags override config keys (flag > config file), `--output-root` or the
CO2SURRO_OUTPUT_ROOT environment variable override the output root.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import os
import sys
import traceback

from . import experiments as exp

OUTPUT_ROOT_ENV = "CO2SURRO_OUTPUT_ROOT"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="co2surro",
                                     description="CO2 rock-dissolution surrogate experiments")
    sub = parser.add_subparsers(dest="verb", required=True)

    def add(verb, help_text):
        p = sub.add_parser(verb, help=help_text)
        p.add_argument("-c", "--config", required=True, help="YAML run config")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override a config key (dotted path)")
        p.add_argument("--output-root", default=None,
                       help=f"output root (default: config value or ${OUTPUT_ROOT_ENV})")
        return p

    add("generate", "generate a synthetic dataset")
    add("train-compression", "train the AE or AAE compressor").add_argument(
        "--kind", choices=["ae", "aae"], default=None, help="override compression.kind")
    add("train-predictor", "train the configured predictor (one-step, then rollout if configured)")
    add("infer", "batch autoregressive inference").add_argument(
        "--model", default=None, help="model name (default: derived from config)")
    add("evaluate", "metrics report, plots and summary tables").add_argument(
        "--models", default=None, help="comma-separated model names")
    add("profile", "memory/time comparison table")
    add("reproduce-all", "full eight-model comparison plus baseline")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    output_root = args.output_root or os.environ.get(OUTPUT_ROOT_ENV)
    try:
        cfg = exp.load_config(args.config, args.overrides, output_root)
        if args.verb == "generate":
            out = exp.cmd_generate(cfg)
            print(f"dataset written to {out}")
        elif args.verb == "train-compression":
            ckpt = exp.cmd_train_compression(cfg, args.kind)
            print(f"checkpoint written to {ckpt}")
        elif args.verb == "train-predictor":
            ckpt = exp.cmd_train_predictor(cfg)
            print(f"checkpoint written to {ckpt}")
        elif args.verb == "infer":
            out = exp.cmd_infer(cfg, args.model)
            print(f"predictions written to {out}")
        elif args.verb == "evaluate":
            models = args.models.split(",") if args.models else None
            exp.cmd_evaluate(cfg, models)
            print(f"reports written under {cfg.run_dir / 'reports'}")
        elif args.verb == "profile":
            table = exp.cmd_profile(cfg)
            print(table.to_string(index=False))
        elif args.verb == "reproduce-all":
            exp.cmd_reproduce_all(cfg)
            print(f"full comparison written under {cfg.run_dir}")
    except exp.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {exc}", file=sys.stderr)
        traceback.print_exc()
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
