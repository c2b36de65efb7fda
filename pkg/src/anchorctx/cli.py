"""Command-line entry point.

Exit codes: 0 success, 2 configuration or validation error, 3 missing
upstream artifact (e.g. the detector checkpoint before refinement).
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .config import OUTPUT_ROOT_ENV, load_config, parse_overrides
from .errors import ConfigurationError, DatasetParseError, MissingDependencyError, ValidationError
from .pipeline import confidence_stage, eval_stage, load_acd, load_ccd, train_stage
from .synthetic import SyntheticSpec, generate_synthetic

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="anchorctx", description="Anchor-context action detection with diffusion refinement.")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset from a JSON spec")
    g.add_argument("spec")
    g.add_argument("--out", help="dataset directory (default: <output root>/<spec stem>)")

    t = sub.add_parser("train", help="train one stage")
    t.add_argument("config")
    t.add_argument("--stage", choices=("acd", "ccd"), required=True)

    e = sub.add_parser("eval", help="evaluate detector or refined predictions on the test split")
    e.add_argument("config")
    e.add_argument("--source", choices=("acd", "ccd"), required=True)
    e.add_argument("--predictions", help="score this JSON-lines prediction file instead of running a model")

    r = sub.add_parser("report-confidence", help="interval-width confidence table")
    r.add_argument("config")
    return ap


def _gen_data(args) -> int:
    spec = SyntheticSpec.from_file(args.spec)
    out = Path(args.out) if args.out else Path(os.environ.get(OUTPUT_ROOT_ENV, ".")) / Path(args.spec).stem
    generate_synthetic(spec, out)
    print(f"wrote dataset to {out}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args, extra = _parser().parse_known_args(argv)
    try:
        if args.command == "gen-data":
            if extra:
                raise ConfigurationError(f"unexpected arguments: {' '.join(extra)}")
            return _gen_data(args)
        cfg = load_config(args.config, parse_overrides(extra))
        if args.command == "train":
            out = train_stage(cfg, args.stage)
            print(f"{args.stage} checkpoint written to {out}")
        elif args.command == "eval":
            if args.source == "ccd" and args.predictions is None:
                # refined evaluation always needs both checkpoints
                load_acd(cfg.output_path)
                load_ccd(cfg.output_path)
            summary = eval_stage(cfg, args.source, args.predictions)
            print(",".join(summary))
            print(",".join(f"{v:.6f}" for v in summary.values()))
        else:
            sys.stdout.write(confidence_stage(cfg))
    except MissingDependencyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ConfigurationError, ValidationError, DatasetParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
