"""Command-line entry point.

    diffshape <command> --manifest <path> --config <path>
              [--out <dir>] [--seed <int>] [--model <gpdssm|lddmm|angles|all>]

Commands run the workflow stages in order: generate, preprocess, fit,
infer, classify, evaluate, visualize. Exit codes: 0 success, 2 input or
validation problem, 3 numerical failure, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import (ConditioningError, DivergenceError, EmptyInputError,
                     ExtractionFailedError, MeshFormatError, NumericalError,
                     ValidationError)
from .pipeline import (cmd_classify, cmd_evaluate, cmd_fit, cmd_generate,
                       cmd_infer, cmd_preprocess, cmd_visualize, load_config,
                       load_manifest)

_COMMANDS = {
    "generate": "synthesise the labelled cup dataset and its manifest",
    "preprocess": "extract cup regions and align them to a reference",
    "fit": "train the latent model and/or the geodesic baseline",
    "infer": "embed test rows into the trained model(s)",
    "classify": "score test rows with the trained classifiers",
    "evaluate": "write metric reports and ROC curves",
    "visualize": "write class averages, significance and mode meshes",
}

_VALIDATION_ERRORS = (ValidationError, MeshFormatError, EmptyInputError,
                      ExtractionFailedError)
_NUMERICAL_ERRORS = (NumericalError, DivergenceError, ConditioningError)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="diffshape",
        description="correspondence-free statistical shape modelling of "
                    "hip-socket surfaces")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in _COMMANDS.items():
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--manifest", required=True,
                        help="dataset manifest CSV (written by generate, "
                             "read by every other command)")
        sp.add_argument("--config", required=True,
                        help="key=value configuration file")
        sp.add_argument("--out", default=None,
                        help="artifact directory (default: manifest's directory)")
        sp.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
        sp.add_argument("--model", default="all",
                        choices=("gpdssm", "lddmm", "angles", "all"),
                        help="which model(s) the command applies to")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config)
        if args.command == "generate":
            cmd_generate(args.manifest, config, out_dir=args.out,
                         seed=args.seed)
            return 0
        manifest = load_manifest(args.manifest)
        out = args.out if args.out is not None else manifest.base_dir
        Path(out).mkdir(parents=True, exist_ok=True)
        if args.command == "preprocess":
            cmd_preprocess(manifest, config, out, seed=args.seed)
        elif args.command == "fit":
            cmd_fit(manifest, config, out, seed=args.seed, model=args.model)
        elif args.command == "infer":
            cmd_infer(manifest, config, out, seed=args.seed, model=args.model)
        elif args.command == "classify":
            cmd_classify(manifest, config, out, seed=args.seed,
                         model=args.model)
        elif args.command == "evaluate":
            cmd_evaluate(manifest, config, out, seed=args.seed,
                         model=args.model)
        elif args.command == "visualize":
            cmd_visualize(manifest, config, out, seed=args.seed)
    except _VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except _NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"i/o failure: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
