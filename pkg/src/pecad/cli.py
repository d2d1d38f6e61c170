"""``pecad`` command line.

Exit status: 0 success (and NON_PE verdict for ``triage``), 2 PE alert from
``triage``, 1 any error including usage errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import torch

from . import workflow
from .config import RunConfig
from .dataset import Label

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_PE_ALERT = 2


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors, which would read as a PE alert
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration (defaults: desk scale)")
    common.add_argument("--seed", type=int, help="override the global seed")
    common.add_argument("--output-dir", help="override output_dir")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="pecad", description="CTPA pulmonary embolism triage")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a phantom cohort")
    p.add_argument("--pe", type=int, help="number of PE patients")
    p.add_argument("--non-pe", type=int, help="number of non-PE patients")

    sub.add_parser("split", parents=[common], help="assign patients to TRAIN/VAL/TEST")

    p = sub.add_parser("train", parents=[common], help="train one model")
    p.add_argument("target", choices=workflow.TARGETS)
    p.add_argument("--overwrite", action="store_true", help="replace an incompatible checkpoint")

    p = sub.add_parser("eval", parents=[common], help="evaluate all models on a split")
    p.add_argument("--split", default="TEST", type=str.upper, choices=["VAL", "TEST"])

    p = sub.add_parser("triage", parents=[common], help="triage one CT volume")
    p.add_argument("volume", help="path to a .ctvol.json header (or its stem)")
    p.add_argument("--out", help="directory for the report and overlays")

    sub.add_parser("show-config", parents=[common], help="print the resolved configuration")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    torch.use_deterministic_algorithms(True)
    try:
        run = RunConfig.load(args.config, seed=args.seed, output_dir=args.output_dir)
        if args.command == "show-config":
            print(run.dump(), end="")
            print(f"# config hash {run.hash}\n# run dir {run.run_dir}")
            return EXIT_OK
        if args.command == "synth":
            print(workflow.cmd_synth(run, args.pe, args.non_pe))
        elif args.command == "split":
            print(workflow.cmd_split(run))
        elif args.command == "train":
            print(workflow.cmd_train(run, args.target, overwrite=args.overwrite))
        elif args.command == "eval":
            path = workflow.cmd_eval(run, args.split)
            print(workflow.format_table(json.loads(path.read_text())))
            print(path)
        elif args.command == "triage":
            report, path = workflow.cmd_triage(run, args.volume, args.out)
            print(path)
            print(f"{report.patient_id}: {report.verdict.value} "
                  f"({len(report.flagged)} flagged slice(s))")
            return EXIT_PE_ALERT if report.verdict is Label.PE else EXIT_OK
    except workflow.UsageError as exc:
        print(f"pecad: usage error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"pecad: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
