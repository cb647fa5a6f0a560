"""Command-line entry point: ``tabular fit | evaluate | predict``.

Exit codes: 0 on success, 1 on a usage error, 2 when the command itself fails.
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
import tempfile
from pathlib import Path

from tabular.api import TabularModel
from tabular.config import load_config_file, validate
from tabular.data import read_csv
from tabular.errors import TabularError

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tabular", description="Train and apply deep models on CSV tables.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    fit = sub.add_parser("fit", help="train a model and save it")
    fit.add_argument("--config", required=True, help="YAML experiment config")
    fit.add_argument("--train", required=True, help="training CSV")
    fit.add_argument("--validation", help="validation CSV (default: random hold-out from --train)")
    fit.add_argument("--output-dir", required=True, help="directory for the checkpoint and metrics.jsonl")
    fit.add_argument("--seed", type=_u64, help="overrides trainer.seed")

    ev = sub.add_parser("evaluate", help="print test metrics as JSON")
    ev.add_argument("--model", required=True, help="checkpoint directory")
    ev.add_argument("--data", required=True, help="CSV with the target column")

    pr = sub.add_parser("predict", help="write predictions to CSV")
    pr.add_argument("--model", required=True, help="checkpoint directory")
    pr.add_argument("--data", required=True, help="input CSV")
    pr.add_argument("--out", required=True, help="output CSV")
    return parser


def _fit(args) -> None:
    raw = load_config_file(args.config)
    raw = {k: dict(v) if isinstance(v, dict) else v for k, v in raw.items()}
    if args.seed is not None:
        raw.setdefault("trainer", {})["seed"] = args.seed
    output = Path(args.output_dir)
    scratch = None
    experiment = raw.setdefault("experiment", {})
    if "log_dir" not in experiment:
        scratch = tempfile.mkdtemp(prefix="tabular-logs-")
        experiment["log_dir"] = scratch
    try:
        model = TabularModel(validate(raw))
        validation = read_csv(args.validation) if args.validation else None
        report = model.fit(read_csv(args.train), validation)
        model.save_model(output)
        shutil.copyfile(report.run_dir / "metrics.jsonl", output / "metrics.jsonl")
    finally:
        if scratch is not None:
            shutil.rmtree(scratch, ignore_errors=True)
    print(json.dumps(report.as_dict(), indent=2))


def _evaluate(args) -> None:
    model = TabularModel.load_from_checkpoint(args.model)
    print(json.dumps(model.evaluate(read_csv(args.data)), indent=2))


def _predict(args) -> None:
    model = TabularModel.load_from_checkpoint(args.model)
    model.predict(read_csv(args.data)).to_csv(args.out)


COMMANDS = {"fit": _fit, "evaluate": _evaluate, "predict": _predict}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    try:
        COMMANDS[args.command](args)
    except (TabularError, OSError, ValueError) as exc:
        print(f"tabular {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
