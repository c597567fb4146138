"""Command-line entry point.

Every failure ends with exactly one line on stderr of the form::

    error: kind=<category> key=<config key or -> message=<text>

so scripts can split on the first two ``=``-separated fields.
"""
from __future__ import annotations

import argparse
import sys

from .harness import KINDS, MissingArtifacts, report, run
from .schemas import SchemaError
from .textconf import ConfigError

EXIT_CONFIG = 2
EXIT_RUN = 1


def _u64(text: str) -> int:
    try:
        value = int(text, 10)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an unsigned integer") from None
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError(f"{text} does not fit in 64 unsigned bits")
    return value


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _fail("usage", "-", message, EXIT_CONFIG)


def _fail(kind: str, key: str, message: str, status: int):
    message = " ".join(str(message).split())
    print(f"error: kind={kind} key={key or '-'} message={message}", file=sys.stderr)
    raise SystemExit(status)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="infouda", description="Domain-adaptation bound checks and training experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for kind in KINDS:
        p = sub.add_parser(kind, help=f"run a {kind} experiment")
        p.add_argument("--config", required=True, help="experiment file")
        p.add_argument("--out", help="output directory (overrides experiment.out)")
        p.add_argument("--seed", type=_u64, help="run this single seed instead of the configured list")
    p = sub.add_parser("report", help="summarize a run directory")
    p.add_argument("--out", required=True, help="run directory, or a directory of run directories")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            sys.stdout.write(report(args.out))
        else:
            path = run(args.config, args.out, kind=args.command, seed=args.seed)
            print(path)
    except ConfigError as exc:
        _fail("config", exc.key, str(exc), EXIT_CONFIG)
    except MissingArtifacts as exc:
        _fail("missing-artifacts", ",".join(exc.names), str(exc), EXIT_RUN)
    except SchemaError as exc:
        _fail("schema", "-", str(exc), EXIT_RUN)
    except Exception as exc:  # anything else is still reported on one line
        _fail(type(exc).__name__, "-", str(exc), EXIT_RUN)
    return 0


if __name__ == "__main__":
    sys.exit(main())
