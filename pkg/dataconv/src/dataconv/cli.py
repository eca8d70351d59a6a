"""dataconv command line: convert sources to EPDS, verify EPDS files."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import convert as conv
from . import epds, verify

log = logging.getLogger("dataconv")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2


def cmd_convert(args) -> int:
    spec = conv.SourceSpec.from_json(args.spec)
    summary = conv.convert(spec, args.out)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_verify(args) -> int:
    report = verify.verify(args.data, args.manifest, min_instances=args.min_instances)
    for line in report.lines():
        print(line)
    return EXIT_OK if report.ok else EXIT_DATA


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dataconv",
        description="Convert corpora to EPDS v1 task datasets and verify them")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert", help="convert a source corpus to EPDS")
    p.add_argument("--spec", required=True, help="JSON source spec")
    p.add_argument("--out", required=True, help="output .epds path")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("verify", help="re-validate an EPDS file independently")
    p.add_argument("data", help="path to .epds file")
    p.add_argument("--manifest", default=None)
    p.add_argument("--min-instances", type=int, default=2,
                   help="warn about classes below this count")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("DATACONV_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return EXIT_OK if err.code == 0 else EXIT_CONFIG
    try:
        return args.func(args)
    except conv.SpecError as err:
        log.error("spec error: %s", err)
        return EXIT_CONFIG
    except (conv.SourceError, epds.FormatError, OSError) as err:
        log.error("data error: %s", err)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
