"""Render figure specs from the command line."""

from __future__ import annotations

import argparse
import sys

from .render import render_spec_file
from .spec import SpecError


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="ebitplot",
        description="Render figures from simulation result CSVs.")
    parser.add_argument("specs", nargs="+", metavar="SPEC",
                        help="figure spec JSON files")
    parser.add_argument("--out-dir", metavar="DIR", default="out",
                        help="directory for the images (default: out)")
    args = parser.parse_args(argv)

    status = 0
    for spec_path in args.specs:
        try:
            print(render_spec_file(spec_path, args.out_dir))
        except (OSError, SpecError, ValueError) as exc:
            print(f"error: {spec_path}: {exc}", file=sys.stderr)
            status = 2
    return status


if __name__ == "__main__":
    sys.exit(main())
