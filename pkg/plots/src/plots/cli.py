"""Command line front end: plots <kind> --in <path> --out <png>."""
import argparse
import sys

from .figspec import KINDS, FigureSpec, PlotInputError
from .render import render


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="plots",
        description="Render figures from blochlab artifacts.")
    parser.add_argument("kind", choices=KINDS)
    parser.add_argument("--in", dest="inp", required=True,
                        help="input artifact (CSV, report JSON, or directory)")
    parser.add_argument("--out", required=True, help="output png path")
    args = parser.parse_args(argv)
    try:
        out = render(FigureSpec(args.kind, args.inp, args.out))
    except PlotInputError as exc:
        print(f"plots: {exc}", file=sys.stderr)
        return 1
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
