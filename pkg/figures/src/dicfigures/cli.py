"""CLI: figures --kind K --in DIR --out FILE"""

from __future__ import annotations

import argparse
import sys

from .render import KINDS, FigureError, FigureSpec, render


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="figures",
        description="Render comparison figures from dicsim output CSVs.",
    )
    parser.add_argument("--kind", required=True, choices=KINDS)
    parser.add_argument("--in", dest="input_dir", required=True,
                        help="run-directory root (power_timeseries) or report directory")
    parser.add_argument("--out", required=True, help="output image file")
    parser.add_argument("--title", default=None)
    parser.add_argument("--dpi", type=int, default=120)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        out = render(FigureSpec(kind=args.kind, input_dir=args.input_dir,
                                output=args.out, dpi=args.dpi, title=args.title))
    except FigureError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
