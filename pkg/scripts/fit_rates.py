#!/usr/bin/env python3
"""Print least-squares convergence rates of history files.

Usage: fit_rates.py FILE [FILE ...] [--window N] [--columns a,b,c]
"""
import argparse
import sys

from macert.bench import read_dat, rate_fit


def main(argv=None) -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("files", nargs="+")
    ap.add_argument("--window", type=int, default=None, help="use only the last N rows")
    ap.add_argument(
        "--columns", default="Linferr,LHS,H1error,H2error,eta2",
        help="comma-separated column names",
    )
    args = ap.parse_args(argv)
    columns = args.columns.split(",")
    header = "file".ljust(42) + "".join(c.rjust(10) for c in columns)
    print(header)
    for path in args.files:
        rows = read_dat(path)
        cells = []
        for col in columns:
            try:
                cells.append(f"{rate_fit(rows, col, window=args.window):+.3f}".rjust(10))
            except ValueError:
                cells.append("n/a".rjust(10))
        print(path.ljust(42) + "".join(cells))
    return 0


if __name__ == "__main__":
    sys.exit(main())
