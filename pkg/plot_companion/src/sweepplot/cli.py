"""CLI: ``plot sweep <csv> <out>`` and ``plot relperf <csv> <out>``.

Exit codes: 0 ok, 1 bad input, 2 schema mismatch. Nothing is written on
failure, and input CSVs are never modified.
"""

from __future__ import annotations

import argparse
import sys

from .charts import plot_relperf, plot_sweep
from .reader import BadInput, RelPerfFrame, SchemaMismatch, SweepFrame


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="plot", description="benchmark CSV charting")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("sweep", help="metric vs. savings, one line per sweep mode")
    s.add_argument("csv")
    s.add_argument("out")
    r = sub.add_parser("relperf", help="relative-performance ablation bars")
    r.add_argument("csv")
    r.add_argument("out")
    args = p.parse_args(argv)
    try:
        if args.command == "sweep":
            frame = SweepFrame.read(args.csv)
            if frame.skipped_errors:
                print(f"warning: skipped {frame.skipped_errors} error row(s)",
                      file=sys.stderr)
            if not frame.rows:
                print("error: no plottable sweep rows", file=sys.stderr)
                return 1
            plot_sweep(frame, args.out)
        else:
            plot_relperf(RelPerfFrame.read(args.csv), args.out)
    except SchemaMismatch as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (BadInput, ValueError, ZeroDivisionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
