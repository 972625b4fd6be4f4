#!/usr/bin/env python3
"""Measure how solver runtime scales with the number of time steps N and
particles M on the double-well reaction benchmark.

Usage:
    python scripts/runtime_scaling.py [--d 100] [--out scaling.csv]

Prints doubling ratios and fitted log-log exponents; per-N runtimes go to
the CSV. Each cell is timed sequentially with BLAS pinned, so wall times
are comparable across rows.
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from fbsde_llr.cli import emit_csv  # noqa: E402
from fbsde_llr.harness import scaling_report  # noqa: E402


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--d", type=int, default=100)
    ap.add_argument("--n-list", default="400,800,1600,3200")
    ap.add_argument("--m-list", default="100,200")
    ap.add_argument("--out", default="scaling.csv")
    args = ap.parse_args()

    n_list = [int(s) for s in args.n_list.split(",")]
    m_list = [int(s) for s in args.m_list.split(",")]
    report = scaling_report("allen_cahn_dw", args.d,
                            n_list=n_list, m_list=m_list, horizon=0.3)
    for line in report.summary_lines():
        print(line)
    header = ["N", "M", "runtime_s", "time_forward_s",
              "time_regression_s", "time_newton_s"]
    emit_csv(report.rows, Path(args.out), header=header)
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
