#!/usr/bin/env python3
"""Run the benchmark convergence sweeps at desk scale and write CSVs.

Usage:
    python scripts/convergence_sweeps.py [ac100 ac_log burgers hj] \
        [--scale desk|paper] [--out DIR]

Each figure id maps to a pre-baked sweep plan; desk scale finishes in
minutes, paper scale is opt-in and can take hours. Results land in
DIR/<figure>_<scale>/ as results.csv, plot.csv and summary.txt.
"""

import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from fbsde_llr.cli import CSV_HEADER, PLOT_HEADER, emit_csv  # noqa: E402
from fbsde_llr.harness import (evaluate_reproduction, plot_rows,  # noqa: E402
                               reproduce_plan, run_sweep)


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("figures", nargs="*",
                    default=["ac100", "ac_log", "burgers", "hj"],
                    choices=["ac100", "ac_log", "burgers", "hj"])
    ap.add_argument("--scale", default="desk", choices=["desk", "paper"])
    ap.add_argument("--out", default="sweep_results")
    args = ap.parse_args()

    any_fail = False
    for fig in args.figures:
        plan = reproduce_plan(fig, args.scale)
        print(f"== {fig} ({args.scale}): {plan.note}")
        t0 = time.perf_counter()
        result = run_sweep(plan.sweep)
        elapsed = time.perf_counter() - t0
        passed, lines = evaluate_reproduction(plan, result)
        out = Path(args.out) / f"{fig}_{args.scale}"
        out.mkdir(parents=True, exist_ok=True)
        emit_csv(result.rows, out / "results.csv", header=CSV_HEADER)
        emit_csv(plot_rows(result), out / "plot.csv", header=PLOT_HEADER)
        lines.append(f"total runtime: {elapsed:.1f} s")
        (out / "summary.txt").write_text("\n".join(lines) + "\n",
                                         encoding="utf-8")
        for line in lines:
            print("   " + line)
        any_fail = any_fail or not passed
    return 1 if any_fail else 0


if __name__ == "__main__":
    sys.exit(main())
