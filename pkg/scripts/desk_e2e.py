"""Synthetic end-to-end run across all protocols, optionally twice to check reproducibility.

    python3 scripts/desk_e2e.py --out /tmp/desk --seed 0 [--rerun]
"""

import argparse
import logging
import time
from pathlib import Path

from ghclnet.evaluation import render_report
from ghclnet.suite import METRIC_FILES, DeskSuiteConfig, run_desk_suite


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--per-class", type=int, default=100)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--rerun", action="store_true", help="repeat with the same seed and diff metric files")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")

    cfg = DeskSuiteConfig(n_per_class=args.per_class, seed=args.seed, epochs=args.epochs)
    t0 = time.perf_counter()
    results = run_desk_suite(cfg, args.out / "run1")
    print(f"run1: {time.perf_counter() - t0:.1f}s")
    for reps in results.values():
        print(render_report(reps))
    if args.rerun:
        run_desk_suite(cfg, args.out / "run2")
        diffs = [str(p.relative_to(args.out / "run1"))
                 for name in results for f in METRIC_FILES
                 for p in [args.out / "run1" / "runs" / name / f]
                 if p.read_bytes() != (args.out / "run2" / "runs" / name / f).read_bytes()]
        print("rerun identical" if not diffs else f"rerun differs: {diffs}")


if __name__ == "__main__":
    main()
