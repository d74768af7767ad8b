"""Monte Carlo comparison of Q-shared and penalized Q-shared over the bundled scenarios.

    python scripts/run_comparison.py --reps 200 --out comparison.csv
"""

from __future__ import annotations

import argparse
import csv
import sys
import time

import numpy as np

from qshared.config import bundled, bundled_scenarios
from qshared.model import ModelSpec
from qshared.simulator import Scenario, run_comparison


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--reps", type=int, default=200)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--eval-n", type=int, default=10_000)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out", default="comparison.csv")
    args = ap.parse_args(argv)

    spec = ModelSpec.load(bundled("smart3.yaml"))
    rows = []
    for path in bundled_scenarios():
        sc = Scenario.load(path)
        t0 = time.time()
        cells = run_comparison(sc, spec, reps=args.reps, seed=args.seed, eval_n=args.eval_n, workers=args.workers)
        rows += [c.as_row() for c in cells]
        M = {m: np.mean([c.M for c in cells if c.method == m]) for m in ("q_shared", "penalized")}
        print(f"{sc.name}: Q-shared M={100 * M['q_shared']:.2f}  penalized M={100 * M['penalized']:.2f}"
              f"  ({time.time() - t0:.0f}s)", flush=True)
    with open(args.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
