"""Run the desk ablation and print the directional checks.

    python scripts/ablation.py --seeds 0 1 2 3 4 [--data data/desk] [--out runs/ablation]
"""

from __future__ import annotations

import argparse
import time

from fdlab.data import load_corpus
from fdlab.experiments import DESK_VARIANTS, directional_checks, mc_ordering, run_ablation


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data", default="data/desk")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--variants", nargs="+", default=list(DESK_VARIANTS))
    ap.add_argument("--out")
    ap.add_argument("--skip-mc", action="store_true")
    args = ap.parse_args()
    corpus = load_corpus(args.data, "char")
    t0 = time.perf_counter()
    results = run_ablation(corpus, args.seeds, args.variants, out_dir=args.out, progress=print)
    if {"none", "FD", "PI"} <= set(args.variants):
        for c in directional_checks(results):
            print(f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.detail}")
    if not args.skip_mc and results.get("FD-half"):
        check, table = mc_ordering(corpus, results["FD-half"])
        for k, vals in table.items():
            print(f"MC{k}: " + " ".join(f"{v:.4f}" for v in vals))
        print(f"{'PASS' if check.passed else 'FAIL'} {check.name}: {check.detail}")
    print(f"total {time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
