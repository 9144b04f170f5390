#!/usr/bin/env python3
"""Run every baseline preset over a synthetic benchmark and print average ranks.

Writes the per-run rows to a CSV (resumable), then ranks methods by mean test
AUC per epsilon, rank 1 best.

Example:
    python scripts/baseline_comparison.py --out /tmp/baselines.csv --epsilons 0.5 1.0
"""

import argparse

import dpgbdt as d
from dpgbdt.harness import PRESET_NAMES, rank_table, run_grid


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", required=True, help="results CSV path")
    parser.add_argument("--n", type=int, default=20000)
    parser.add_argument("--m", type=int, default=10)
    parser.add_argument("--skew", type=float, default=0.3)
    parser.add_argument("--T", type=int, default=100)
    parser.add_argument("--depth", type=int, default=4)
    parser.add_argument("--Q", type=int, default=32)
    parser.add_argument("--epsilons", type=float, nargs="+", default=[0.5, 1.0])
    parser.add_argument("--split-seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--repeats", type=int, default=1)
    parser.add_argument("--presets", nargs="+", default=list(PRESET_NAMES))
    args = parser.parse_args()

    configs = {
        name: d.baseline_preset(name, T=args.T, d=args.depth, Q=args.Q)
        for name in args.presets
    }
    spec = {
        "kind": "synthetic",
        "name": f"synthetic-n{args.n}-m{args.m}-skew{args.skew}",
        "n": args.n,
        "m": args.m,
        "skewed_fraction": args.skew,
        "class_balance": 0.3,
        "seed": 0,
    }
    results = run_grid(
        configs, spec, args.epsilons, args.split_seeds, args.repeats, args.out
    )
    failures = [r for r in results if r.status != "ok"]
    print(f"{len(results)} runs, {len(failures)} failures -> {args.out}")

    ok = [r for r in results if r.status == "ok"]
    if not ok:
        return
    ranks = rank_table(ok)
    for eps in sorted(ranks, key=lambda e: (e is None, e)):
        print(f"\naverage rank at epsilon={eps} (1 = best):")
        for name, rank in sorted(ranks[eps].items(), key=lambda kv: kv[1]):
            print(f"  {rank:5.2f}  {name}")


if __name__ == "__main__":
    main()
