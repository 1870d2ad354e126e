"""Compare standard and fat index flattening times: grid model vs Monte Carlo.

    python scripts/run_flatten_model.py --chunks 256 --fanout 4 --mean 50
"""

import argparse

from minerva.dhtnet import LatencyDistribution
from minerva.latmodel import FlattenModelParams, reduction_ratio, verify_fat_speedup


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--chunks", type=int, default=256)
    ap.add_argument("--fanout", type=int, default=4)
    ap.add_argument("--mean", type=float, default=50.0, help="exponential lookup mean, ms")
    ap.add_argument("--trials", type=int, default=10_000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--sweep", action="store_true", help="also print the reduction over N")
    args = ap.parse_args()

    dist = LatencyDistribution.exponential(args.mean)
    report = verify_fat_speedup(FlattenModelParams(args.chunks, args.fanout, dist),
                             args.trials, args.seed)
    for name, value in report.rows():
        print(f"{name:<24} {value:10.2f}")
    print(f"99% intervals separated: {report.separated}")
    if args.sweep:
        for n in (8, 32, 128, 512, 1024):
            r = reduction_ratio(FlattenModelParams(n, args.fanout, dist), 2000, args.seed)
            print(f"N={n:<5} reduction {r:.3f}")


if __name__ == "__main__":
    main()
