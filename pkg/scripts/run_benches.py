"""Run every experiment and write one stats csv per experiment.

    python scripts/run_benches.py --out results/ [--config sim.conf] [--runs 3]
"""

import argparse
from pathlib import Path

from minerva.bench import EXPERIMENTS, mean_by, run_bench, write_stats_csv
from minerva.config import MinervaConfig, load_config


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results")
    ap.add_argument("--config")
    ap.add_argument("--runs", type=int)
    ap.add_argument("--only", choices=EXPERIMENTS, action="append")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name in args.only or EXPERIMENTS:
        cfg = load_config(args.config) if args.config else MinervaConfig()
        rows = run_bench(name, cfg, **({"runs": args.runs} if args.runs else {}))
        write_stats_csv(rows, out / f"{name}.csv")
        print(f"== {name} ({len(rows)} rows)")
        for label, m in mean_by(rows).items():
            print(f"  {label:<40} {m:10.2f} ms")


if __name__ == "__main__":
    main()
