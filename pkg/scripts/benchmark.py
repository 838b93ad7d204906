"""Five-seed MFedAvg / MFedProx / FedCMI comparison on the imbalance benchmark.

Writes one run directory per (strategy, seed) and prints per-seed final
accuracies plus the seed means.

    python scripts/benchmark.py --out runs/benchmark --seeds 0,1,2,3,4
"""

import argparse
from pathlib import Path

import numpy as np

from fedcmi.experiment import compare, format_comparison, load_config, sweep


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=str(Path(__file__).parent / "configs" / "benchmark.toml"))
    ap.add_argument("--out", default="runs/benchmark")
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--strategies", default="mfedavg,mfedprox,fedcmi")
    args = ap.parse_args()

    cfg, _ = load_config(args.config)
    cfg = cfg.with_overrides(output_dir=args.out)
    strategies = args.strategies.split(",")
    seeds = [int(s) for s in args.seeds.split(",")]
    dirs = sweep(cfg, strategies, seeds)

    finals = {s: [] for s in strategies}
    for seed in seeds:
        group = [d for d in dirs if d.name.endswith(f"-s{seed}")]
        table = compare(group)
        print(f"seed {seed}")
        print(format_comparison(table))
        for row in table["rows"]:
            finals[row["strategy"]].append((row["final_joint"], row["final_m0"], row["final_m1"]))
    print("\nmean over seeds (joint, m0, m1)")
    for s, vals in finals.items():
        j, a, b = np.mean(vals, axis=0)
        print(f"{s:<9} {j:.4f} {a:.4f} {b:.4f}")


if __name__ == "__main__":
    main()
