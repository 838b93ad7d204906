"""MFedAvg weak-modality accuracy with and without random modality dropout.

Demoting some multimodal clients to a single modality lets the weak branch
train without the dominant one. This prints acc_m1 at each drop probability.

    python scripts/dropout_preexperiment.py --seeds 0,1,2,3,4 --drops 0,0.2
"""

import argparse
from pathlib import Path

import numpy as np

from fedcmi.experiment import load_config, load_summary, run_experiment


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=str(Path(__file__).parent / "configs" / "benchmark.toml"))
    ap.add_argument("--out", default="runs/dropout")
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--drops", default="0,0.2")
    args = ap.parse_args()

    base, _ = load_config(args.config)
    drops = [float(d) for d in args.drops.split(",")]
    acc = {d: [] for d in drops}
    for seed in (int(s) for s in args.seeds.split(",")):
        for d in drops:
            cfg = base.with_overrides(strategy="mfedavg", seed=seed, drop_prob=d, output_dir=f"{args.out}/drop{d}-s{seed}")
            acc[d].append(load_summary(run_experiment(cfg))["final"]["acc_m1"])
            print(f"seed {seed} drop {d}: acc_m1 {acc[d][-1]:.4f}", flush=True)
    for d in drops:
        print(f"drop {d}: mean acc_m1 {np.mean(acc[d]):.4f}")


if __name__ == "__main__":
    main()
