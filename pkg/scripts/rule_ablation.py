"""Rule-count ablation (R = 3, 5, 10) with paired t-tests on matched splits.

    python scripts/rule_ablation.py --repeats 10 --out runs/ablation
"""

import argparse
import csv
import json
import logging
from pathlib import Path

import numpy as np

from ssvep_cstl.evaluation import ExperimentConfig, rule_sweep
from ssvep_cstl.fuzzy import TrainConfig
from ssvep_cstl.signal_core import Dataset, FrequencyTable, synthetic_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--rules", type=int, nargs="+", default=[3, 5, 10])
    ap.add_argument("--repeats", type=int, default=10)
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--noise", type=float, default=0.6, help="harder than the benchmark so rule counts can differ")
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    table = FrequencyTable.from_freqs([float(f) for f in range(8, 16)])
    ds = Dataset(table, synthetic_dataset(table, 6, 250.0, 4.0, 4, args.noise, seed=7), 250.0)
    cfg = ExperimentConfig(method="fuzzy", repeats=args.repeats, seed=args.seed,
                           train=TrainConfig(epochs_max=args.epochs))
    res = rule_sweep(ds, cfg, args.rules)
    for R in res.values:
        a = np.array(res.accuracies[R])
        print(f"R={R:3d}  acc {np.nanmean(a):.4f} +/- {np.nanstd(a, ddof=1):.4f}")
    for row in res.ttests:
        print(f"R={row['a']} vs R={row['b']}: t={row['t']:.3f} p={row['p']:.3f} {row['note']}")
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        with (args.out / "accuracies.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["repeat", *[f"R{R}" for R in res.values]])
            for i in range(args.repeats):
                w.writerow([i, *[f"{res.accuracies[R][i]:.6f}" for R in res.values]])
        (args.out / "ttests.json").write_text(json.dumps(res.ttests, indent=2) + "\n")


if __name__ == "__main__":
    main()
