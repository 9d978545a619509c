"""Centralized, FedAvg and FGL test accuracy under IID and Dirichlet partitions.

Writes one run directory per (partition, method, seed) plus a combined
``accuracy.csv`` with per-seed rows and the median over seeds.

    python scripts/accuracy_table.py --preset baseline --rounds 50 --seeds 5 --out runs/accuracy
"""

import argparse
import csv
import statistics
from pathlib import Path

from fgl.config import build_config
from fgl.runner import run_experiment

METHODS = ("centralized", "fedavg", "fgl")


def read_row(run_dir: Path) -> dict:
    with open(run_dir / "table.csv", newline="") as fh:
        return next(csv.DictReader(fh))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--preset", default="baseline", choices=["main", "baseline"])
    ap.add_argument("--rounds", type=int, default=50, help="FedAvg rounds")
    ap.add_argument("--alpha", type=float, default=0.5)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--out", type=Path, default=Path("runs/accuracy"))
    args = ap.parse_args(argv)

    rows = []
    for mode in ("iid", "dirichlet"):
        for seed in range(args.seeds):
            cfg = build_config({"preset": args.preset, "seed": seed, "fl": {"rounds": args.rounds},
                                "partition": {"mode": mode, "alpha": args.alpha}})
            for method in METHODS:
                run_dir = args.out / mode / method / f"seed{seed}"
                run_experiment(cfg, method, run_dir)
                row = read_row(run_dir)
                rows.append({"partition": mode, "method": method, "seed": seed,
                             "train_acc": float(row["train_acc"]), "test_acc": float(row["test_acc"])})
                print(f"{mode:9s} {method:11s} seed {seed}: test {row['test_acc']}")

    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / "accuracy.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["partition", "method", "seed", "train_acc", "test_acc"])
        for r in rows:
            w.writerow([r["partition"], r["method"], r["seed"], f"{r['train_acc']:.6g}", f"{r['test_acc']:.6g}"])
        for mode in ("iid", "dirichlet"):
            for method in METHODS:
                sel = [r for r in rows if r["partition"] == mode and r["method"] == method]
                w.writerow([mode, method, "median",
                            f"{statistics.median(r['train_acc'] for r in sel):.6g}",
                            f"{statistics.median(r['test_acc'] for r in sel):.6g}"])
    print(f"wrote {args.out / 'accuracy.csv'}")


if __name__ == "__main__":
    main()
