"""FGL test accuracy as the number of synthetic samples grows, median over seeds.

    python scripts/synthetic_count_sweep.py --ns 2000,5000,10000 --seeds 5 --out runs/sweep
"""

import argparse
import json
import statistics
from pathlib import Path

from fgl.config import build_config
from fgl.runner import run_experiment, sweep_trend


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--preset", default="baseline", choices=["main", "baseline"])
    ap.add_argument("--ns", default="2000,5000,10000")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--out", type=Path, default=Path("runs/sweep"))
    args = ap.parse_args(argv)
    ns = tuple(int(n) for n in args.ns.split(","))

    per_seed = []
    for seed in range(args.seeds):
        cfg = build_config({"preset": args.preset, "seed": seed})
        run_dir = args.out / f"seed{seed}"
        run_experiment(cfg, "sweep", run_dir, ns=ns)
        trend = json.loads((run_dir / "summary.json").read_text())["trend"]
        per_seed.append(trend["test_acc"])
        print(f"seed {seed}: " + ", ".join(f"{n}={a:.4f}" for n, a in zip(ns, trend["test_acc"])))

    medians = [statistics.median(col) for col in zip(*per_seed)]
    summary = {"per_seed": per_seed, "median": sweep_trend(ns, medians)}
    (args.out / "median_trend.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print("median: " + ", ".join(f"{n}={a:.4f}" for n, a in zip(ns, medians)))


if __name__ == "__main__":
    main()
