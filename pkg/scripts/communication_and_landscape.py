"""Bytes, modeled transfer time and loss-landscape slices for FGL vs FedAvg.

    python scripts/communication_and_landscape.py --preset main --out runs/comm
"""

import argparse
import json
from pathlib import Path

from fgl.config import build_config
from fgl.runner import run_experiment


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--preset", default="main", choices=["main", "baseline"])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=Path("runs/comm"))
    args = ap.parse_args(argv)

    cfg = build_config({"preset": args.preset, "seed": args.seed})
    manifest = run_experiment(cfg, "compare-comm", args.out / "comm")
    report = json.loads((args.out / "comm" / "comm_report.json").read_text())
    print(f"FGL bytes {report['fgl_total_bytes']}, FedAvg bytes {report['fedavg_total_bytes']}, "
          f"ratio {report['ratio']:.6f}")
    for method, cost in manifest["costs"].items():
        print(f"{method}: modeled total {cost['total_seconds']:.2f}s")
    run_experiment(cfg, "landscape", args.out / "landscape")
    print(f"landscape grids in {args.out / 'landscape'}")


if __name__ == "__main__":
    main()
