"""Ablation matrix (FULL and the five single-switch variants) over seeds."""

import argparse
from pathlib import Path

from percsplat.cli import main

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--work", type=Path, default=Path("runs/ablation"))
    ap.add_argument("--resolution", type=int, default=64)
    ap.add_argument("--iters", type=int, default=1600)
    ap.add_argument("--densify-until", type=int, default=1501)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    args = ap.parse_args()

    data = args.work / "scene"
    rc = main(["make-scene", "--out", str(data), "--resolution", str(args.resolution)])
    if not rc:
        rc = main(["ablate", "--data", str(data), "--out", str(args.work),
                   "--iters", str(args.iters), "--densify-until", str(args.densify_until),
                   "--seeds", *map(str, args.seeds)])
    raise SystemExit(rc)
