"""Final primitive count and PSNR against the opacity-decline exponent k.

Writes ``od_table.csv`` and a gnuplot-ready ``od_table.dat``; plot with e.g.
``plot "od_table.dat" using 1:2 with linespoints``.
"""

import argparse
from pathlib import Path

from percsplat.cli import main

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--work", type=Path, default=Path("runs/k_table"))
    ap.add_argument("--resolution", type=int, default=64)
    ap.add_argument("--iters", type=int, default=1600)
    ap.add_argument("--densify-until", type=int, default=1501)
    ap.add_argument("--ks", type=float, nargs="+", default=[1.0, 1.2, 1.5, 2.0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    args = ap.parse_args()

    data = args.work / "scene"
    rc = main(["make-scene", "--out", str(data), "--resolution", str(args.resolution)])
    if not rc:
        rc = main(["od-table", "--data", str(data), "--out", str(args.work),
                   "--iters", str(args.iters), "--densify-until", str(args.densify_until),
                   "--ks", *map(str, args.ks), "--seeds", *map(str, args.seeds)])
    raise SystemExit(rc)
