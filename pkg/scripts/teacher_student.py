"""Teacher-student run on the default synthetic scene.

Writes the scene, an untrained baseline, a 3000-iteration student and the
per-view evaluation tables under ``--work`` (default ``runs/teacher_student``).
"""

import argparse
import csv
import time
from pathlib import Path

from percsplat.cli import main


def mean_psnr(path: Path) -> float:
    with open(path) as fh:
        return float(list(csv.DictReader(fh))[-1]["psnr"])


def run(argv: list) -> None:
    rc = main(argv)
    if rc:
        raise SystemExit(rc)


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--work", type=Path, default=Path("runs/teacher_student"))
    ap.add_argument("--iters", type=int, default=3000)
    ap.add_argument("--densify-until", type=int, default=2500)
    args = ap.parse_args()

    data = args.work / "scene"
    t0 = time.perf_counter()
    run(["make-scene", "--out", str(data)])
    run(["train", "--data", str(data), "--out", str(args.work / "init"), "--iters", "0"])
    run(["train", "--data", str(data), "--out", str(args.work / "student"),
         "--iters", str(args.iters), "--densify-until", str(args.densify_until),
         "--eval-interval", "500"])
    for name in ("init", "student"):
        run(["eval", "--checkpoint", str(args.work / name / "final.pgs"), "--data", str(data),
             "--csv", str(args.work / f"{name}_eval.csv")])
    p0, p1 = mean_psnr(args.work / "init_eval.csv"), mean_psnr(args.work / "student_eval.csv")
    print(f"PSNR {p0:.2f} -> {p1:.2f} dB in {time.perf_counter() - t0:.0f}s")
