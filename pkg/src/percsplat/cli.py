"""Command-line entry point.

Thread count must be fixed before numba initializes, so heavy modules are
imported inside the subcommand handlers.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from pathlib import Path

from percsplat.model import TrainConfig

ABLATIONS = {
    "FULL": {},
    "w/o PE": {"disable_pe": True},
    "w/o HD": {"disable_hd": True},
    "w/o MD": {"disable_md": True},
    "w/o SDR": {"disable_sdr": True},
    "w/o OD": {"disable_od": True},
}
OD_KS = (1.0, 1.2, 1.5, 2.0)


class UsageError(Exception):
    pass


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training configuration (overrides --config)")
    g.add_argument("--config", type=Path, help="key=value config file")
    g.add_argument("--iters", dest="total_iters", type=int, default=argparse.SUPPRESS,
                   help="alias of --total-iters")
    for f in dataclasses.fields(TrainConfig):
        default = f.default
        flag = "--" + f.name.replace("_", "-")
        if isinstance(default, bool):
            g.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction,
                           default=argparse.SUPPRESS, help=f"(default: {default})")
        else:
            g.add_argument(flag, dest=f.name, type=type(default), default=argparse.SUPPRESS,
                           help=f"(default: {default})")


def _config_from_args(args) -> TrainConfig:
    cfg = TrainConfig()
    if args.config is not None:
        if not args.config.is_file():
            raise UsageError(f"config file not found: {args.config}")
        try:
            cfg = TrainConfig.from_file(args.config)
        except (KeyError, ValueError) as exc:
            msg = exc.args[0] if exc.args else exc
            raise UsageError(f"{args.config}: {msg}") from exc
    changes = {f.name: getattr(args, f.name) for f in dataclasses.fields(TrainConfig)
               if hasattr(args, f.name)}
    try:
        return dataclasses.replace(cfg, **changes)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _require_dir(path: Path, what: str) -> Path:
    if not path.is_dir():
        raise UsageError(f"{what} not found: {path}")
    return path


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="percsplat", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=None,
                        help="renderer worker count (default: $PGS_THREADS or all cores)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-scene", help="generate a synthetic teacher dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n-gaussians", type=int, default=300)
    p.add_argument("--n-views", type=int, default=5)
    p.add_argument("--resolution", type=int, default=128)
    p.add_argument("--seed", type=int, default=7)

    p = sub.add_parser("extract-sens", help="binary sensitivity maps for a directory of PNGs")
    p.add_argument("--images", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    d = TrainConfig()
    p.add_argument("--tau-e", type=float, default=d.tau_e, help=f"(default: {d.tau_e})")
    p.add_argument("--tau-s", type=float, default=d.tau_s, help=f"(default: {d.tau_s})")
    p.add_argument("--smooth-window", type=int, default=d.smooth_window,
                   help=f"(default: {d.smooth_window})")

    p = sub.add_parser("train", help="fit a dataset")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_config_flags(p)

    p = sub.add_parser("render", help="render a checkpoint from a camera")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--camera", type=Path, required=True,
                   help="JSON camera object or list (e.g. a dataset's cameras.json)")
    p.add_argument("--index", type=int, default=0, help="camera index when the file is a list")
    p.add_argument("--out", type=Path, required=True, help="RGB output PNG")
    p.add_argument("--branch", action="append", choices=("sens", "depth", "alpha"), default=[],
                   help="also write this branch next to --out (repeatable)")

    p = sub.add_parser("eval", help="PSNR/SSIM of a checkpoint on a dataset")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--csv", type=Path, default=None, help="also write the table as CSV")

    p = sub.add_parser("ablate", help="run the ablation matrix over seeds")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    _add_config_flags(p)

    p = sub.add_parser("od-table", help="final primitive count and PSNR per opacity-decline exponent")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--ks", type=float, nargs="+", default=list(OD_KS))
    _add_config_flags(p)
    return parser


def _configure_threads(requested) -> int:
    if requested is None and os.environ.get("PGS_THREADS"):
        requested = int(os.environ["PGS_THREADS"])
    if requested is None:
        requested = os.cpu_count() or 1
    if requested < 1:
        raise UsageError("--threads must be >= 1")
    limit = int(os.environ.get("NUMBA_NUM_THREADS", 0) or 0)
    if limit < requested:
        os.environ["NUMBA_NUM_THREADS"] = str(max(requested, os.cpu_count() or 1))
    import numba

    numba.set_num_threads(min(requested, numba.config.NUMBA_NUM_THREADS))
    return requested


# -- handlers ------------------------------------------------------------------

def cmd_make_scene(args) -> None:
    from percsplat.scene import make_teacher_scene

    make_teacher_scene(args.out, args.n_gaussians, args.n_views, args.resolution, args.seed)
    print(f"wrote {args.out}")


def cmd_extract_sens(args) -> None:
    from percsplat import sensitivity
    from percsplat.scene import read_png, write_sens_png

    _require_dir(args.images, "image directory")
    files = sorted(args.images.glob("*.png"))
    if not files:
        raise UsageError(f"no PNG images in {args.images}")
    args.out.mkdir(parents=True, exist_ok=True)
    maps = []
    for f in files:
        smap = sensitivity.extract(read_png(f), args.tau_e, args.tau_s, args.smooth_window)
        write_sens_png(args.out / f.name, smap)
        maps.append(smap)
    beta = sensitivity.scene_sensitivity(maps)
    (args.out / "beta.txt").write_text(f"{beta!r}\n")
    print(f"{len(files)} maps, beta={beta:.6f}")


def _load_data(args, cfg):
    from percsplat import scene

    _require_dir(args.data, "dataset directory")
    return scene.load(args.data, cfg, seed=cfg.seed)


def _mean(rows, key):
    return sum(r[key] for r in rows) / len(rows)


def cmd_train(args) -> None:
    from percsplat.train import train

    cfg = _config_from_args(args)
    data = _load_data(args, cfg)
    res = train(data, cfg, args.out)
    print(f"trained {cfg.total_iters} iterations: N={len(res.gaussians)} "
          f"psnr {_mean(res.initial_eval, 'psnr'):.2f} -> {_mean(res.final_eval, 'psnr'):.2f} dB, "
          f"ssim {_mean(res.final_eval, 'ssim'):.4f}")


def cmd_render(args) -> None:
    import numpy as np

    from percsplat import checkpoint
    from percsplat.model import Camera
    from percsplat.render import render
    from percsplat.scene import write_png

    if not args.checkpoint.is_file():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    if not args.camera.is_file():
        raise UsageError(f"camera file not found: {args.camera}")
    entry = json.loads(args.camera.read_text())
    if isinstance(entry, list):
        entry = entry[args.index]
    cam = Camera.from_dict(entry)
    gs = checkpoint.load(args.checkpoint).gaussians
    out = render(gs, cam)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_png(args.out, out.rgb)
    for branch in args.branch:
        if branch == "sens":
            img = out.sens
        elif branch == "alpha":
            img = out.accum_alpha
        else:
            with np.errstate(invalid="ignore", divide="ignore"):
                depth = np.where(out.accum_alpha > 0, out.depth / out.accum_alpha, 0.0)
            img = depth / depth.max() if depth.max() > 0 else depth
        write_png(args.out.with_name(f"{args.out.stem}_{branch}.png"), img)
    print(f"wrote {args.out}")


def cmd_eval(args) -> None:
    from percsplat import checkpoint
    from percsplat.train import evaluate

    if not args.checkpoint.is_file():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    ckpt = checkpoint.load(args.checkpoint)
    cfg = ckpt.config or TrainConfig()
    data = _load_data(args, cfg)
    rows = evaluate(ckpt.gaussians, data.views)
    n = len(ckpt.gaussians)
    print(f"{'view':<20} {'psnr':>8} {'ssim':>8} {'n_gaussians':>12}")
    for r in rows:
        print(f"{r['view']:<20} {r['psnr']:8.3f} {r['ssim']:8.4f} {n:12d}")
    print(f"{'mean':<20} {_mean(rows, 'psnr'):8.3f} {_mean(rows, 'ssim'):8.4f} {n:12d}")
    if args.csv is not None:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["view", "psnr", "ssim", "n_gaussians"])
            for r in rows:
                w.writerow([r["view"], r["psnr"], r["ssim"], n])
            w.writerow(["mean", _mean(rows, "psnr"), _mean(rows, "ssim"), n])


def run_matrix(data, base: TrainConfig, variants: dict, seeds, out_dir: Path) -> list[dict]:
    """Train every (variant, seed) pair; returns one row per run.

    Each run's trace, event log and final checkpoint go to
    ``out_dir/<variant>_seed<seed>``.
    """
    from percsplat.train import train

    rows = []
    for label, changes in variants.items():
        slug = label.replace("w/o ", "wo_").replace("=", "")
        for seed in seeds:
            cfg = base.replace(seed=seed, **changes)
            res = train(data, cfg, Path(out_dir) / f"{slug}_seed{seed}")
            rows.append({"config": label, "seed": seed,
                         "psnr": _mean(res.final_eval, "psnr"),
                         "ssim": _mean(res.final_eval, "ssim"),
                         "n_gaussians": len(res.gaussians)})
            print(f"{label:<8} seed {seed}: psnr {rows[-1]['psnr']:.3f} "
                  f"ssim {rows[-1]['ssim']:.4f} N {rows[-1]['n_gaussians']}", flush=True)
    return rows


def summarize(rows: list[dict]) -> list[dict]:
    out = []
    for label in dict.fromkeys(r["config"] for r in rows):
        sel = [r for r in rows if r["config"] == label]
        out.append({"config": label, "seed": "mean", "psnr": _mean(sel, "psnr"),
                    "ssim": _mean(sel, "ssim"), "n_gaussians": _mean(sel, "n_gaussians")})
    return out


def _write_rows(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["config", "seed", "psnr", "ssim", "n_gaussians"])
        w.writeheader()
        w.writerows(rows)


def cmd_ablate(args) -> None:
    cfg = _config_from_args(args)
    data = _load_data(args, cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    rows = run_matrix(data, cfg, ABLATIONS, args.seeds, args.out)
    summary = summarize(rows)
    _write_rows(args.out / "ablation.csv", rows + summary)
    for r in summary:
        print(f"{r['config']:<8} psnr {r['psnr']:.3f} ssim {r['ssim']:.4f} N {r['n_gaussians']:.1f}")


def cmd_od_table(args) -> None:
    cfg = _config_from_args(args)
    data = _load_data(args, cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    variants = {f"k={k:g}": {"od_exponent": k, "disable_od": False} for k in args.ks}
    rows = run_matrix(data, cfg, variants, args.seeds, args.out)
    summary = summarize(rows)
    _write_rows(args.out / "od_table.csv", rows + summary)
    with open(args.out / "od_table.dat", "w") as fh:
        fh.write("# k mean_n_gaussians mean_psnr mean_ssim\n")
        for k, r in zip(args.ks, summary):
            fh.write(f"{k:g} {r['n_gaussians']:.3f} {r['psnr']:.4f} {r['ssim']:.5f}\n")
    for k, r in zip(args.ks, summary):
        print(f"k={k:g}: N {r['n_gaussians']:.1f} psnr {r['psnr']:.3f}")


HANDLERS = {
    "make-scene": cmd_make_scene,
    "extract-sens": cmd_extract_sens,
    "train": cmd_train,
    "render": cmd_render,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "od-table": cmd_od_table,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _configure_threads(args.threads)
        HANDLERS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"percsplat: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # one-line diagnostic, nonzero exit
        print(f"percsplat: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
