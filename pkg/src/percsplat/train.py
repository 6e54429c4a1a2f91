"""Optimization loop with inherited and perception-guided density control."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from percsplat import checkpoint, densify, losses, sensitivity
from percsplat.model import GaussianSet, TrainConfig
from percsplat.render import Frame, render, weight_sweep
from percsplat.scene import Dataset, to_uint8

log = logging.getLogger(__name__)

TRACE_FIELDS = ("iter", "loss", "l1", "dssim", "bce", "psnr", "ssim", "n_gaussians")


class TrainingError(RuntimeError):
    pass


def init_from_points(points, colors, config: Optional[TrainConfig] = None,
                     scene_extent: float = 1.0) -> GaussianSet:
    config = config or TrainConfig()
    scale = densify.knn_mean_distance(points, 3, fallback=0.01 * scene_extent)
    return densify.make_isotropic(points, colors, scale, config.dtype)


class Adam:
    """Adam with one learning rate per parameter group and a shared step count.

    The position rate decays exponentially from ``lr_means_init`` to
    ``lr_means_final`` (both scaled by the scene extent) over training.
    """

    betas = (0.9, 0.999)
    eps = 1e-15

    def __init__(self, gs: GaussianSet, config: TrainConfig, scene_extent: float):
        self.config = config
        self.extent = scene_extent
        self.lr = {
            "means": config.lr_means_init * scene_extent,
            "log_scales": config.lr_scales,
            "rotations": config.lr_rotations,
            "colors": config.lr_colors,
            "opacity_logits": config.lr_opacity,
            "sensitivity_logits": config.lr_sensitivity,
        }
        self.step_count = 0
        self.reset(gs)

    def reset(self, gs: GaussianSet) -> None:
        self.m = {k: np.zeros_like(getattr(gs, k)) for k in GaussianSet.PARAMS}
        self.v = {k: np.zeros_like(getattr(gs, k)) for k in GaussianSet.PARAMS}

    def schedule(self, iteration: int) -> None:
        total = max(self.config.total_iters, 1)
        t = min(max(iteration / total, 0.0), 1.0)
        lo = math.log(self.config.lr_means_init)
        hi = math.log(self.config.lr_means_final)
        self.lr["means"] = math.exp((1 - t) * lo + t * hi) * self.extent

    def step(self, gs: GaussianSet, grads) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.step_count
        c2 = 1 - b2 ** self.step_count
        for name in GaussianSet.PARAMS:
            g = getattr(grads, name)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p = getattr(gs, name)
            p -= self.lr[name] * (m / c1) / (np.sqrt(v / c2) + self.eps)
        gs.rotations /= np.linalg.norm(gs.rotations, axis=1, keepdims=True)
        np.clip(gs.colors, 0.0, 1.0, out=gs.colors)

    def remap(self, origin: np.ndarray) -> None:
        """Follow a surgery: carried rows keep their moments, new rows start at zero."""
        carried = origin >= 0
        for state in (self.m, self.v):
            for name, arr in state.items():
                new = np.zeros((len(origin),) + arr.shape[1:], dtype=arr.dtype)
                new[carried] = arr[origin[carried]]
                state[name] = new

    def zero_group(self, name: str) -> None:
        self.m[name][:] = 0
        self.v[name][:] = 0


def evaluate(gs: GaussianSet, views) -> list[dict]:
    """Per-view PSNR/SSIM of the 8-bit quantized render against ground truth."""
    rows = []
    for view in views:
        img = to_uint8(render(gs, view.camera).rgb) / 255.0
        rows.append({"view": view.name, "psnr": losses.psnr(img, view.gt_image),
                     "ssim": losses.ssim(img, view.gt_image)})
    return rows


@dataclass
class TrainResult:
    gaussians: GaussianSet
    trace: list = field(default_factory=list)
    events: list = field(default_factory=list)
    gamma: Optional[float] = None
    reinit_fired: bool = False
    initial_eval: list = field(default_factory=list)
    final_eval: list = field(default_factory=list)


def _first_nonfinite(gs: GaussianSet, grads=None) -> str:
    # a bad parameter poisons every gradient, so name parameters first
    for name in GaussianSet.PARAMS:
        if not np.all(np.isfinite(getattr(gs, name))):
            return name
    for name in GaussianSet.PARAMS:
        if grads is not None and not np.all(np.isfinite(getattr(grads, name))):
            return name + " (gradient)"
    return "loss"


class Trainer:
    def __init__(self, dataset: Dataset, config: TrainConfig, out_dir=None,
                 init: Optional[GaussianSet] = None):
        self.data = dataset
        self.config = config
        self.out = Path(out_dir) if out_dir is not None else None
        self.extent = dataset.extent
        if init is None:
            init = init_from_points(dataset.points, dataset.colors, config, self.extent)
        self.gs = init.astype(config.dtype)
        self.opt = Adam(self.gs, config, self.extent)
        seeds = np.random.SeedSequence(config.seed).spawn(2)
        self.view_rng = np.random.default_rng(seeds[0])
        self.surgery_rng = np.random.default_rng(seeds[1])
        self.beta = sensitivity.scene_sensitivity(dataset.views)
        self.perceptual = not config.vanilla
        if config.disable_pe:
            self.targets = [sensitivity.raw_response(v.gt_image) for v in dataset.views]
        else:
            self.targets = [v.sens_map for v in dataset.views]
        self.result = TrainResult(self.gs)
        self._order: list = []
        self._event_file = None

    # ------------------------------------------------------------------
    def _next_view(self) -> int:
        if not self._order:
            self._order = list(self.view_rng.permutation(len(self.data.views)))
        return int(self._order.pop(0))

    def _log_events(self, events) -> None:
        self.result.events.extend(events)
        if self._event_file is not None:
            for ev in events:
                self._event_file.write(ev.to_json() + "\n")

    def _surgery(self, gs: GaussianSet, origin: np.ndarray) -> None:
        self.gs = gs
        self.result.gaussians = gs
        self.opt.remap(origin)

    def _save(self, iteration: int, name: Optional[str] = None) -> None:
        if self.out is None:
            return
        name = name or f"ckpt_{iteration:06d}.pgs"
        checkpoint.save(self.out / name, checkpoint.Checkpoint(self.gs, iteration, self.config))

    # ------------------------------------------------------------------
    def step(self, it: int) -> dict:
        cfg = self.config
        self.opt.schedule(it)
        vi = self._next_view()
        view = self.data.views[vi]
        frame = Frame(self.gs, view.camera)
        out = frame.forward()
        l_c, g_rgb, l1, dssim = losses.rgb_loss(out.rgb, view.gt_image, cfg.ssim_weight)
        lam = cfg.lambda_s if self.perceptual else 0.0
        l_s = float("nan")
        g_sens = None
        if self.perceptual:
            if cfg.disable_pe:
                l_s, g = losses.l1_and_grad(out.sens, self.targets[vi])
            else:
                l_s, g = losses.sens_loss(out.sens, self.targets[vi])
            if lam > 0:
                g_sens = lam * g
        total = losses.total_loss(l_c, l_s, lam) if lam > 0 else l_c
        if not math.isfinite(total):
            raise TrainingError(f"iteration {it}: non-finite loss; offending group: "
                                f"{_first_nonfinite(self.gs)}")
        grads = frame.backward((1 - lam) * g_rgb, g_sens)
        bad = _first_nonfinite(self.gs, grads)
        if bad != "loss":
            raise TrainingError(f"iteration {it}: non-finite values in {bad}")
        vis = grads.visible
        self.gs.accum_posgrad_norm[vis] += grads.mean2d_norm[vis]
        self.gs.accum_denom[vis] += 1
        self.opt.step(self.gs, grads)
        self._densify(it)
        return {"iter": it, "loss": total, "l1": l1, "dssim": dssim, "bce": l_s,
                "n_gaussians": len(self.gs)}

    def _densify(self, it: int) -> None:
        cfg = self.config
        if it < cfg.densify_until:
            if it > cfg.warmup_iters and it % cfg.densify_interval == 0:
                gs, origin, events = densify.vanilla_adc(self.gs, cfg, self.extent,
                                                         self.surgery_rng, it)
                self._surgery(gs, origin)
                self._log_events(events)
            if self.perceptual and it > cfg.warmup_iters:
                due_h = not cfg.disable_hd and it % cfg.iter_h == 0
                due_m = not cfg.disable_md and it % cfg.iter_m == 0
                if due_h or due_m:
                    weight_sweep(self.gs, self.data.cameras)
                    gs, origin, events = densify.perceptual_densify(
                        self.gs, self.beta, cfg, self.surgery_rng, do_high=due_h,
                        do_medium=due_m, allow_clone=not cfg.disable_pe, iteration=it)
                    self._surgery(gs, origin)
                    self._log_events(events)
            if it % cfg.opacity_reset_interval == 0:
                densify.reset_opacity(self.gs)
                self.opt.zero_group("opacity_logits")
                self._log_events([densify.DensifyEvent(it, "opacity_reset", [], len(self.gs),
                                                       len(self.gs))])
        if (it == cfg.warmup_iters and self.perceptual and not cfg.disable_sdr
                and not cfg.disable_pe):
            gamma, fire = densify.reinit_gate(self.gs, cfg.tau_l, cfg.tau_h, cfg.tau_gamma)
            self.result.gamma = gamma
            n0 = len(self.gs)
            if fire:
                gs = densify.depth_reinit(self.gs, self.data.views, cfg.reinit_stride,
                                          0.01 * self.extent)
                if gs is not self.gs:
                    self.gs = gs.astype(cfg.dtype)
                    self.result.gaussians = self.gs
                    self.opt.reset(self.gs)
                    self.result.reinit_fired = True
            self._log_events([densify.DensifyEvent(it, "depth_reinit", [], n0, len(self.gs),
                                                   {"gamma": gamma, "fired": fire})])

    # ------------------------------------------------------------------
    def run(self, evaluate_start_end: bool = True) -> TrainResult:
        cfg = self.config
        trace_file = None
        if self.out is not None:
            self.out.mkdir(parents=True, exist_ok=True)
            self._event_file = open(self.out / "events.log", "w")
            trace_file = open(self.out / "trace.csv", "w", newline="")
            writer = csv.DictWriter(trace_file, fieldnames=TRACE_FIELDS)
            writer.writeheader()
        try:
            if evaluate_start_end:
                self.result.initial_eval = evaluate(self.gs, self.data.views)
            for it in range(1, cfg.total_iters + 1):
                row = self.step(it)
                if cfg.eval_interval and it % cfg.eval_interval == 0:
                    ev = evaluate(self.gs, self.data.views)
                    row["psnr"] = float(np.mean([r["psnr"] for r in ev]))
                    row["ssim"] = float(np.mean([r["ssim"] for r in ev]))
                self.result.trace.append(row)
                if trace_file is not None:
                    writer.writerow({k: row.get(k, "") for k in TRACE_FIELDS})
                if cfg.checkpoint_interval and it % cfg.checkpoint_interval == 0:
                    self._save(it)
            self._save(cfg.total_iters, "final.pgs")
            if evaluate_start_end:
                self.result.final_eval = evaluate(self.gs, self.data.views)
        finally:
            if self._event_file is not None:
                self._event_file.close()
                self._event_file = None
            if trace_file is not None:
                trace_file.close()
        return self.result


def train(dataset: Dataset, config: TrainConfig, out_dir=None,
          init: Optional[GaussianSet] = None, evaluate_start_end: bool = True) -> TrainResult:
    return Trainer(dataset, config, out_dir, init).run(evaluate_start_end)


__all__ = ["Adam", "Trainer", "TrainResult", "TrainingError", "evaluate", "init_from_points",
           "train"]
