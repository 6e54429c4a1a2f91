"""Primitive-set surgery: selection rules, clone/split, pruning, reinit.

Every surgery returns the new set together with an ``origin`` array: for
each output row, the input row whose optimizer state carries over, or -1
for a freshly created primitive (zeroed optimizer moments).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from percsplat.model import GaussianSet, View, clamped_logit, logit, sigmoid
from percsplat.render import quat_to_rotmat, render

log = logging.getLogger(__name__)

INIT_OPACITY = 0.1
RESET_OPACITY = 0.01


@dataclass
class DensifyEvent:
    iteration: int
    kind: str
    selected_indices: list
    n_before: int
    n_after: int
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = asdict(self)
        extra = d.pop("extra")
        d["n_selected"] = len(d["selected_indices"])
        d.update(extra)
        return json.dumps(d)


# -- selection ---------------------------------------------------------------

def select_high(gs: GaussianSet, tau_h: float) -> np.ndarray:
    return np.flatnonzero(gs.sensitivities > tau_h)


def select_medium(gs: GaussianSet, tau_l: float, tau_h: float) -> np.ndarray:
    s = gs.sensitivities
    return np.flatnonzero((s >= tau_l) & (s <= tau_h))


def gate_by_weight(candidates, gs: GaussianSet, tau_omega: float) -> np.ndarray:
    candidates = np.asarray(candidates, dtype=np.int64)
    return candidates[gs.max_view_weight[candidates] > tau_omega]


# -- opacity decline -----------------------------------------------------------

def od_transform(alpha, k: float):
    """Per-copy opacity so two overlapping copies composite to alpha**k."""
    alpha = np.asarray(alpha, dtype=np.float64)
    return 1.0 - np.sqrt(1.0 - alpha ** k)


def composed_opacity(alpha_hat):
    return alpha_hat + (1.0 - alpha_hat) * alpha_hat


# -- surgery -----------------------------------------------------------------

def apply_surgery(gs: GaussianSet, clone=(), split=(), k: float = 1.0,
                  rng: Optional[np.random.Generator] = None,
                  split_divisor: float = 1.6):
    """Clone and split against the same input set.

    Row order of the result: surviving inputs (split parents removed),
    then clone copies, then split children (two per parent, parent-major).
    """
    n = len(gs)
    clone = np.unique(np.asarray(clone, dtype=np.int64))
    split = np.unique(np.asarray(split, dtype=np.int64))
    if np.intersect1d(clone, split).size:
        raise ValueError("a primitive cannot be both cloned and split")
    work = gs.copy()
    if clone.size:
        alpha = sigmoid(gs.opacity_logits[clone].astype(np.float64))
        work.opacity_logits[clone] = clamped_logit(od_transform(alpha, k))
    keep = np.setdiff1d(np.arange(n), split)
    parts = [work.take(keep)]
    origin = [keep]
    if clone.size:
        copies = work.take(clone)
        copies.reset_stats()
        copies.max_view_weight[:] = 0
        parts.append(copies)
        origin.append(np.full(clone.size, -1))
    if split.size:
        if rng is None:
            raise ValueError("split needs a random generator")
        parts.append(_split_children(gs, split, rng, split_divisor))
        origin.append(np.full(2 * split.size, -1))
    out = parts[0]
    for p in parts[1:]:
        out = out.concat(p)
    return out, np.concatenate(origin).astype(np.int64)


def _split_children(gs: GaussianSet, idx: np.ndarray, rng: np.random.Generator,
                    divisor: float) -> GaussianSet:
    scales = np.exp(gs.log_scales[idx].astype(np.float64))
    q = gs.rotations[idx].astype(np.float64)
    rot = quat_to_rotmat(q / np.linalg.norm(q, axis=1, keepdims=True))
    z = rng.standard_normal((idx.size, 2, 3))
    offsets = np.einsum("nij,nkj->nki", rot, z * scales[:, None, :])
    means = gs.means[idx].astype(np.float64)[:, None, :] + offsets
    rep = np.repeat(idx, 2)
    children = gs.take(rep)
    children.means[:] = means.reshape(-1, 3)
    children.log_scales[:] = gs.log_scales[rep] - np.log(divisor)
    children.reset_stats()
    children.max_view_weight[:] = 0
    return children


def split(gs: GaussianSet, indices, rng: np.random.Generator, divisor: float = 1.6):
    return apply_surgery(gs, split=indices, rng=rng, split_divisor=divisor)


def clone_with_od(gs: GaussianSet, indices, k: float):
    return apply_surgery(gs, clone=indices, k=k)


def prune(gs: GaussianSet, min_opacity: float):
    keep = np.flatnonzero(gs.opacities >= min_opacity)
    return gs.take(keep), keep


def reset_opacity(gs: GaussianSet, value: float = RESET_OPACITY) -> None:
    gs.opacity_logits[:] = logit(value)


# -- schedules ---------------------------------------------------------------

def average_posgrad(gs: GaussianSet) -> np.ndarray:
    denom = gs.accum_denom.astype(np.float64)
    out = np.zeros(len(gs))
    nz = denom > 0
    out[nz] = gs.accum_posgrad_norm[nz] / denom[nz]
    return out


def vanilla_adc(gs: GaussianSet, config, scene_extent: float, rng: np.random.Generator,
                iteration: int = 0):
    """Gradient-driven clone/split followed by low-opacity pruning."""
    events = []
    n0 = len(gs)
    grads = average_posgrad(gs)
    selected = grads > config.densify_grad_threshold
    small = gs.max_scales < config.percent_dense * scene_extent
    clone = np.flatnonzero(selected & small)
    split_idx = np.flatnonzero(selected & ~small)
    gs, origin = apply_surgery(gs, clone, split_idx, config.k, rng, config.split_scale_divisor)
    gs.reset_stats()
    events.append(DensifyEvent(iteration, "adc", np.union1d(clone, split_idx).tolist(), n0, len(gs),
                               {"n_clone": int(clone.size), "n_split": int(split_idx.size)}))
    n1 = len(gs)
    gs, keep = prune(gs, config.prune_alpha)
    origin = origin[keep]
    removed = np.setdiff1d(np.arange(n1), keep)
    events.append(DensifyEvent(iteration, "prune", removed.tolist(), n1, len(gs)))
    return gs, origin, events


def perceptual_selection(gs: GaussianSet, config, do_high: bool = True, do_medium: bool = True):
    """(D_h, D_m): sensitivity classes gated by their own weight threshold."""
    d_h = gate_by_weight(select_high(gs, config.tau_h), gs, config.tau_h_omega) if do_high \
        else np.zeros(0, dtype=np.int64)
    d_m = gate_by_weight(select_medium(gs, config.tau_l, config.tau_h), gs, config.tau_m_omega) \
        if do_medium else np.zeros(0, dtype=np.int64)
    return d_h, d_m


def perceptual_densify(gs: GaussianSet, beta: float, config, rng: np.random.Generator,
                       do_high: bool = True, do_medium: bool = True, allow_clone: bool = True,
                       iteration: int = 0):
    """Densify high/medium sensitivity primitives.

    ``max_view_weight`` must be fresh. High-sensitivity primitives are cloned
    with opacity decline in low-sensitivity scenes (beta < tau_beta), split
    otherwise; medium-sensitivity primitives are always split.
    """
    n0 = len(gs)
    d_h, d_m = perceptual_selection(gs, config, do_high, do_medium)
    clone_h = allow_clone and beta < config.tau_beta
    clone = d_h if clone_h else np.zeros(0, dtype=np.int64)
    split_idx = np.union1d(d_m, np.zeros(0, dtype=np.int64) if clone_h else d_h)
    out, origin = apply_surgery(gs, clone, split_idx, config.k, rng, config.split_scale_divisor)
    events = []
    n_mid = n0 + d_h.size  # clone and split both add one row per selection
    if do_high:
        events.append(DensifyEvent(iteration, "perceptual_h", d_h.tolist(), n0, n_mid,
                                   {"beta": beta, "op": "clone" if clone_h else "split"}))
    if do_medium:
        events.append(DensifyEvent(iteration, "perceptual_m", d_m.tolist(),
                                   n_mid if do_high else n0, len(out)))
    return out, origin, events


def reinit_gate(gs: GaussianSet, tau_l: float, tau_h: float, tau_gamma: float):
    """Fraction of the largest quartile (by longest axis) with medium sensitivity."""
    n = len(gs)
    if n == 0:
        return float("nan"), False
    s_max = gs.max_scales.astype(np.float64)
    rank = math.ceil(0.75 * n)
    q3 = np.sort(s_max)[rank - 1]
    large = np.flatnonzero(s_max > q3)
    if large.size == 0:
        return float("nan"), False
    medium = select_medium(gs, tau_l, tau_h)
    gamma = np.intersect1d(large, medium).size / large.size
    return float(gamma), bool(gamma > tau_gamma)


# -- initialization helpers --------------------------------------------------

def knn_mean_distance(points: np.ndarray, k: int = 3, fallback: float = 0.01) -> np.ndarray:
    """Mean distance from each point to its k nearest other points."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n < 2:
        return np.full(n, fallback)
    kk = min(k, n - 1)
    dist, _ = cKDTree(points).query(points, k=kk + 1)
    d = dist[:, 1:].mean(axis=1)
    return np.maximum(d, 1e-7)


def make_isotropic(points, colors, scale, dtype=np.float64) -> GaussianSet:
    n = len(points)
    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    return GaussianSet(
        means=np.asarray(points, dtype=dtype),
        log_scales=np.repeat(np.log(np.asarray(scale, dtype=np.float64))[:, None], 3, axis=1).astype(dtype),
        rotations=rot.astype(dtype),
        colors=np.clip(np.asarray(colors, dtype=np.float64), 0, 1).astype(dtype),
        opacity_logits=np.full(n, logit(INIT_OPACITY), dtype=dtype),
        sensitivity_logits=np.zeros(n, dtype=dtype),
    )


def depth_samples(gs: GaussianSet, views: Sequence[View], stride: int):
    """World points and colors back-projected from composited depth."""
    pts, cols = [], []
    for view in views:
        cam = view.camera
        out = render(gs, cam)
        rows = np.arange(0, cam.height, stride)
        cols_ = np.arange(0, cam.width, stride)
        rr, cc = np.meshgrid(rows, cols_, indexing="ij")
        acc = out.accum_alpha[rr, cc]
        ok = acc > 0.5
        if not ok.any():
            continue
        r, c = rr[ok], cc[ok]
        z = out.depth[r, c] / acc[ok]
        cam_pts = np.stack([(c + 0.5 - cam.cx) / cam.fx * z, (r + 0.5 - cam.cy) / cam.fy * z, z], axis=1)
        world = (cam_pts - cam.translation) @ cam.rotation
        pts.append(world)
        cols.append(view.gt_image[r, c])
    if not pts:
        return np.zeros((0, 3)), np.zeros((0, 3))
    return np.concatenate(pts), np.concatenate(cols)


def depth_reinit(gs: GaussianSet, views: Sequence[View], stride: int = 4,
                 fallback_scale: float = 0.01) -> GaussianSet:
    """Replace the set by one isotropic primitive per depth sample."""
    pts, cols = depth_samples(gs, views, stride)
    if len(pts) == 0:
        log.warning("depth reinitialization found no opaque samples; keeping the current set")
        return gs
    scale = knn_mean_distance(pts, 3, fallback_scale)
    return make_isotropic(pts, cols, scale, gs.dtype)
