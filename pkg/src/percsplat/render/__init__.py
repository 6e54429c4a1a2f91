"""Projection, dual-branch compositing and its analytic gradient.

:func:`render` and :func:`backward` are the functional entry points; the
trainer uses :class:`Frame` directly so the projection and tile binning are
shared between the forward and backward pass of one view.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from percsplat.model import Camera, GaussianSet, RenderOutput, sigmoid
from percsplat.render import kernels

NEAR = 0.01
LOWPASS = 0.3
TILE = 16


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for already-normalized (w, x, y, z) quaternions."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    r = np.empty((len(q), 3, 3))
    r[:, 0, 0] = 1 - 2 * (y * y + z * z)
    r[:, 0, 1] = 2 * (x * y - w * z)
    r[:, 0, 2] = 2 * (x * z + w * y)
    r[:, 1, 0] = 2 * (x * y + w * z)
    r[:, 1, 1] = 1 - 2 * (x * x + z * z)
    r[:, 1, 2] = 2 * (y * z - w * x)
    r[:, 2, 0] = 2 * (x * z - w * y)
    r[:, 2, 1] = 2 * (y * z + w * x)
    r[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def _rotmat_grad_to_quat(q: np.ndarray, g: np.ndarray) -> np.ndarray:
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    gq = np.empty_like(q)
    gq[:, 0] = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0]
                    - x * g[:, 1, 2] - y * g[:, 2, 0] + x * g[:, 2, 1])
    gq[:, 1] = (2 * (y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0]
                     - w * g[:, 1, 2] + z * g[:, 2, 0] + w * g[:, 2, 1])
                - 4 * x * (g[:, 1, 1] + g[:, 2, 2]))
    gq[:, 2] = (2 * (x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0]
                     + z * g[:, 1, 2] - w * g[:, 2, 0] + z * g[:, 2, 1])
                - 4 * y * (g[:, 0, 0] + g[:, 2, 2]))
    gq[:, 3] = (2 * (-w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0]
                     + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1])
                - 4 * z * (g[:, 0, 0] + g[:, 1, 1]))
    return gq


@dataclass
class Projected:
    """Screen-space splats of the primitives in front of the near plane,
    sorted by (view depth, source index)."""

    mean2d: np.ndarray
    cov2d: np.ndarray
    view_depth: np.ndarray
    source_index: np.ndarray

    def __len__(self) -> int:
        return len(self.source_index)


@dataclass
class GradientBuffer:
    means: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    colors: np.ndarray
    opacity_logits: np.ndarray
    sensitivity_logits: np.ndarray
    mean2d_norm: np.ndarray  # NDC-scaled screen-space gradient norm per primitive
    visible: np.ndarray

    @classmethod
    def zeros(cls, n: int, dtype=np.float64) -> "GradientBuffer":
        z = lambda *s: np.zeros(s, dtype=dtype)  # noqa: E731
        return cls(z(n, 3), z(n, 3), z(n, 4), z(n, 3), z(n), z(n), z(n), np.zeros(n, dtype=bool))

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in GaussianSet.PARAMS}


class Frame:
    """Projection and tile lists of one (set, camera) pair."""

    def __init__(self, gs: GaussianSet, cam: Camera, exact: bool = False):
        self.gs = gs
        self.cam = cam
        self.exact = exact
        self.n = len(gs)
        rw = cam.rotation
        means = gs.means.astype(np.float64)
        p = means @ rw.T + cam.translation
        front = np.flatnonzero(p[:, 2] > NEAR)
        order = np.argsort(p[front, 2], kind="stable")
        idx = front[order]
        self.index = idx
        p = p[idx]
        self.p = p
        x, y, z = p[:, 0], p[:, 1], p[:, 2]

        quats = gs.rotations[idx].astype(np.float64)
        qnorm = np.linalg.norm(quats, axis=1)
        qn = quats / qnorm[:, None]
        rot = quat_to_rotmat(qn)
        scale = np.exp(gs.log_scales[idx].astype(np.float64))
        m = rot * scale[:, None, :]
        sigma = m @ m.transpose(0, 2, 1)

        jac = np.zeros((len(idx), 2, 3))
        jac[:, 0, 0] = cam.fx / z
        jac[:, 0, 2] = -cam.fx * x / (z * z)
        jac[:, 1, 1] = cam.fy / z
        jac[:, 1, 2] = -cam.fy * y / (z * z)
        tmat = jac @ rw
        cov = tmat @ sigma @ tmat.transpose(0, 2, 1)
        cov[:, 0, 0] += LOWPASS
        cov[:, 1, 1] += LOWPASS
        a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
        det = a * c - b * b
        conic = np.stack([c / det, -b / det, a / det], axis=1)
        lam = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))

        self.xy = np.stack([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy], axis=1)
        self.cov = cov
        self.conic = conic
        self.radius = 3.0 * np.sqrt(lam)
        self.qn, self.qnorm, self.rot, self.scale = qn, qnorm, rot, scale
        self.m, self.sigma, self.tmat = m, sigma, tmat
        self.opac = sigmoid(gs.opacity_logits[idx].astype(np.float64))
        self.color = np.ascontiguousarray(gs.colors[idx], dtype=np.float64)
        self.sens = sigmoid(gs.sensitivity_logits[idx].astype(np.float64))
        self.offsets, self.entries = kernels.bin_tiles(
            self.xy, self.radius, cam.width, cam.height, TILE, exact)

    def projected(self) -> Projected:
        return Projected(self.xy.copy(), self.cov.copy(), self.p[:, 2].copy(), self.index.copy())

    def visible(self) -> np.ndarray:
        """Mask over the full set: primitive touches at least one tile."""
        counts = np.bincount(self.entries, minlength=len(self.index))
        mask = np.zeros(self.n, dtype=bool)
        mask[self.index[counts > 0]] = True
        return mask

    def forward(self, want_weight_sums: bool = False) -> RenderOutput:
        cam = self.cam
        rgb, sens, depth, final_t, wbuf = kernels.forward(
            self.xy, self.conic, self.opac, self.color, self.sens, self.p[:, 2].copy(),
            self.offsets, self.entries, cam.width, cam.height, TILE, self.exact, want_weight_sums)
        weight_sums = None
        if want_weight_sums:
            weight_sums = np.zeros(self.n)
            weight_sums[self.index] = kernels.merge_scalar(wbuf, self.entries, len(self.index))
        self.final_t = final_t
        return RenderOutput(rgb, sens, depth, 1.0 - final_t, weight_sums)

    def backward(self, d_rgb: np.ndarray, d_sens: Optional[np.ndarray] = None) -> GradientBuffer:
        cam = self.cam
        dtype = self.gs.dtype
        d_rgb = np.ascontiguousarray(d_rgb, dtype=np.float64)
        if d_sens is None:
            d_sens = np.zeros((cam.height, cam.width))
        d_sens = np.ascontiguousarray(d_sens, dtype=np.float64)
        gbuf = kernels.backward(self.xy, self.conic, self.opac, self.color, self.sens,
                                self.offsets, self.entries, cam.width, cam.height, TILE,
                                self.exact, d_rgb, d_sens)
        g = kernels.merge_rows(gbuf, self.entries, len(self.index))
        out = GradientBuffer.zeros(self.n, dtype)
        if len(self.index) == 0:
            return out
        idx = self.index
        g_xy = g[:, kernels.G_X:kernels.G_Y + 1]
        g_conic = g[:, kernels.G_CA:kernels.G_CC + 1]

        # conic = inverse(cov): dL/dcov = -K (dL/dK) K with the off-diagonal split evenly
        k_mat = np.empty((len(idx), 2, 2))
        k_mat[:, 0, 0] = self.conic[:, 0]
        k_mat[:, 0, 1] = k_mat[:, 1, 0] = self.conic[:, 1]
        k_mat[:, 1, 1] = self.conic[:, 2]
        gk = np.empty_like(k_mat)
        gk[:, 0, 0] = g_conic[:, 0]
        gk[:, 0, 1] = gk[:, 1, 0] = 0.5 * g_conic[:, 1]
        gk[:, 1, 1] = g_conic[:, 2]
        g_cov = -k_mat @ gk @ k_mat

        tmat, sigma = self.tmat, self.sigma
        g_sigma = tmat.transpose(0, 2, 1) @ g_cov @ tmat
        g_t = 2.0 * g_cov @ tmat @ sigma
        g_j = g_t @ cam.rotation.T

        x, y, z = self.p[:, 0], self.p[:, 1], self.p[:, 2]
        fx, fy = cam.fx, cam.fy
        g_p = np.zeros((len(idx), 3))
        g_p[:, 0] = g_xy[:, 0] * fx / z - g_j[:, 0, 2] * fx / (z * z)
        g_p[:, 1] = g_xy[:, 1] * fy / z - g_j[:, 1, 2] * fy / (z * z)
        g_p[:, 2] = (-g_xy[:, 0] * fx * x / (z * z) - g_xy[:, 1] * fy * y / (z * z)
                     - g_j[:, 0, 0] * fx / (z * z) + g_j[:, 0, 2] * 2 * fx * x / z ** 3
                     - g_j[:, 1, 1] * fy / (z * z) + g_j[:, 1, 2] * 2 * fy * y / z ** 3)
        g_means = g_p @ cam.rotation

        g_m = 2.0 * g_sigma @ self.m
        g_rot = g_m * self.scale[:, None, :]
        g_scale = (self.rot * g_m).sum(axis=1)
        g_qn = _rotmat_grad_to_quat(self.qn, g_rot)
        g_q = (g_qn - self.qn * (self.qn * g_qn).sum(axis=1, keepdims=True)) / self.qnorm[:, None]

        out.means[idx] = g_means
        out.log_scales[idx] = g_scale * self.scale
        out.rotations[idx] = g_q
        out.colors[idx] = g[:, kernels.G_R:kernels.G_B + 1]
        out.opacity_logits[idx] = g[:, kernels.G_OPAC] * self.opac * (1.0 - self.opac)
        out.sensitivity_logits[idx] = g[:, kernels.G_SENS] * self.sens * (1.0 - self.sens)
        ndc = g_xy * np.array([0.5 * cam.width, 0.5 * cam.height])
        out.mean2d_norm[idx] = np.sqrt((ndc ** 2).sum(axis=1))
        out.visible[:] = self.visible()
        return out


def project(gs: GaussianSet, cam: Camera) -> Projected:
    return Frame(gs, cam).projected()


def render(gs: GaussianSet, cam: Camera, want_weight_sums: bool = False,
           exact: bool = False) -> RenderOutput:
    """Composite both branches front to back.

    ``exact=True`` disables the 3-sigma cutoff, the 1/255 contribution
    floor and early termination, giving a smooth reference path.
    """
    return Frame(gs, cam, exact).forward(want_weight_sums)


def backward(gs: GaussianSet, cam: Camera, d_rgb: np.ndarray,
             d_sens: Optional[np.ndarray] = None, exact: bool = False) -> GradientBuffer:
    return Frame(gs, cam, exact).backward(d_rgb, d_sens)


def weight_sweep(gs: GaussianSet, cameras: Sequence[Camera]) -> np.ndarray:
    """Per-primitive max over views of summed blending weight; stored on the set."""
    if len(cameras) == 0:
        raise ValueError("weight sweep needs at least one view")
    best = np.zeros(len(gs))
    for cam in cameras:
        cam = getattr(cam, "camera", cam)
        best = np.maximum(best, render(gs, cam, want_weight_sums=True).weight_sums)
    gs.max_view_weight[:] = best
    return best
