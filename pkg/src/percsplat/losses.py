"""Photometric and sensitivity losses with analytic image-space gradients.

SSIM uses an 11-tap Gaussian window (sigma 1.5) and is averaged over the
pixels whose window lies fully inside the image, per channel. All
computations run in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

C1 = 0.01 ** 2
C2 = 0.03 ** 2
WINDOW = 11
SIGMA = 1.5
BCE_EPS = 1e-6
PSNR_CAP = 100.0


def gaussian_window(size: int = WINDOW, sigma: float = SIGMA) -> np.ndarray:
    x = np.arange(size) - size // 2
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


_KERNEL = gaussian_window()
_R = WINDOW // 2


def _blur_valid(x: np.ndarray) -> np.ndarray:
    y = ndimage.correlate1d(x, _KERNEL, axis=0, mode="constant")
    y = ndimage.correlate1d(y, _KERNEL, axis=1, mode="constant")
    return y[_R:-_R, _R:-_R]


def _blur_valid_adjoint(g: np.ndarray) -> np.ndarray:
    pad = [(_R, _R), (_R, _R)] + [(0, 0)] * (g.ndim - 2)
    y = np.pad(g, pad)
    y = ndimage.correlate1d(y, _KERNEL[::-1], axis=0, mode="constant")
    return ndimage.correlate1d(y, _KERNEL[::-1], axis=1, mode="constant")


def _as_channels(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[..., None] if x.ndim == 2 else x


def ssim_and_grad(x: np.ndarray, y: np.ndarray, want_grad: bool = True):
    """Mean SSIM of ``x`` against ``y`` and its gradient w.r.t. ``x``."""
    squeeze = np.ndim(x) == 2
    x = _as_channels(x)
    y = _as_channels(y)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if min(x.shape[:2]) < WINDOW:
        raise ValueError(f"images must be at least {WINDOW}x{WINDOW} for SSIM")
    mu_x = _blur_valid(x)
    mu_y = _blur_valid(y)
    e_xx = _blur_valid(x * x)
    e_yy = _blur_valid(y * y)
    e_xy = _blur_valid(x * y)
    var_x = e_xx - mu_x * mu_x
    var_y = e_yy - mu_y * mu_y
    cov = e_xy - mu_x * mu_y
    a1 = 2 * mu_x * mu_y + C1
    a2 = 2 * cov + C2
    b1 = mu_x * mu_x + mu_y * mu_y + C1
    b2 = var_x + var_y + C2
    # factored as two ratios so x == y gives exactly 1 and an exactly zero gradient
    r1 = a1 / b1
    r2 = a2 / b2
    smap = r1 * r2
    value = float(smap.mean())
    if not want_grad:
        return value, None
    scale = 1.0 / smap.size
    # partials of the map w.r.t. (mu_x, var_x, cov), then through the moments
    d_mu = (2 / b1) * (mu_y * r2 - mu_x * smap) * scale
    d_var = (-smap / b2) * scale
    d_cov = (2 * r1 / b2) * scale
    d_mu_total = d_mu - 2 * mu_x * d_var - mu_y * d_cov
    grad = (_blur_valid_adjoint(d_mu_total)
            + 2 * x * _blur_valid_adjoint(d_var)
            + y * _blur_valid_adjoint(d_cov))
    if squeeze:
        grad = grad[..., 0]
    return value, grad


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    return ssim_and_grad(a, b, want_grad=False)[0]


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def l1_and_grad(x: np.ndarray, y: np.ndarray):
    d = np.asarray(x, np.float64) - np.asarray(y, np.float64)
    return float(np.abs(d).mean()), np.sign(d) / d.size


def rgb_loss(render: np.ndarray, gt: np.ndarray, lam: float = 0.2):
    """(1 - lam) * L1 + lam * (1 - SSIM). Returns (value, grad, l1, dssim)."""
    render = np.asarray(render, np.float64)
    gt = np.asarray(gt, np.float64)
    if render.shape != gt.shape:
        raise ValueError(f"shape mismatch: {render.shape} vs {gt.shape}")
    l1, g_l1 = l1_and_grad(render, gt)
    s, g_s = ssim_and_grad(render, gt)
    dssim = 1.0 - s
    value = (1 - lam) * l1 + lam * dssim
    grad = (1 - lam) * g_l1 - lam * g_s
    return value, grad, l1, dssim


def sens_loss(render_sens: np.ndarray, target: np.ndarray):
    """Binary cross-entropy of the rendered sensitivity against a binary map."""
    p = np.asarray(render_sens, np.float64)
    y = np.asarray(target, np.float64)
    pc = np.clip(p, BCE_EPS, 1 - BCE_EPS)
    value = float(np.mean(-(y * np.log(pc) + (1 - y) * np.log(1 - pc))))
    inside = (p >= BCE_EPS) & (p <= 1 - BCE_EPS)
    grad = np.where(inside, (-y / pc + (1 - y) / (1 - pc)) / p.size, 0.0)
    return value, grad


def total_loss(l_c: float, l_s: float, lambda_s: float) -> float:
    return (1 - lambda_s) * l_c + lambda_s * l_s


@dataclass
class LossReport:
    l1: float
    dssim: float
    l_c: float
    l_s: float
    total: float
