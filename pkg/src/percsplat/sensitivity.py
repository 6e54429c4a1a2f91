"""Binary perceptual sensitivity maps from RGB images.

The response map is the Sobel gradient magnitude of luminance; it is
binarized at ``tau_e`` and then cleaned by a thresholded box average.
All neighborhood operations use replicate padding and accumulate taps in
row-major kernel order, so results do not depend on vectorization.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

SOBEL_X = np.array([[-1.0, 0.0, 1.0],
                    [-2.0, 0.0, 2.0],
                    [-1.0, 0.0, 1.0]])
SOBEL_Y = np.array([[-1.0, -2.0, -1.0],
                    [0.0, 0.0, 0.0],
                    [1.0, 2.0, 1.0]])


def luminance(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    # grouping chosen so that white maps to exactly 1.0
    return image[..., 0] * 0.299 + (image[..., 1] * 0.587 + image[..., 2] * 0.114)


def _correlate3(gray: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    h, w = gray.shape
    padded = np.pad(gray, 1, mode="edge")
    # positive and negative taps summed apart so zero-sum kernels give exact zeros on flat input
    pos = np.zeros_like(gray)
    neg = np.zeros_like(gray)
    for di in range(3):
        for dj in range(3):
            k = kernel[di, dj]
            if k > 0:
                pos = pos + k * padded[di:di + h, dj:dj + w]
            elif k < 0:
                neg = neg + (-k) * padded[di:di + h, dj:dj + w]
    return pos - neg


def sobel_magnitude(gray: np.ndarray) -> np.ndarray:
    gray = np.asarray(gray, dtype=np.float64)
    gx = _correlate3(gray, SOBEL_X)
    gy = _correlate3(gray, SOBEL_Y)
    return np.sqrt(gx * gx + gy * gy)


def enhance(response: np.ndarray, tau_e: float) -> np.ndarray:
    return (np.asarray(response) > tau_e).astype(np.float64)


def box_mean(image: np.ndarray, w: int) -> np.ndarray:
    if w < 1 or w % 2 == 0:
        raise ValueError("window size must be odd and >= 1")
    image = np.asarray(image, dtype=np.float64)
    r = w // 2
    h, wd = image.shape
    padded = np.pad(image, r, mode="edge")
    acc = np.zeros_like(image)
    for di in range(w):
        for dj in range(w):
            acc = acc + padded[di:di + h, dj:dj + wd]
    return acc / (w * w)


def smooth(binary: np.ndarray, w: int, tau_s: float) -> np.ndarray:
    return (box_mean(binary, w) > tau_s).astype(np.float64)


def extract(image: np.ndarray, tau_e: float = 0.05, tau_s: float = 0.3, w: int = 3) -> np.ndarray:
    """Sensitivity map of an H×W×3 image in [0, 1]."""
    response = sobel_magnitude(luminance(image))
    return smooth(enhance(response, tau_e), w, tau_s)


def raw_response(image: np.ndarray) -> np.ndarray:
    """Sobel response clipped to [0, 1]; continuous supervision target."""
    return np.clip(sobel_magnitude(luminance(image)), 0.0, 1.0)


def scene_sensitivity(maps: Sequence) -> float:
    """Mean over views of each view's mean sensitivity.

    Accepts View objects or bare arrays.
    """
    if len(maps) == 0:
        raise ValueError("scene sensitivity needs at least one view")
    per_view = [float(np.mean(getattr(m, "sens_map", m))) for m in maps]
    return float(sum(per_view) / len(per_view))
