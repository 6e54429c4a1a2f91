"""Dataset directories and synthetic teacher scenes.

A dataset directory holds ``cameras.json`` (a list of camera dicts, each
with an ``image`` filename relative to ``images/``), ``images/*.png``,
optionally ``sens/*.png`` (binary maps stored as 0/255) and optionally
``points.txt`` with ``x y z r g b`` per line.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from percsplat import checkpoint, sensitivity
from percsplat.model import Camera, GaussianSet, TrainConfig, View, logit
from percsplat.render import render

log = logging.getLogger(__name__)


class DatasetError(Exception):
    pass


class MissingCamerasError(DatasetError):
    pass


class MalformedCamerasError(DatasetError):
    pass


class ImageDecodeError(DatasetError):
    pass


class DimensionMismatchError(DatasetError):
    pass


def to_uint8(x: np.ndarray) -> np.ndarray:
    # round half away from zero on the non-negative range
    return np.floor(np.clip(np.asarray(x, np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_png(path, x: np.ndarray) -> None:
    Image.fromarray(to_uint8(x)).save(path, format="PNG")


def read_png(path, mode: str = "RGB") -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert(mode), dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise ImageDecodeError(f"{path}: cannot decode image ({exc})") from exc
    return arr


def write_sens_png(path, sens_map: np.ndarray) -> None:
    Image.fromarray((np.asarray(sens_map) > 0.5).astype(np.uint8) * 255).save(path, format="PNG")


def read_sens_png(path) -> np.ndarray:
    raw = read_png(path, mode="L")
    if not np.all((raw == 0.0) | (raw == 1.0)):
        raise ImageDecodeError(f"{path}: sensitivity map is not binary")
    return raw


def scene_extent(cameras: Sequence[Camera]) -> float:
    """Radius of the bounding sphere of camera centers (about their mean)."""
    centers = np.array([c.center for c in cameras])
    radius = float(np.linalg.norm(centers - centers.mean(axis=0), axis=1).max())
    return radius if radius > 0 else 1.0


@dataclass
class Dataset:
    root: Path
    views: list
    points: np.ndarray
    colors: np.ndarray

    @property
    def cameras(self) -> list:
        return [v.camera for v in self.views]

    @property
    def extent(self) -> float:
        return scene_extent(self.cameras)

    @property
    def beta(self) -> float:
        return sensitivity.scene_sensitivity(self.views)


def read_cameras(root: Path) -> list:
    path = root / "cameras.json"
    if not path.is_file():
        raise MissingCamerasError(f"{path}: missing cameras.json")
    try:
        entries = json.loads(path.read_text())
        if not isinstance(entries, list):
            raise ValueError("top level must be a list")
        return [(Camera.from_dict(e), str(e["image"])) for e in entries]
    except (ValueError, KeyError, TypeError) as exc:
        raise MalformedCamerasError(f"{path}: malformed camera list ({exc})") from exc


def load(root, config: Optional[TrainConfig] = None, n_random_points: int = 1000,
         seed: int = 0) -> Dataset:
    config = config or TrainConfig()
    root = Path(root)
    cams = read_cameras(root)
    sens_dir = root / "sens"
    cache = not sens_dir.is_dir()
    views = []
    for cam, name in cams:
        img_path = root / "images" / name
        if not img_path.is_file():
            raise ImageDecodeError(f"{img_path}: image file not found")
        img = read_png(img_path)
        if img.shape[:2] != (cam.height, cam.width):
            raise DimensionMismatchError(
                f"{img_path}: image is {img.shape[1]}x{img.shape[0]}, camera expects "
                f"{cam.width}x{cam.height}")
        sens_path = sens_dir / (Path(name).stem + ".png")
        if not cache and sens_path.is_file():
            smap = read_sens_png(sens_path)
            if smap.shape != img.shape[:2]:
                raise DimensionMismatchError(f"{sens_path}: sensitivity map size differs from image")
        else:
            smap = sensitivity.extract(img, config.tau_e, config.tau_s, config.smooth_window)
        views.append(View(cam, img, smap, name))
    if cache:
        sens_dir.mkdir(exist_ok=True)
        for view in views:
            write_sens_png(sens_dir / (Path(view.name).stem + ".png"), view.sens_map)
    pts_path = root / "points.txt"
    if pts_path.is_file():
        data = np.loadtxt(pts_path, ndmin=2)
        if data.shape[1] != 6:
            raise DatasetError(f"{pts_path}: expected 6 columns (x y z r g b)")
        points, colors = data[:, :3], data[:, 3:]
    else:
        points = random_points_in_frusta([v.camera for v in views], n_random_points,
                                         np.random.default_rng(seed))
        colors = np.full_like(points, 0.5)
    return Dataset(root, views, points, colors)


def _in_view(cam: Camera, pts: np.ndarray) -> np.ndarray:
    p = pts @ cam.rotation.T + cam.translation
    z = p[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * p[:, 0] / z + cam.cx
        v = cam.fy * p[:, 1] / z + cam.cy
    return (z > 0.01) & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)


def random_points_in_frusta(cameras: Sequence[Camera], n: int, rng: np.random.Generator,
                            max_rounds: int = 50) -> np.ndarray:
    """Uniform points inside the box spanned by the cameras, kept only where
    every camera sees them."""
    centers = np.array([c.center for c in cameras])
    pad = 0.5 * scene_extent(cameras)
    lo, hi = centers.min(axis=0) - pad, centers.max(axis=0) + pad
    kept = []
    total = 0
    for _ in range(max_rounds):
        cand = rng.uniform(lo, hi, size=(4 * n, 3))
        ok = np.ones(len(cand), dtype=bool)
        for cam in cameras:
            ok &= _in_view(cam, cand)
        kept.append(cand[ok])
        total += int(ok.sum())
        if total >= n:
            break
    pts = np.concatenate(kept)[:n]
    if len(pts) == 0:
        raise DatasetError("camera frusta do not overlap; cannot place random points")
    return pts


# -- synthetic teacher scene -----------------------------------------------------

def ring_cameras(n_views: int, resolution: int, radius: float = 3.0, height: float = 1.0,
                 fov_deg: float = 50.0) -> list:
    f = 0.5 * resolution / np.tan(np.radians(fov_deg) / 2)
    cams = []
    for i in range(n_views):
        ang = 2 * np.pi * i / n_views
        eye = [radius * np.cos(ang), radius * np.sin(ang), height]
        cams.append(Camera.look_at(eye, [0, 0, 0], [0, 0, 1], f, f, resolution, resolution))
    return cams


def make_teacher(n_gaussians: int, rng: np.random.Generator) -> GaussianSet:
    """Large smooth background blobs plus clusters of small, contrasting ones."""
    n_bg = max(1, n_gaussians // 5)
    n_small = n_gaussians - n_bg
    bg_means = rng.uniform(-0.6, 0.6, size=(n_bg, 3))
    bg_scales = rng.uniform(0.12, 0.3, size=(n_bg, 3))
    bg_colors = rng.uniform(0.2, 0.8, size=(n_bg, 3))
    bg_opac = rng.uniform(0.6, 0.95, size=n_bg)

    n_clusters = max(1, n_small // 30)
    centers = rng.uniform(-0.5, 0.5, size=(n_clusters, 3))
    which = rng.integers(0, n_clusters, size=n_small)
    sm_means = centers[which] + rng.normal(0, 0.12, size=(n_small, 3))
    sm_scales = rng.uniform(0.012, 0.04, size=(n_small, 3))
    sm_colors = rng.choice([0.05, 0.95], size=(n_small, 3)) * 0.8 + rng.uniform(0, 0.2, size=(n_small, 3))
    sm_opac = rng.uniform(0.7, 0.99, size=n_small)

    n = n_bg + n_small
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianSet(
        means=np.concatenate([bg_means, sm_means]).astype(np.float32),
        log_scales=np.log(np.concatenate([bg_scales, sm_scales])).astype(np.float32),
        rotations=q.astype(np.float32),
        colors=np.clip(np.concatenate([bg_colors, sm_colors]), 0, 1).astype(np.float32),
        opacity_logits=logit(np.concatenate([bg_opac, sm_opac])).astype(np.float32),
        sensitivity_logits=np.zeros(n, dtype=np.float32),
    )


def write_dataset(root, cameras: Sequence[Camera], images: Sequence[np.ndarray],
                  points: Optional[np.ndarray] = None, colors: Optional[np.ndarray] = None) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (cam, img) in enumerate(zip(cameras, images)):
        name = f"view_{i:03d}.png"
        write_png(root / "images" / name, img)
        entries.append({**cam.to_dict(), "image": name})
    (root / "cameras.json").write_text(json.dumps(entries, indent=1) + "\n")
    if points is not None:
        lines = [" ".join(repr(float(v)) for v in (*p, *c)) for p, c in zip(points, colors)]
        (root / "points.txt").write_text("\n".join(lines) + "\n")
    return root


def make_teacher_scene(root, n_gaussians: int = 300, n_views: int = 5, resolution: int = 128,
                       seed: int = 7, init_fraction: float = 0.1, init_noise: float = 0.02) -> Path:
    """Render a random teacher set into a dataset directory.

    Also writes ``teacher.ckpt`` and a sparse, noisy ``points.txt``
    subsampled from the teacher means.
    """
    rng = np.random.default_rng(seed)
    teacher = make_teacher(n_gaussians, rng)
    cams = ring_cameras(n_views, resolution)
    images = [render(teacher, cam).rgb for cam in cams]
    n_init = max(1, int(round(init_fraction * n_gaussians)))
    pick = np.sort(rng.choice(n_gaussians, size=n_init, replace=False))
    pts = teacher.means[pick].astype(np.float64) + rng.normal(0, init_noise, size=(n_init, 3))
    cols = teacher.colors[pick].astype(np.float64)
    root = write_dataset(root, cams, images, pts, cols)
    checkpoint.save(root / "teacher.ckpt", checkpoint.Checkpoint(teacher, 0, None))
    return root
