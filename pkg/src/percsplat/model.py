"""Shared domain types: primitives, cameras, views, configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

LOGIT_CLAMP = 12.0


def sigmoid(x):
    x = np.asarray(x)
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p)
    return np.log(p) - np.log1p(-p)


def clamped_logit(p, bound: float = LOGIT_CLAMP):
    with np.errstate(divide="ignore"):
        return np.clip(logit(p), -bound, bound)


@dataclass
class GaussianSet:
    """Structure-of-arrays container for N Gaussian primitives.

    Rotations are (w, x, y, z) quaternions. Colors are degree-0 RGB.
    ``accum_posgrad_norm``/``accum_denom`` hold the running screen-space
    gradient statistic used by density control; ``max_view_weight`` is the
    per-primitive maximum over views of summed blending weight.
    """

    means: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    colors: np.ndarray
    opacity_logits: np.ndarray
    sensitivity_logits: np.ndarray
    accum_posgrad_norm: np.ndarray = None
    accum_denom: np.ndarray = None
    max_view_weight: np.ndarray = None

    PARAMS = ("means", "log_scales", "rotations", "colors", "opacity_logits", "sensitivity_logits")
    STATS = ("accum_posgrad_norm", "accum_denom", "max_view_weight")
    WIDTHS = {"means": 3, "log_scales": 3, "rotations": 4, "colors": 3}

    def __post_init__(self):
        dtype = np.asarray(self.means).dtype
        if dtype not in (np.float32, np.float64):
            dtype = np.float64
        for name in self.PARAMS:
            arr = np.asarray(getattr(self, name), dtype=dtype)
            width = self.WIDTHS.get(name)
            if width is not None:
                arr = arr.reshape(-1, width)
            else:
                arr = arr.reshape(-1)
            setattr(self, name, arr)
        n = len(self.means)
        for name in self.STATS:
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(n, dtype=dtype))
            else:
                setattr(self, name, np.asarray(getattr(self, name), dtype=dtype).reshape(-1))

    def __len__(self) -> int:
        return len(self.means)

    @property
    def dtype(self):
        return self.means.dtype

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def sensitivities(self) -> np.ndarray:
        return sigmoid(self.sensitivity_logits)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def max_scales(self) -> np.ndarray:
        if len(self) == 0:
            return np.zeros(0, dtype=self.dtype)
        return np.exp(self.log_scales.max(axis=1))

    @classmethod
    def empty(cls, dtype=np.float64) -> "GaussianSet":
        z = lambda w: np.zeros((0, w), dtype=dtype)  # noqa: E731
        return cls(z(3), z(3), z(4), z(3), np.zeros(0, dtype), np.zeros(0, dtype))

    @classmethod
    def init_random(cls, n: int, rng: np.random.Generator, extent: float = 1.0,
                    dtype=np.float64) -> "GaussianSet":
        q = rng.normal(size=(n, 4))
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        return cls(
            means=rng.uniform(-extent, extent, size=(n, 3)).astype(dtype),
            log_scales=np.log(rng.uniform(0.02, 0.2, size=(n, 3)) * extent).astype(dtype),
            rotations=q.astype(dtype),
            colors=rng.uniform(0, 1, size=(n, 3)).astype(dtype),
            opacity_logits=rng.uniform(-3, 3, size=n).astype(dtype),
            sensitivity_logits=rng.uniform(-3, 3, size=n).astype(dtype),
        )

    def astype(self, dtype) -> "GaussianSet":
        kw = {name: getattr(self, name).astype(dtype) for name in self.PARAMS + self.STATS}
        return GaussianSet(**kw)

    def copy(self) -> "GaussianSet":
        return self.astype(self.dtype)

    def take(self, idx) -> "GaussianSet":
        idx = np.asarray(idx)
        return GaussianSet(**{name: getattr(self, name)[idx] for name in self.PARAMS + self.STATS})

    def concat(self, other: "GaussianSet") -> "GaussianSet":
        return GaussianSet(**{
            name: np.concatenate([getattr(self, name), getattr(other, name).astype(self.dtype)])
            for name in self.PARAMS + self.STATS
        })

    def reset_stats(self) -> None:
        self.accum_posgrad_norm[:] = 0
        self.accum_denom[:] = 0


def validate(gs: GaussianSet) -> list[str]:
    """Return a list of human-readable invariant violations (empty if valid)."""
    problems = []
    n = len(gs.means)
    for name in GaussianSet.PARAMS + GaussianSet.STATS:
        arr = getattr(gs, name)
        if len(arr) != n:
            problems.append(f"{name}: length {len(arr)} != {n}")
        elif not np.all(np.isfinite(arr)):
            bad = np.flatnonzero(~np.isfinite(arr).reshape(len(arr), -1).all(axis=1))
            problems.append(f"{name}: non-finite at indices {bad.tolist()}")
    if problems:
        return problems
    with np.errstate(over="ignore"):
        scales = np.exp(gs.log_scales.astype(np.float64))
    bad = np.flatnonzero(~(np.isfinite(scales) & (scales > 0)).all(axis=1))
    if len(bad):
        problems.append(f"log_scales: scale not finite/positive at indices {bad.tolist()}")
    norms = np.linalg.norm(gs.rotations.astype(np.float64), axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > 1e-6)
    if len(bad):
        problems.append(f"rotations: non-unit quaternion at indices {bad.tolist()}")
    bad = np.flatnonzero(~((gs.colors >= 0) & (gs.colors <= 1)).all(axis=1))
    if len(bad):
        problems.append(f"colors: outside [0, 1] at indices {bad.tolist()}")
    for name in ("opacity_logits", "sensitivity_logits"):
        p = sigmoid(getattr(gs, name).astype(np.float64))
        bad = np.flatnonzero(~((p > 0) & (p < 1)))
        if len(bad):
            problems.append(f"{name}: sigmoid saturates at indices {bad.tolist()}")
    return problems


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_cam: np.ndarray

    def __post_init__(self):
        self.world_to_cam = np.asarray(self.world_to_cam, dtype=np.float64).reshape(4, 4)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")
        r = self.world_to_cam[:3, :3]
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-6:
            raise ValueError("world_to_cam rotation block is not orthonormal")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_cam[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_cam[:3, 3]

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, width, height) -> "Camera":
        """OpenCV convention: +x right, +y down, +z forward."""
        eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
        z = target - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, up)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        r = np.stack([x, y, z])
        m = np.eye(4)
        m[:3, :3] = r
        m[:3, 3] = -r @ eye
        return cls(fx, fy, width / 2.0, height / 2.0, width, height, m)

    def to_dict(self) -> dict:
        return {
            "fx": float(self.fx), "fy": float(self.fy), "cx": float(self.cx), "cy": float(self.cy),
            "width": int(self.width), "height": int(self.height),
            "world_to_cam": [float(v) for v in self.world_to_cam.reshape(-1)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]), np.asarray(d["world_to_cam"], dtype=np.float64))


@dataclass
class View:
    camera: Camera
    gt_image: np.ndarray
    sens_map: np.ndarray
    name: str = ""
    avg_sensitivity: float = field(init=False)

    def __post_init__(self):
        self.sens_map = np.asarray(self.sens_map, dtype=np.float64)
        if not np.all((self.sens_map == 0.0) | (self.sens_map == 1.0)):
            raise ValueError("sensitivity map must be binary")
        h, w = self.gt_image.shape[:2]
        if self.sens_map.shape != (h, w) or (h, w) != (self.camera.height, self.camera.width):
            raise ValueError("view image, sensitivity map and camera size disagree")
        self.avg_sensitivity = float(self.sens_map.mean())


@dataclass
class RenderOutput:
    rgb: np.ndarray
    sens: np.ndarray
    depth: np.ndarray
    accum_alpha: np.ndarray
    weight_sums: Optional[np.ndarray] = None


@dataclass
class TrainConfig:
    # perceptual sensitivity extraction
    tau_e: float = 0.05
    tau_s: float = 0.3
    smooth_window: int = 3
    # losses
    lambda_s: float = 0.1
    ssim_weight: float = 0.2
    # perceptual densification
    iter_h: int = 1000
    iter_m: int = 1500
    tau_h: float = 0.9
    tau_l: float = 0.3
    tau_h_omega: float = 25.0
    tau_m_omega: float = 10.0
    tau_beta: float = 0.85
    tau_gamma: float = 0.55
    od_exponent: float = 1.2
    warmup_iters: int = 500
    reinit_stride: int = 4
    # inherited density control
    densify_grad_threshold: float = 2e-4
    densify_interval: int = 100
    densify_until: int = 15000
    opacity_reset_interval: int = 3000
    prune_alpha: float = 0.005
    split_scale_divisor: float = 1.6
    percent_dense: float = 0.01
    # optimization
    total_iters: int = 30000
    seed: int = 0
    checkpoint_interval: int = 0
    eval_interval: int = 0
    lr_means_init: float = 1.6e-4
    lr_means_final: float = 1.6e-6
    lr_colors: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_scales: float = 5e-3
    lr_rotations: float = 1e-3
    lr_sensitivity: float = 5e-2
    precision: str = "float32"
    # ablation switches
    disable_pe: bool = False
    disable_hd: bool = False
    disable_md: bool = False
    disable_sdr: bool = False
    disable_od: bool = False
    vanilla: bool = False

    def __post_init__(self):
        self.check()

    def check(self) -> None:
        if not 0 < self.tau_l < self.tau_h < 1:
            raise ValueError("need 0 < tau_l < tau_h < 1")
        for name in ("tau_e", "tau_s"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")
        if not 0 <= self.lambda_s <= 1:
            raise ValueError("lambda_s must lie in [0, 1]")
        if self.od_exponent < 1:
            raise ValueError("od_exponent must be >= 1")
        if self.smooth_window < 1 or self.smooth_window % 2 == 0:
            raise ValueError("smooth_window must be odd and >= 1")
        for name in ("iter_h", "iter_m", "densify_interval", "opacity_reset_interval", "reinit_stride"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.total_iters < 0 or self.warmup_iters < 0:
            raise ValueError("iteration counts must be non-negative")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    @property
    def k(self) -> float:
        return 1.0 if self.disable_od or self.vanilla else self.od_exponent

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    # key=value text form, shared by config files and checkpoint trailers
    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in dataclasses.fields(self))

    @classmethod
    def from_text(cls, text: str, base: Optional["TrainConfig"] = None) -> "TrainConfig":
        values = parse_key_values(text)
        return cls.from_mapping(values, base)

    @classmethod
    def from_mapping(cls, values: dict, base: Optional["TrainConfig"] = None) -> "TrainConfig":
        types = {f.name: f for f in dataclasses.fields(cls)}
        changes = {}
        for key, raw in values.items():
            if key not in types:
                raise KeyError(f"unknown config key {key!r}")
            default = getattr(base or cls(), key)
            changes[key] = _coerce(key, raw, default)
        return dataclasses.replace(base or cls(), **changes)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text())


def parse_key_values(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, raw = line.partition("=")
        values[key.strip()] = raw.strip()
    return values


def _coerce(key, raw, default):
    if not isinstance(raw, str):
        return type(default)(raw)
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw.strip("'\"")
