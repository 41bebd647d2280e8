"""Timestep-aware crop sizes and deterministic crop-and-resize.

The crop side grows linearly from ``s_min`` at t=0 to ``s_max`` at t=T
(``low_to_high``), is rounded to the nearest multiple of ``d`` (ties up) and
clamped to the range. Every crop is resized to ``s_min x s_min`` with
bilinear, half-pixel-centre sampling whose coordinates are computed in exact
integer arithmetic.
"""

from __future__ import annotations

import math
from functools import lru_cache
from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np

SCHEDULES = ("low_to_high", "high_to_low", "random", "fixed_resize")


@dataclass(frozen=True)
class PatchPlannerConfig:
    s_min: int = 16
    s_max: int = 64
    max_t: int = 1000
    d: int = 4
    schedule: str = "low_to_high"

    def __post_init__(self):
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}; expected one of {SCHEDULES}")
        if not 0 < self.s_min <= self.s_max:
            raise ValueError("need 0 < s_min <= s_max")
        if self.s_min % self.d or self.s_max % self.d:
            raise ValueError(f"s_min and s_max must be multiples of d={self.d}")
        if self.max_t < 1:
            raise ValueError("max_t must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def _check_t(cfg: PatchPlannerConfig, t) -> None:
    if not 0 <= t <= cfg.max_t:
        raise ValueError(f"timestep {t} outside [0, {cfg.max_t}]")


def raw_patch_size(cfg: PatchPlannerConfig, t) -> Fraction:
    """The continuous crop side before discretization."""
    _check_t(cfg, t)
    frac = Fraction(t) / cfg.max_t
    span = cfg.s_max - cfg.s_min
    if cfg.schedule == "high_to_low":
        return cfg.s_max - frac * span
    if cfg.schedule == "fixed_resize":
        return Fraction(cfg.s_max)
    return cfg.s_min + frac * span


def round_to_multiple(x: Fraction, d: int) -> int:
    """Nearest multiple of d; exact halves round up."""
    return d * math.floor(Fraction(x) / d + Fraction(1, 2))


def patch_size(cfg: PatchPlannerConfig, t, rng: np.random.Generator | None = None) -> int:
    _check_t(cfg, t)
    if cfg.schedule == "random":
        if rng is None:
            raise ValueError("the random schedule needs an rng")
        choices = (cfg.s_max - cfg.s_min) // cfg.d + 1
        return cfg.s_min + cfg.d * int(rng.integers(choices))
    p = round_to_multiple(raw_patch_size(cfg, t), cfg.d)
    return min(max(p, cfg.s_min), cfg.s_max)


@dataclass(frozen=True)
class PatchPlan:
    iteration: int
    t: int
    raw_size: float
    size: int
    x: int
    y: int
    source_id: int
    seed: int

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PatchPlan":
        return cls(**d)


def plan_patch(cfg: PatchPlannerConfig, image_hw: tuple[int, int], t: int, seed: int,
               iteration: int = 0, source_id: int = 0) -> PatchPlan:
    h, w = image_hw
    if h < cfg.s_max or w < cfg.s_max:
        raise ValueError(f"image {h}x{w} smaller than s_max={cfg.s_max}")
    rng = np.random.default_rng([seed, 1])
    p = patch_size(cfg, t, rng)
    x = int(rng.integers(w - p + 1))
    y = int(rng.integers(h - p + 1))
    raw = p if cfg.schedule == "random" else float(raw_patch_size(cfg, t))
    return PatchPlan(iteration, int(t), raw, p, x, y, source_id, int(seed))


@lru_cache(maxsize=256)
def _axis_taps(src: int, dst: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Lower/upper source indices and lerp weights for one axis."""
    lo = np.empty(dst, dtype=np.int64)
    hi = np.empty(dst, dtype=np.int64)
    w = np.empty(dst, dtype=np.float64)
    den = 2 * dst
    for i in range(dst):
        num = (2 * i + 1) * src - dst     # source coordinate = num / den
        if num <= 0:
            lo[i], w[i] = 0, 0.0
        else:
            q, r = divmod(num, den)
            lo[i], w[i] = q, r / den
        if lo[i] >= src - 1:
            lo[i], w[i] = src - 1, 0.0
        hi[i] = min(lo[i] + 1, src - 1)
    return lo, hi, w


def resize_bilinear(img: np.ndarray, size: int) -> np.ndarray:
    """(C, H, W) -> (C, size, size); constant inputs stay exactly constant."""
    c, h, w = img.shape
    lo, hi, wt = _axis_taps(h, size)
    wt = wt.astype(img.dtype)[None, :, None]
    a, b = img[:, lo, :], img[:, hi, :]
    rows = a + wt * (b - a)
    lo, hi, wt = _axis_taps(w, size)
    wt = wt.astype(img.dtype)[None, None, :]
    a, b = rows[:, :, lo], rows[:, :, hi]
    return a + wt * (b - a)


def crop_resize(image: np.ndarray, plan: PatchPlan, out_size: int) -> np.ndarray:
    _, h, w = image.shape
    if plan.x + plan.size > w or plan.y + plan.size > h:
        raise ValueError("crop rectangle leaves the image")
    crop = image[:, plan.y:plan.y + plan.size, plan.x:plan.x + plan.size]
    return resize_bilinear(crop, out_size)


def sample_patch(cfg: PatchPlannerConfig, image: np.ndarray, t: int, seed: int,
                 iteration: int = 0, source_id: int = 0) -> tuple[PatchPlan, np.ndarray]:
    plan = plan_patch(cfg, image.shape[1:], t, seed, iteration, source_id)
    return plan, crop_resize(image, plan, cfg.s_min)


def replay(cfg: PatchPlannerConfig, plan: PatchPlan, image: np.ndarray, image_id: int) -> np.ndarray:
    if plan.source_id != image_id:
        raise ValueError(f"plan was made for image {plan.source_id}, got image {image_id}")
    return crop_resize(image, plan, cfg.s_min)
