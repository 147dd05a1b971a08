"""Stochastic augmentations and view generators.

Every function takes an explicit ``numpy.random.Generator`` so a whole
training run is reproducible from its seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import convolve1d

from .data import CROP_SIZE
from .errors import ConfigError

ASPECT_RANGE = (3.0 / 4.0, 4.0 / 3.0)
# Source-square side ranges (px) for the multi-crop local views.
HALF_CROP_SIDE = (24, 40)
QUARTER_CROP_SIDE = (12, 20)
ONE_CROP = "one_crop"
MULTI_CROP = "multi_crop"


@dataclass(frozen=True)
class AugmentationPolicy:
    resized_crop_scale: tuple = (0.5, 1.0)
    hflip_probability: float = 0.5
    blur_probability: float = 0.5
    blur_sigma: tuple = (0.1, 2.0)
    blur_kernel_px: int = 5

    def __post_init__(self):
        lo, hi = self.resized_crop_scale
        if not 0.0 < lo <= hi <= 1.0:
            raise ConfigError(f"resized_crop_scale must satisfy 0 < lo <= hi <= 1, got {(lo, hi)}")
        for name in ("hflip_probability", "blur_probability"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {p}")
        slo, shi = self.blur_sigma
        if not 0.0 < slo <= shi:
            raise ConfigError(f"blur_sigma must satisfy 0 < lo <= hi, got {(slo, shi)}")
        k = self.blur_kernel_px
        if k < 3 or k % 2 == 0:
            raise ConfigError(f"blur_kernel_px must be odd and >= 3, got {k}")
        object.__setattr__(self, "resized_crop_scale", (float(lo), float(hi)))
        object.__setattr__(self, "blur_sigma", (float(slo), float(shi)))

    @classmethod
    def identity(cls) -> "AugmentationPolicy":
        return cls(resized_crop_scale=(1.0, 1.0), hflip_probability=0.0, blur_probability=0.0)


@dataclass(frozen=True)
class CropStrategy:
    kind: str = ONE_CROP

    def __post_init__(self):
        if self.kind not in (ONE_CROP, MULTI_CROP):
            raise ConfigError(f"unknown crop strategy {self.kind!r}")

    @property
    def n_views(self) -> int:
        return 1 if self.kind == ONE_CROP else 5


@dataclass
class ViewSet:
    views: list
    source_id: str | None = None
    # (top, left, height, width) source region of each multi-crop view, None for the base view
    boxes: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# primitives


def resize_bilinear(img: np.ndarray, out_h: int = CROP_SIZE, out_w: int = CROP_SIZE) -> np.ndarray:
    """Bilinear resize with half-pixel centres and edge clamping.

    Interpolates as ``a + t * (b - a)`` so constant fields stay exactly constant.
    """
    h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        i0 = np.floor(src).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    y0, y1, ty = axis(h, out_h)
    x0, x1, tx = axis(w, out_w)
    top, bottom = img[y0], img[y1]
    rows = top + ty[:, None] * (bottom - top)
    left, right = rows[:, x0], rows[:, x1]
    return left + tx[None, :] * (right - left)


def gaussian_kernel(sigma: float, size: int) -> np.ndarray:
    r = size // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float, size: int = 5) -> np.ndarray:
    """Separable Gaussian blur with reflect (half-sample symmetric) padding."""
    k = gaussian_kernel(sigma, size)
    out = convolve1d(img, k, axis=0, mode="reflect")
    return convolve1d(out, k, axis=1, mode="reflect")


def sample_resized_crop_box(rng: np.random.Generator, scale: tuple, h: int = CROP_SIZE,
                            w: int = CROP_SIZE, attempts: int = 10) -> tuple[int, int, int, int]:
    """Random (top, left, height, width) with area fraction in ``scale`` and aspect in [3/4, 4/3].

    Falls back to the whole image when no attempt fits inside it.
    """
    area = h * w
    log_lo, log_hi = math.log(ASPECT_RANGE[0]), math.log(ASPECT_RANGE[1])
    for _ in range(attempts):
        target = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    return 0, 0, h, w


def sample_square_box(rng: np.random.Generator, side_range: tuple, size: int = CROP_SIZE):
    side = int(rng.integers(side_range[0], side_range[1] + 1))
    top = int(rng.integers(0, size - side + 1))
    left = int(rng.integers(0, size - side + 1))
    return top, left, side, side


def crop_and_resize(img: np.ndarray, box) -> np.ndarray:
    top, left, ch, cw = box
    return resize_bilinear(img[top:top + ch, left:left + cw])


# ---------------------------------------------------------------------------
# public operations


def apply_augmentations(img: np.ndarray, policy: AugmentationPolicy,
                        rng: np.random.Generator) -> np.ndarray:
    """Random resized crop, then horizontal flip, then Gaussian blur."""
    x = np.asarray(img, dtype=np.float64)
    box = sample_resized_crop_box(rng, policy.resized_crop_scale, *x.shape)
    x = crop_and_resize(x, box)
    if rng.random() < policy.hflip_probability:
        x = x[:, ::-1]
    if rng.random() < policy.blur_probability:
        sigma = rng.uniform(*policy.blur_sigma)
        x = gaussian_blur(x, sigma, policy.blur_kernel_px)
    return np.clip(x, 0.0, 1.0).astype(np.float32)


def make_views(img: np.ndarray, strategy: CropStrategy, policy: AugmentationPolicy | None,
               rng: np.random.Generator, source_id: str | None = None) -> ViewSet:
    """One view, or the base view plus two ~half-size and two ~quarter-size crops.

    Local crops are square regions (24-40 px and 12-20 px sides) resized to 64x64.
    """
    base = np.asarray(img, dtype=np.float32)
    views, boxes = [base], [None]
    if strategy.kind == MULTI_CROP:
        for side_range in (HALF_CROP_SIDE, HALF_CROP_SIDE, QUARTER_CROP_SIDE, QUARTER_CROP_SIDE):
            box = sample_square_box(rng, side_range)
            views.append(crop_and_resize(base.astype(np.float64), box).astype(np.float32))
            boxes.append(box)
    if policy is not None:
        views = [apply_augmentations(v, policy, rng) for v in views]
    else:
        views = [np.clip(v, 0.0, 1.0) for v in views]
    return ViewSet(views=views, source_id=source_id, boxes=boxes)


def byol_view_pair(img: np.ndarray, policy: AugmentationPolicy, double_augment: bool,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Two independently augmented views; with ``double_augment`` both come from one pre-augmented copy."""
    src = apply_augmentations(img, policy, rng) if double_augment else img
    return apply_augmentations(src, policy, rng), apply_augmentations(src, policy, rng)
