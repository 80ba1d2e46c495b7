"""Parameterized image augmentation and the evaluation-time resize protocol.

Images are H x W x 3 float arrays in [0, 1]. Every transform draws its
randomness from a generator seeded per call, so a (image, seed) pair always
produces the same pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

GRAY = np.array([0.299, 0.587, 0.114])

# eigen-decomposition of RGB pixel covariance used when no dataset-specific axes are given
IMAGENET_EIGVAL = np.array([0.2175, 0.0188, 0.0045])
IMAGENET_EIGVEC = np.array(
    [
        [-0.5675, 0.7192, 0.4009],
        [-0.5808, -0.0045, -0.8140],
        [-0.5836, -0.6948, 0.4203],
    ]
)


@dataclass
class AugmentConfig:
    output_size: int = 32
    flip: bool = True
    scale: tuple[float, float] = (0.08, 1.0)
    ratio: tuple[float, float] = (3 / 4, 4 / 3)
    brightness: float = 0.3
    contrast: float = 0.3
    saturation: float = 0.3
    lighting: float = 0.1
    eigval: tuple[float, ...] | None = None
    eigvec: tuple[tuple[float, ...], ...] | None = None

    def __post_init__(self):
        lo, hi = self.scale
        if not (0 < lo <= hi <= 1):
            raise ValueError(f"crop scale range must lie in (0, 1], got {self.scale}")
        if not (0 < self.ratio[0] <= self.ratio[1]):
            raise ValueError(f"aspect ratio range must be positive, got {self.ratio}")
        if self.output_size < 1:
            raise ValueError("output size must be positive")

    @classmethod
    def identity(cls, output_size: int) -> "AugmentConfig":
        return cls(output_size, flip=False, scale=(1.0, 1.0), ratio=(1.0, 1.0), brightness=0.0,
                   contrast=0.0, saturation=0.0, lighting=0.0)

    def lighting_axes(self) -> tuple[np.ndarray, np.ndarray]:
        if self.eigval is None or self.eigvec is None:
            return IMAGENET_EIGVAL, IMAGENET_EIGVEC
        return np.asarray(self.eigval, dtype=np.float64), np.asarray(self.eigvec, dtype=np.float64)


def pixel_principal_axes(images: np.ndarray) -> tuple[tuple[float, ...], tuple[tuple[float, ...], ...]]:
    """Standard deviations (descending) and axes (columns) of the RGB pixel distribution."""
    px = np.asarray(images, dtype=np.float64).reshape(-1, 3)
    cov = np.cov(px, rowvar=False)
    val, vec = np.linalg.eigh(cov)
    order = np.argsort(val)[::-1]
    val, vec = np.sqrt(np.maximum(val[order], 0.0)), vec[:, order]
    return tuple(float(v) for v in val), tuple(tuple(float(c) for c in row) for row in vec)


def crop_resize(img: np.ndarray, box: tuple[float, float, float, float], out_h: int, out_w: int) -> np.ndarray:
    """Bilinearly resample the box (top, left, height, width), in pixels, to out_h x out_w."""
    h, w = img.shape[:2]
    top, left, bh, bw = box
    ys = top + (np.arange(out_h) + 0.5) * (bh / out_h) - 0.5
    xs = left + (np.arange(out_w) + 0.5) * (bw / out_w) - 0.5
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top_row = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bottom_row = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top_row * (1 - wy) + bottom_row * wy


def resize(img: np.ndarray, out_h: int, out_w: int | None = None) -> np.ndarray:
    h, w = img.shape[:2]
    return crop_resize(img, (0.0, 0.0, float(h), float(w)), out_h, out_h if out_w is None else out_w)


def sample_crop_box(h: int, w: int, cfg: AugmentConfig, rng: np.random.Generator, attempts: int = 10):
    """Random resized crop box with area fraction ~ U[scale] and aspect ~ U[ratio].

    Boxes are continuous (sub-pixel). If no drawn aspect fits inside the image
    after ``attempts`` tries, the aspect is clamped to the closest one that
    fits, so the area fraction keeps its configured law.
    """
    frac = rng.uniform(*cfg.scale)
    area = frac * h * w
    ratio = None
    for _ in range(attempts):
        r = rng.uniform(*cfg.ratio)
        if math.sqrt(area * r) <= w and math.sqrt(area / r) <= h:
            ratio = r
            break
    if ratio is None:
        ratio = min(max(r, area / (h * h)), (w * w) / area)
    bw = min(math.sqrt(area * ratio), float(w))
    bh = min(math.sqrt(area / ratio), float(h))
    top = rng.uniform(0.0, h - bh) if h > bh else 0.0
    left = rng.uniform(0.0, w - bw) if w > bw else 0.0
    return top, left, bh, bw, frac


def _blend(a: np.ndarray, b, f: float) -> np.ndarray:
    return np.clip(b + f * (a - b), 0.0, 1.0)


def augment(img: np.ndarray, cfg: AugmentConfig, seed: int) -> np.ndarray:
    """Crop-resize, flip, brightness/contrast/saturation jitter, lighting noise; clamped to [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if h < 8 or w < 8:
        raise ValueError(f"augment: image {h}x{w} is smaller than 8x8")
    rng = np.random.default_rng(seed)
    top, left, bh, bw, _ = sample_crop_box(h, w, cfg, rng)
    out = crop_resize(img, (top, left, bh, bw), cfg.output_size, cfg.output_size)
    do_flip = rng.random() < 0.5
    if cfg.flip and do_flip:
        out = out[:, ::-1]
    fb, fc, fs = (rng.uniform(1 - j, 1 + j) for j in (cfg.brightness, cfg.contrast, cfg.saturation))
    alpha = rng.normal(0.0, 1.0, size=3) * cfg.lighting
    if cfg.brightness:
        out = _blend(out, 0.0, fb)
    if cfg.contrast:
        out = _blend(out, float((out @ GRAY).mean()), fc)
    if cfg.saturation:
        out = _blend(out, (out @ GRAY)[..., None], fs)
    if cfg.lighting:
        eigval, eigvec = cfg.lighting_axes()
        out = out + eigvec @ (alpha * eigval)
    return np.ascontiguousarray(np.clip(out, 0.0, 1.0))


def eval_view(img: np.ndarray, resolution: int, base_resolution: int) -> np.ndarray:
    """Evaluation preprocessing.

    At or below the training resolution: central crop covering 224/256 of the
    shorter side, resized to ``resolution`` squared. Above it: the longer side
    is resized to ``resolution`` and the full image is kept.
    """
    h, w = img.shape[:2]
    if resolution <= base_resolution:
        side = min(h, w) * 224.0 / 256.0
        box = ((h - side) / 2.0, (w - side) / 2.0, side, side)
        return crop_resize(img, box, resolution, resolution)
    if h >= w:
        return resize(img, resolution, max(1, int(round(w * resolution / h))))
    return resize(img, max(1, int(round(h * resolution / w))), resolution)
