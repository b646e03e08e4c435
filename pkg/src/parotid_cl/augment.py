"""Augmentation pipelines for contrastive pretraining and segmentation training.

Images are float arrays ``[3, H, W]`` with intensities in [0, 1]. Every
random draw comes from a caller-owned ``numpy.random.Generator``; use
:func:`sample_rng` to derive per-sample streams for data loading.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from .errors import ConfigError


@dataclass
class AugmentConfig:
    rotation_p: float = 1.0
    rotation_max_deg: float = 10.0
    crop_p: float = 1.0
    crop_scale_range: tuple = (0.5, 1.0)
    crop_ratio_range: tuple = (3 / 4, 4 / 3)
    jitter_p: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.2
    grayscale_p: float = 0.2
    blur_p: float = 0.5
    blur_sigma_range: tuple = (0.1, 1.5)
    solarize_p: float = 0.2
    solarize_threshold: float = 0.5
    flip_p: float = 0.5

    def __post_init__(self):
        self.crop_scale_range = tuple(self.crop_scale_range)
        self.crop_ratio_range = tuple(self.crop_ratio_range)
        self.blur_sigma_range = tuple(self.blur_sigma_range)
        for k, v in asdict(self).items():
            if k.endswith("_p") and not 0.0 <= v <= 1.0:
                raise ConfigError(f"{k}={v} must lie in [0, 1]")
        if self.rotation_max_deg < 0:
            raise ConfigError("rotation_max_deg must be >= 0")
        lo, hi = self.crop_scale_range
        if not 0 < lo <= hi <= 1:
            raise ConfigError("crop_scale_range must satisfy 0 < lo <= hi <= 1")

    @classmethod
    def contrastive(cls, **kw) -> "AugmentConfig":
        return cls(**kw)

    @classmethod
    def contrastive_desk(cls, **kw) -> "AugmentConfig":
        """The contrastive chain with milder crop, jitter, grayscale and solarize."""
        base = dict(crop_scale_range=(0.7, 1.0), brightness=0.3, contrast=0.3, saturation=0.1,
                    grayscale_p=0.1, solarize_p=0.1)
        base.update(kw)
        return cls(**base)

    @classmethod
    def segmentation(cls, **kw) -> "AugmentConfig":
        """Colour dithering, blur and small-angle rotation; no cropping."""
        base = dict(crop_p=0.0, grayscale_p=0.0, solarize_p=0.0, flip_p=0.0,
                    jitter_p=0.8, brightness=0.2, contrast=0.2, saturation=0.1, blur_p=0.3)
        base.update(kw)
        return cls(**base)

    @classmethod
    def photometric(cls, **kw) -> "AugmentConfig":
        """Colour dithering and Gaussian blur only."""
        base = dict(rotation_p=0.0, crop_p=0.0, grayscale_p=0.0, solarize_p=0.0, flip_p=0.0)
        base.update(kw)
        return cls(**base)

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(rotation_p=0.0, rotation_max_deg=0.0, crop_p=0.0, jitter_p=0.0,
                   grayscale_p=0.0, blur_p=0.0, solarize_p=0.0, flip_p=0.0)

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


class ViewPair(NamedTuple):
    view1: np.ndarray
    view2: np.ndarray
    source_id: str = ""


def sample_rng(global_seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(global_seed), int(epoch), int(index)])


# ---------------------------------------------------------------------------
# primitive ops

def rotate(x: np.ndarray, angle_deg: float, order: int = 1) -> np.ndarray:
    """Rotate the last two axes about the centre; uncovered corners are filled with 0."""
    if angle_deg == 0:
        return x.copy()
    axes = (x.ndim - 1, x.ndim - 2)
    return ndimage.rotate(x, angle_deg, axes=axes, reshape=False, order=order,
                          mode="constant", cval=0.0, prefilter=False)


def crop_resize(x: np.ndarray, top: float, left: float, h: float, w: float) -> np.ndarray:
    """Bilinear resample of the box (top, left, h, w) back to the full [.., H, W] grid."""
    H, W = x.shape[-2:]
    ys = top + (np.arange(H) + 0.5) * h / H - 0.5
    xs = left + (np.arange(W) + 0.5) * w / W - 0.5
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    out = [ndimage.map_coordinates(ch, [gy, gx], order=1, mode="nearest") for ch in x]
    return np.stack(out).astype(x.dtype)


def color_jitter(x, brightness=1.0, contrast=1.0, saturation=1.0):
    x = x * brightness
    gray = x.mean(axis=0, keepdims=True)
    x = (x - gray.mean()) * contrast + gray.mean()
    gray = x.mean(axis=0, keepdims=True)
    x = gray + (x - gray) * saturation
    return np.clip(x, 0.0, 1.0)


def grayscale(x):
    # medical channels have no luminance weights; the plain mean stands in
    return np.repeat(x.mean(axis=0, keepdims=True), x.shape[0], axis=0)


def gaussian_blur(x, sigma):
    return np.stack([ndimage.gaussian_filter(ch, sigma, mode="reflect") for ch in x])


def solarize(x, threshold=0.5):
    return np.where(x >= threshold, 1.0 - x, x)


def hflip(x):
    return x[..., ::-1].copy()


# ---------------------------------------------------------------------------
# samplers

def sample_rotation(rng: np.random.Generator, cfg: AugmentConfig) -> float:
    if cfg.rotation_max_deg == 0 or rng.random() >= cfg.rotation_p:
        return 0.0
    return float(rng.uniform(-cfg.rotation_max_deg, cfg.rotation_max_deg))


def _sample_jitter(rng, cfg):
    if rng.random() >= cfg.jitter_p:
        return None
    def f(s):
        return float(rng.uniform(max(0.0, 1 - s), 1 + s))
    return f(cfg.brightness), f(cfg.contrast), f(cfg.saturation)


def _sample_crop(rng, cfg, H, W):
    if rng.random() >= cfg.crop_p:
        return None
    area = H * W
    lo, hi = np.log(cfg.crop_ratio_range)
    for _ in range(10):
        a = area * rng.uniform(*cfg.crop_scale_range)
        r = float(np.exp(rng.uniform(lo, hi)))
        w, h = np.sqrt(a * r), np.sqrt(a / r)
        if h <= H and w <= W:
            return float(rng.uniform(0, H - h)), float(rng.uniform(0, W - w)), float(h), float(w)
    s = np.sqrt(cfg.crop_scale_range[1])
    h, w = H * s, W * s
    return (H - h) / 2, (W - w) / 2, h, w


def _photometric(x, rng, cfg):
    jit = _sample_jitter(rng, cfg)
    if jit is not None:
        x = color_jitter(x, *jit)
    if rng.random() < cfg.grayscale_p:
        x = grayscale(x)
    if rng.random() < cfg.blur_p:
        x = gaussian_blur(x, float(rng.uniform(*cfg.blur_sigma_range)))
    if rng.random() < cfg.solarize_p:
        x = solarize(x, cfg.solarize_threshold)
    return x


def augment_view(x: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    """One contrastive view: rotation, crop-resize, dither, grayscale, blur, solarize, flip."""
    x = np.asarray(x, dtype=np.float32)
    angle = sample_rotation(rng, cfg)
    if angle:
        x = rotate(x, angle, order=1)
    crop = _sample_crop(rng, cfg, *x.shape[-2:])
    if crop is not None:
        x = crop_resize(x, *crop)
    x = _photometric(x, rng, cfg)
    if rng.random() < cfg.flip_p:
        x = hflip(x)
    return np.ascontiguousarray(x, dtype=np.float32)


def contrastive_augment(slice_pixels, rng: np.random.Generator, cfg: AugmentConfig | None = None,
                        source_id: str = "") -> ViewPair:
    """Two independently sampled views of the same slice."""
    cfg = cfg or AugmentConfig.contrastive()
    pixels = getattr(slice_pixels, "pixels", slice_pixels)
    source_id = source_id or getattr(slice_pixels, "slice_id", "")
    return ViewPair(augment_view(pixels, rng, cfg), augment_view(pixels, rng, cfg), source_id)


def segmentation_augment(slice_pixels, mask, rng: np.random.Generator,
                         cfg: AugmentConfig | None = None):
    """Paired augmentation for supervised training.

    Rotation is applied to the image (bilinear) and mask (nearest) with the same
    angle and the zero-filled corners are kept; no cropping is ever applied.
    Photometric ops touch the image only.
    """
    cfg = cfg or AugmentConfig.segmentation()
    x = np.asarray(getattr(slice_pixels, "pixels", slice_pixels), dtype=np.float32)
    y = np.asarray(getattr(mask, "labels", mask))
    angle = sample_rotation(rng, cfg)
    if angle:
        x = rotate(x, angle, order=1)
        y = rotate(y, angle, order=0)
    x = _photometric(x, rng, cfg)
    if rng.random() < cfg.flip_p:
        x, y = hflip(x), hflip(y)
    return np.ascontiguousarray(x, dtype=np.float32), np.ascontiguousarray(y)
