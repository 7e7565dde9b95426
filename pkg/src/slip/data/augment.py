"""Image augmentation for the CLIP and SSL branches.

Images enter as ``H x W x 3`` uint8 (or float in [0, 1]) and leave as
``S x S x 3`` float32, channel-standardized with fixed statistics.
Crops are continuous boxes resampled bilinearly, so crop geometry is not
quantized to whole pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from ..errors import ConfigError, DataError

# CLIP's published pixel statistics; kept fixed so checkpoints stay portable.
PIXEL_MEAN = (0.48145466, 0.4578275, 0.40821073)
PIXEL_STD = (0.26862954, 0.26130258, 0.27577711)


@dataclass(frozen=True)
class CropConfig:
    scale: tuple[float, float] = (0.5, 1.0)
    ratio: tuple[float, float] = (3 / 4, 4 / 3)
    flip_p: float = 0.5


@dataclass(frozen=True)
class SslAugmentConfig:
    """MoCo v3-style view recipe; blur sigma is given at a 224px reference size."""

    crop: CropConfig = CropConfig(scale=(0.08, 1.0))
    jitter_p: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.2
    hue: float = 0.1
    grayscale_p: float = 0.2
    blur_p: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    blur_reference_size: int = 224


@dataclass(frozen=True)
class AugmentConfig:
    image_size: int = 32
    global_crop: CropConfig = CropConfig()
    ssl: SslAugmentConfig = SslAugmentConfig()
    # CLIP-branch recipe: global_crop | color_blur | crop_flip | full (the SSL recipe)
    clip_augment: str = "global_crop"
    mean: tuple[float, float, float] = PIXEL_MEAN
    std: tuple[float, float, float] = PIXEL_STD

    def __post_init__(self):
        if self.clip_augment not in CLIP_AUGMENTS:
            raise ConfigError(f"clip_augment must be one of {CLIP_AUGMENTS}, got {self.clip_augment!r}")


CLIP_AUGMENTS = ("global_crop", "color_blur", "crop_flip", "full")


def to_float(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DataError(f"expected H x W x 3 image, got shape {img.shape}")
    if min(img.shape[:2]) < 2:
        raise DataError(f"degenerate image of shape {img.shape}")
    if img.dtype == np.uint8:
        return img.astype(np.float32) / np.float32(255.0)
    return img.astype(np.float32)


def standardize(img: np.ndarray, cfg: AugmentConfig) -> np.ndarray:
    return ((img - np.asarray(cfg.mean, np.float32)) / np.asarray(cfg.std, np.float32)).astype(np.float32)


def _interp_matrix(start: float, length: float, n_src: int, n_out: int) -> np.ndarray:
    """``n_out x n_src`` bilinear weights sampling ``[start, start + length)`` (pixel-center convention)."""
    pos = start + (np.arange(n_out) + 0.5) * (length / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_src - 1.0)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_src - 1)
    frac = pos - lo
    m = np.zeros((n_out, n_src), np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m.astype(np.float32)


def resized_crop(img: np.ndarray, top: float, left: float, height: float, width: float, size: int) -> np.ndarray:
    """Bilinear resample of the box ``[top, top+height) x [left, left+width)`` to ``size x size``."""
    h, w = img.shape[:2]
    ry = _interp_matrix(top, height, h, size)
    rx = _interp_matrix(left, width, w, size)
    return np.einsum("yh,hwc,xw->yxc", ry, img, rx, optimize=True).astype(np.float32)


def resize(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape[:2]
    return resized_crop(img, 0.0, 0.0, float(h), float(w), size)


def sample_crop_box(h: int, w: int, rng: np.random.Generator, scale=(0.5, 1.0), ratio=(3 / 4, 4 / 3)) -> tuple[float, float, float, float]:
    """Draw ``(top, left, height, width)`` with area fraction uniform on ``scale``.

    The aspect ratio is log-uniform on ``ratio`` intersected with the range
    that keeps the box inside the image for the drawn area, so no draw is
    ever rejected and the area fraction stays exactly uniform.
    """
    frac = rng.uniform(scale[0], scale[1])
    # box width/height relative to the image: sqrt(frac * r) and sqrt(frac / r) must both be <= 1
    lo = max(ratio[0], frac)
    hi = min(ratio[1], 1.0 / frac)
    if lo > hi:
        lo = hi = min(max(1.0, ratio[0]), ratio[1])
    r = math.exp(rng.uniform(math.log(lo), math.log(hi)))
    ch = min(h * math.sqrt(frac / r), float(h))
    cw = min(w * math.sqrt(frac * r), float(w))
    top = rng.uniform(0.0, h - ch)
    left = rng.uniform(0.0, w - cw)
    return top, left, ch, cw


def random_resized_crop(img: np.ndarray, rng: np.random.Generator, size: int, crop: CropConfig) -> np.ndarray:
    top, left, ch, cw = sample_crop_box(img.shape[0], img.shape[1], rng, crop.scale, crop.ratio)
    out = resized_crop(img, top, left, ch, cw, size)
    if rng.random() < crop.flip_p:
        out = out[:, ::-1]
    return out


# ----------------------------------------------------------------------
# colour and blur
# ----------------------------------------------------------------------
_LUMA = np.array([0.299, 0.587, 0.114], np.float32)
_RGB2YIQ = np.array([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]], np.float32)
_YIQ2RGB = np.linalg.inv(_RGB2YIQ).astype(np.float32)


def grayscale(img: np.ndarray) -> np.ndarray:
    g = img @ _LUMA
    return np.repeat(g[..., None], 3, axis=2)


def adjust_brightness(img, f):
    return np.clip(img * np.float32(f), 0, 1)


def adjust_contrast(img, f):
    m = np.float32((img @ _LUMA).mean())
    return np.clip((img - m) * np.float32(f) + m, 0, 1)


def adjust_saturation(img, f):
    g = (img @ _LUMA)[..., None]
    return np.clip((img - g) * np.float32(f) + g, 0, 1)


def adjust_hue(img, shift):
    """Rotate chroma in YIQ space by ``shift`` turns."""
    theta = 2 * math.pi * shift
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[1, 0, 0], [0, c, -s], [0, s, c]], np.float32)
    m = _YIQ2RGB @ rot @ _RGB2YIQ
    return np.clip(img @ m.T, 0, 1).astype(np.float32)


def color_jitter(img: np.ndarray, rng: np.random.Generator, cfg: SslAugmentConfig) -> np.ndarray:
    ops = [
        lambda x: adjust_brightness(x, rng.uniform(1 - cfg.brightness, 1 + cfg.brightness)),
        lambda x: adjust_contrast(x, rng.uniform(1 - cfg.contrast, 1 + cfg.contrast)),
        lambda x: adjust_saturation(x, rng.uniform(1 - cfg.saturation, 1 + cfg.saturation)),
        lambda x: adjust_hue(x, rng.uniform(-cfg.hue, cfg.hue)),
    ]
    for i in rng.permutation(4):
        img = ops[i](img)
    return img.astype(np.float32)


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    return gaussian_filter(img, sigma=(sigma, sigma, 0), mode="reflect").astype(np.float32)


def _color_blur(img: np.ndarray, rng: np.random.Generator, cfg: SslAugmentConfig, size: int) -> np.ndarray:
    if rng.random() < cfg.jitter_p:
        img = color_jitter(img, rng, cfg)
    if rng.random() < cfg.grayscale_p:
        img = grayscale(img)
    if rng.random() < cfg.blur_p:
        sigma = rng.uniform(*cfg.blur_sigma) * size / cfg.blur_reference_size
        img = gaussian_blur(img, sigma)
    return img


# ----------------------------------------------------------------------
# branch recipes
# ----------------------------------------------------------------------
def global_crop(image: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """CLIP-branch view: 50-100% area crop, aspect in [3/4, 4/3], resize, flip p=0.5."""
    img = to_float(image)
    return standardize(random_resized_crop(img, rng, cfg.image_size, cfg.global_crop), cfg)


def ssl_augment(image: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """SSL-branch view: resized crop, colour jitter, grayscale, blur, flip."""
    img = to_float(image)
    s = cfg.ssl
    top, left, ch, cw = sample_crop_box(img.shape[0], img.shape[1], rng, s.crop.scale, s.crop.ratio)
    out = resized_crop(img, top, left, ch, cw, cfg.image_size)
    out = _color_blur(out, rng, s, cfg.image_size)
    if rng.random() < s.crop.flip_p:
        out = out[:, ::-1]
    return standardize(out, cfg)


def clip_view(image: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """CLIP-branch view under the configured recipe (augmentation ablations)."""
    if cfg.clip_augment == "global_crop":
        return global_crop(image, rng, cfg)
    if cfg.clip_augment == "full":
        return ssl_augment(image, rng, cfg)
    img = to_float(image)
    if cfg.clip_augment == "crop_flip":
        return standardize(random_resized_crop(img, rng, cfg.image_size, cfg.ssl.crop), cfg)
    # color_blur: CLIP-style crop (shorter side resized, random square crop) then colour + blur
    h, w = img.shape[:2]
    side = float(min(h, w))
    top = rng.uniform(0.0, h - side)
    left = rng.uniform(0.0, w - side)
    out = resized_crop(img, top, left, side, side, cfg.image_size)
    return standardize(_color_blur(out, rng, cfg.ssl, cfg.image_size), cfg)


def eval_view(image: np.ndarray, cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Deterministic evaluation view: the whole image resized."""
    return standardize(resize(to_float(image), cfg.image_size), cfg)


def probe_view(image: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Linear-probe training view: standard resized crop plus flip."""
    crop = CropConfig(scale=(0.08, 1.0))
    return standardize(random_resized_crop(to_float(image), rng, cfg.image_size, crop), cfg)
