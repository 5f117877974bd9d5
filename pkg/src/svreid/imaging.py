"""Image I/O, resizing, standardization and augmentation.

Images inside the package are float32 arrays laid out 3 x H x W with
values in [0, 1]. Standardization to the network's input range happens last.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, DataError

TARGET_HEIGHT = 160
TARGET_WIDTH = 80
NORM_MEAN = 0.5
NORM_STD = 0.5


@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.5
    zoom_min: float = 0.9
    zoom_max: float = 1.1
    shift: float = 0.1  # fraction of width, both directions

    def __post_init__(self):
        if not 0 <= self.flip_prob <= 1:
            raise ContractViolation(f"flip_prob must be in [0, 1], got {self.flip_prob}")
        if not 0 < self.zoom_min <= self.zoom_max:
            raise ContractViolation(f"need 0 < zoom_min <= zoom_max, got ({self.zoom_min}, {self.zoom_max})")
        if not 0 <= self.shift <= 0.5:
            raise ContractViolation(f"shift fraction must be in [0, 0.5], got {self.shift}")

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(flip_prob=0.0, zoom_min=1.0, zoom_max=1.0, shift=0.0)


# ---------------------------------------------------------------- file I/O


def read_image(path: str | os.PathLike) -> np.ndarray:
    """PNG or binary PPM -> 3 x H x W float32 in [0, 1]."""
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, UnidentifiedImageError) as exc:
        raise DataError(f"cannot read image {os.fspath(path)!r}: {exc}") from None
    return to_unit_range(arr.transpose(2, 0, 1))


def write_image(path: str | os.PathLike, image: np.ndarray) -> None:
    from PIL import Image

    arr = np.clip(np.round(np.asarray(image) * 255), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def to_unit_range(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image.astype(np.float32) / np.float32(255)
    return image.astype(np.float32)


# ---------------------------------------------------------------- geometry


def _bilinear_sample(image: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample 3 x H x W at the outer grid ys x xs, clamping to the edge."""
    _, h, w = image.shape
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = image[:, y0][:, :, x0] * (1 - wx) + image[:, y0][:, :, x1] * wx
    bottom = image[:, y1][:, :, x0] * (1 - wx) + image[:, y1][:, :, x1] * wx
    return (top * (1 - wy) + bottom * wy).astype(np.float32)


def resize_bilinear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize of a 3 x H x W image."""
    _, h, w = image.shape
    if (h, w) == (height, width):
        return np.asarray(image, dtype=np.float32)
    ys = (np.arange(height) + 0.5) * (h / height) - 0.5
    xs = (np.arange(width) + 0.5) * (w / width) - 0.5
    return _bilinear_sample(np.asarray(image, dtype=np.float64), ys, xs)


def standardize(image: np.ndarray) -> np.ndarray:
    return ((np.asarray(image, dtype=np.float32) - np.float32(NORM_MEAN)) / np.float32(NORM_STD)).astype(np.float32)


def resize_normalize(image: np.ndarray, height: int = TARGET_HEIGHT, width: int = TARGET_WIDTH) -> np.ndarray:
    """Any 3 x H x W image (uint8 or [0, 1] floats) -> standardized 3 x height x width."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ContractViolation(f"expected a 3-channel 3 x H x W image, got shape {image.shape}")
    return standardize(resize_bilinear(to_unit_range(image), height, width))


def horizontal_flip(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(image[:, :, ::-1])


def zoom(image: np.ndarray, factor: float) -> np.ndarray:
    """Scale about the centre, keeping the size; factor > 1 crops, < 1 pads by edge replication."""
    if factor == 1.0:
        return image
    _, h, w = image.shape
    cy, cx = (h - 1) / 2, (w - 1) / 2
    ys = cy + (np.arange(h) - cy) / factor
    xs = cx + (np.arange(w) - cx) / factor
    return _bilinear_sample(np.asarray(image, dtype=np.float64), ys, xs)


def width_shift(image: np.ndarray, pixels: int) -> np.ndarray:
    """Shift right by ``pixels`` (left if negative), replicating the edge column."""
    if pixels == 0:
        return image
    w = image.shape[2]
    src = np.clip(np.arange(w) - pixels, 0, w - 1)
    return np.ascontiguousarray(image[:, :, src])


def augment(image: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Random flip, zoom and horizontal shift; output has the input's shape, clamped to [0, 1].

    Exactly three draws are taken from ``rng`` per call whatever the config,
    so the random stream stays aligned across configurations.
    """
    flip_draw, zoom_draw, shift_draw = rng.random(3)
    out = image
    if flip_draw < config.flip_prob:
        out = horizontal_flip(out)
    factor = config.zoom_min + (config.zoom_max - config.zoom_min) * zoom_draw
    out = zoom(out, float(factor))
    max_shift = config.shift * image.shape[2]
    out = width_shift(out, int(round((2 * shift_draw - 1) * max_shift)))
    return np.clip(out, 0.0, 1.0).astype(np.float32)
