"""Stochastic two-view augmentation for the contrastive objective.

Images are NCHW float arrays in [0, 1], before normalization. Each sample of
each view draws from its own generator seeded with (seed, view, index), so a
batch can be augmented in any order and still come out identical.
"""

import logging
import math

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.common.errors import DimensionError

logger = logging.getLogger(__name__)

# ITU-R 601 luma weights.
LUMA = np.array([0.299, 0.587, 0.114])


class AugmentationPolicy(BaseModel):
    """Random resized crop, horizontal flip, color jitter and grayscale."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    crop_scale: tuple[float, float] = (0.2, 1.0)
    crop_ratio: tuple[float, float] = (3.0 / 4.0, 4.0 / 3.0)
    hflip: float = Field(0.5, ge=0.0, le=1.0)
    brightness: float = Field(0.4, ge=0.0)
    contrast: float = Field(0.4, ge=0.0)
    saturation: float = Field(0.4, ge=0.0)
    jitter_probability: float = Field(0.8, ge=0.0, le=1.0)
    grayscale: float = Field(0.2, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _check_ranges(self) -> "AugmentationPolicy":
        lo, hi = self.crop_scale
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError(f"crop_scale must satisfy 0 < lo <= hi <= 1, got {self.crop_scale}")
        lo, hi = self.crop_ratio
        if not 0.0 < lo <= hi:
            raise ValueError(f"crop_ratio must satisfy 0 < lo <= hi, got {self.crop_ratio}")
        return self

    @classmethod
    def identity(cls) -> "AugmentationPolicy":
        return cls(
            crop_scale=(1.0, 1.0),
            crop_ratio=(1.0, 1.0),
            hflip=0.0,
            brightness=0.0,
            contrast=0.0,
            saturation=0.0,
            jitter_probability=0.0,
            grayscale=0.0,
        )


def resize_bilinear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Resize a CHW image with half-pixel-centred bilinear sampling."""
    _, h, w = image.shape
    if (h, w) == (height, width):
        return image

    def _axis(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        pos = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0.0, n_in - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (pos - lo).astype(image.dtype)

    y0, y1, wy = _axis(h, height)
    x0, x1, wx = _axis(w, width)
    top = image[:, y0][:, :, x0] * (1 - wx) + image[:, y0][:, :, x1] * wx
    bottom = image[:, y1][:, :, x0] * (1 - wx) + image[:, y1][:, :, x1] * wx
    return top * (1 - wy)[:, None] + bottom * wy[:, None]


def _crop_box(
    rng: np.random.Generator, h: int, w: int, policy: AugmentationPolicy
) -> tuple[int, int, int, int]:
    area = h * w
    log_lo, log_hi = math.log(policy.crop_ratio[0]), math.log(policy.crop_ratio[1])
    for _ in range(10):
        target = area * rng.uniform(*policy.crop_scale)
        ratio = math.exp(rng.uniform(log_lo, log_hi))
        cw = int(round(math.sqrt(target * ratio)))
        ch = int(round(math.sqrt(target / ratio)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    return 0, 0, h, w


def _grayscale(image: np.ndarray) -> np.ndarray:
    if image.shape[0] != 3:
        return image
    gray = np.tensordot(LUMA.astype(image.dtype), image, axes=1)
    return np.broadcast_to(gray, image.shape).copy()


def _jitter(rng: np.random.Generator, image: np.ndarray, policy: AugmentationPolicy) -> np.ndarray:
    steps = []
    if policy.brightness > 0:
        steps.append("brightness")
    if policy.contrast > 0:
        steps.append("contrast")
    if policy.saturation > 0 and image.shape[0] == 3:
        steps.append("saturation")
    for i in rng.permutation(len(steps)):
        step = steps[i]
        strength = getattr(policy, step)
        factor = image.dtype.type(rng.uniform(max(0.0, 1.0 - strength), 1.0 + strength))
        if step == "brightness":
            image = image * factor
        elif step == "contrast":
            mean = _grayscale(image).mean()
            image = (image - mean) * factor + mean
        else:
            gray = _grayscale(image)
            image = (image - gray) * factor + gray
        image = np.clip(image, 0.0, 1.0)
    return image


def augment_image(image: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    """Apply the policy to one CHW image; the output keeps the input shape."""
    _, h, w = image.shape
    top, left, ch, cw = _crop_box(rng, h, w, policy)
    out = resize_bilinear(image[:, top : top + ch, left : left + cw], h, w)
    if rng.random() < policy.hflip:
        out = out[:, :, ::-1]
    if rng.random() < policy.jitter_probability:
        out = _jitter(rng, out, policy)
    if rng.random() < policy.grayscale:
        out = _grayscale(out)
    return np.ascontiguousarray(out, dtype=image.dtype)


def augment_batch(images: np.ndarray, policy: AugmentationPolicy, seed: int, view: int) -> np.ndarray:
    if images.ndim != 4:
        raise DimensionError(f"expected an NCHW image batch, got shape {images.shape}")
    return np.stack(
        [augment_image(img, policy, np.random.default_rng([seed, view, i])) for i, img in enumerate(images)]
    )


def two_views(images: np.ndarray, policy: AugmentationPolicy, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Two independently augmented copies of `images`, seeded per view."""
    return augment_batch(images, policy, seed, 0), augment_batch(images, policy, seed, 1)
