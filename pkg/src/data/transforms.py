"""Mini-batch augmentation for supervised training: padded random crop, flip and cutout."""

import numpy as np


def scaled_length(length: int, image_size: int, reference: int = 32) -> int:
    """Scale a pixel length tuned for `reference`-sized images to `image_size`."""
    return int(round(length * image_size / reference))


def random_crop_flip(images: np.ndarray, padding: int, rng: np.random.Generator) -> np.ndarray:
    """Zero-pad by `padding`, crop back to size at a random offset, flip half the samples."""
    n, _, h, w = images.shape
    out = np.empty_like(images)
    padded = np.pad(images, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else images
    offsets = rng.integers(0, 2 * padding + 1, size=(n, 2))
    flips = rng.random(n) < 0.5
    for i in range(n):
        top, left = offsets[i]
        crop = padded[i, :, top : top + h, left : left + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


def cutout(images: np.ndarray, length: int, rng: np.random.Generator) -> np.ndarray:
    """Zero one `length` x `length` square per sample, centred anywhere in the image."""
    if length <= 0:
        return images
    n, _, h, w = images.shape
    out = images.copy()
    cy = rng.integers(0, h, n)
    cx = rng.integers(0, w, n)
    for i in range(n):
        y0, y1 = max(0, cy[i] - length // 2), min(h, cy[i] + length // 2)
        x0, x1 = max(0, cx[i] - length // 2), min(w, cx[i] + length // 2)
        out[i, :, y0:y1, x0:x1] = 0.0
    return out
