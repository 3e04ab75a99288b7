"""Image and token augmentations.

``par_augment`` is the light pair used while cleaning with PAR (Gaussian
noise and CutOut, each applied independently per image). ``strong_image_augment``
and ``text_augment`` stand in for AutoAugment / EDA in the CleanCLIP baseline.
"""

from __future__ import annotations

import math

import numpy as np

from .model import PAD
from .numerics import Rng

__all__ = [
    "gaussian_noise",
    "cutout",
    "par_augment",
    "strong_image_augment",
    "text_augment",
]


def gaussian_noise(image: np.ndarray, std: float, gen: np.random.Generator) -> np.ndarray:
    return np.clip(image + gen.normal(0.0, std, size=image.shape), 0.0, 1.0)


def cutout(image: np.ndarray, area_frac: float, rng: Rng, fill: float = 0.0) -> np.ndarray:
    """Zero a square covering ``area_frac`` of the image at a uniform position."""
    h, w, _ = image.shape
    side = max(1, int(round(math.sqrt(area_frac * h * w))))
    side = min(side, h, w)
    r = rng.integers(h - side + 1)
    c = rng.integers(w - side + 1)
    out = image.copy()
    out[r:r + side, c:c + side] = fill
    return out


def par_augment(
    images: np.ndarray,
    rng: Rng,
    noise_std: float = 0.2,
    noise_prob: float = 0.5,
    cutout_area: tuple[float, float] = (0.005, 0.01),
    cutout_prob: float = 0.5,
) -> np.ndarray:
    gen = rng.generator()
    out = np.array(images, dtype=np.float64, copy=True)
    for i in range(len(out)):
        if rng.bernoulli(noise_prob):
            out[i] = gaussian_noise(out[i], noise_std, gen)
        if rng.bernoulli(cutout_prob):
            out[i] = cutout(out[i], rng.uniform(*cutout_area), rng)
    return out


def _crop_resize(image: np.ndarray, area: float, rng: Rng) -> np.ndarray:
    h, w, _ = image.shape
    ch = max(1, min(h, int(round(h * math.sqrt(area)))))
    cw = max(1, min(w, int(round(w * math.sqrt(area)))))
    r = rng.integers(h - ch + 1)
    c = rng.integers(w - cw + 1)
    crop = image[r:r + ch, c:c + cw]
    ri = (np.arange(h) * ch) // h
    ci = (np.arange(w) * cw) // w
    return crop[np.ix_(ri, ci)]


def strong_image_augment(images: np.ndarray, rng: Rng) -> np.ndarray:
    """Flip (p=.5), per-channel jitter +-0.3, uniform noise +-0.2, crop-resize to 75-100% area."""
    gen = rng.generator()
    out = np.array(images, dtype=np.float64, copy=True)
    for i in range(len(out)):
        img = out[i]
        if rng.bernoulli(0.5):
            img = img[:, ::-1]
        img = img + gen.uniform(-0.3, 0.3, size=(1, 1, 3))
        img = img + gen.uniform(-0.2, 0.2, size=img.shape)
        img = _crop_resize(np.clip(img, 0.0, 1.0), rng.uniform(0.75, 1.0), rng)
        out[i] = img
    return out


def text_augment(tokens: np.ndarray, rng: Rng, p_delete: float = 0.1, p_swap: float = 0.1) -> np.ndarray:
    """Random token deletion and adjacent swaps on padded id rows."""
    tokens = np.asarray(tokens, dtype=np.int64)
    out = np.full_like(tokens, PAD)
    for i, row in enumerate(tokens):
        ids = [int(t) for t in row if t != PAD]
        kept = [t for t in ids if not rng.bernoulli(p_delete)]
        if not kept and ids:
            kept = [ids[rng.integers(len(ids))]]
        for j in range(len(kept) - 1):
            if rng.bernoulli(p_swap):
                kept[j], kept[j + 1] = kept[j + 1], kept[j]
        out[i, : len(kept)] = kept
    return out
