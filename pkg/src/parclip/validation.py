"""Input checks shared by the estimator wrappers and the CLI."""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np
from sklearn.utils.validation import check_array

from .numerics import DimensionError

__all__ = ["check_images", "check_captions", "check_tokens", "check_unit_interval", "check_labels"]


def check_images(images, image_size: int | None = None, name: str = "images") -> np.ndarray:
    """Return ``images`` as a float64 ``B x H x W x 3`` array with values in [0, 1].

    A single ``H x W x 3`` image is promoted to a batch of one.
    """
    arr = check_array(images, ensure_2d=False, allow_nd=True, dtype=np.float64,
                      ensure_all_finite=True, input_name=name)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise DimensionError(f"{name} must be B x H x W x 3, got shape {arr.shape}")
    if arr.shape[1] != arr.shape[2]:
        raise DimensionError(f"{name} must be square, got {arr.shape[1]}x{arr.shape[2]}")
    if image_size is not None and arr.shape[1] != image_size:
        raise DimensionError(f"{name} must be {image_size}x{image_size}, got {arr.shape[1]}x{arr.shape[2]}")
    check_unit_interval(arr, name)
    return arr


def check_unit_interval(arr: np.ndarray, name: str = "values") -> np.ndarray:
    lo, hi = float(arr.min(initial=0.0)), float(arr.max(initial=0.0))
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got range [{lo:g}, {hi:g}]")
    return arr


def check_captions(captions, n: int | None = None, name: str = "captions") -> list[str]:
    if isinstance(captions, str) or not isinstance(captions, (Sequence, np.ndarray)):
        raise TypeError(f"{name} must be a sequence of strings")
    out = [str(c) for c in captions]
    if n is not None and len(out) != n:
        raise ValueError(f"{name}: expected {n} entries, got {len(out)}")
    return out


def check_tokens(tokens, vocab_size: int, max_len: int) -> np.ndarray:
    arr = np.asarray(tokens)
    if arr.ndim != 2 or arr.shape[1] != max_len:
        raise DimensionError(f"token batch must be B x {max_len}, got {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        raise TypeError(f"token ids must be integers, got {arr.dtype}")
    if arr.size and (arr.min() < 0 or arr.max() >= vocab_size):
        raise ValueError(f"token ids must lie in [0, {vocab_size})")
    return arr.astype(np.int64)


def check_labels(labels, n_classes: int, n: int | None = None) -> np.ndarray:
    arr = np.asarray(labels)
    if arr.ndim != 1 or (n is not None and len(arr) != n):
        raise DimensionError(f"labels must be a vector of length {n}, got shape {arr.shape}")
    if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    return arr.astype(np.int64)
