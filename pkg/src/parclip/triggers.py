"""Backdoor trigger synthesis and application.

Blended variants mix a full-canvas pattern into the image with the convex
sum ``(1 - n_c) * I + n_c * N``; BadNet variants paste a square crop of the
pattern at a random position.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ._font import FIRST_CODE, GLYPH_HEIGHT, GLYPH_WIDTH, LAST_CODE, glyph_rows
from .numerics import DimensionError, Rng

__all__ = [
    "Variant",
    "TriggerSpec",
    "GlyphError",
    "CUBE_CORNERS",
    "synthesize_pattern",
    "text_bitmap",
    "draw_position",
    "apply_trigger",
    "default_spec",
]

CUBE_CORNERS = np.array(
    [
        [0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1],
        [1, 1, 0], [0, 1, 1], [1, 0, 1], [1, 1, 1],
    ],
    dtype=np.float64,
)


class Variant(str, enum.Enum):
    BADNET_RANDOM = "BadNetRandom"
    BADNET_STRIPES = "BadNetStripes"
    BLENDED_RANDOM = "BlendedRandom"
    BLENDED_STRIPES = "BlendedStripes"
    BLENDED_TRIANGLES = "BlendedTriangles"
    BLENDED_TEXT = "BlendedText"

    @property
    def is_badnet(self) -> bool:
        return self in (Variant.BADNET_RANDOM, Variant.BADNET_STRIPES)


class GlyphError(KeyError):
    pass


@dataclass(frozen=True)
class TriggerSpec:
    variant: Variant
    patch_size: int = 8
    blend_weight: float = 0.2
    triangle_side: int = 14
    text: str = "Watermarked"
    text_height_frac: float = 0.1
    pattern_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if not 0.0 <= self.blend_weight <= 1.0:
            raise ValueError(f"blend_weight must lie in [0, 1], got {self.blend_weight}")
        if self.patch_size < 1 or self.triangle_side < 2:
            raise ValueError("patch_size must be >= 1 and triangle_side >= 2")

    @property
    def spec_id(self) -> str:
        return f"{self.variant.value}-{self.pattern_seed}"

    def to_dict(self) -> dict:
        return {
            "variant": self.variant.value,
            "patch_size": self.patch_size,
            "blend_weight": self.blend_weight,
            "triangle_side": self.triangle_side,
            "text": self.text,
            "text_height_frac": self.text_height_frac,
            "pattern_seed": self.pattern_seed,
        }


def default_spec(variant: Variant | str, pattern_seed: int = 0) -> TriggerSpec:
    """Per-variant defaults at the 32x32 desk resolution."""
    variant = Variant(variant)
    weights = {
        Variant.BADNET_RANDOM: 1.0,
        Variant.BADNET_STRIPES: 1.0,
        Variant.BLENDED_RANDOM: 0.2,
        Variant.BLENDED_STRIPES: 0.03,
        Variant.BLENDED_TRIANGLES: 0.15,
        Variant.BLENDED_TEXT: 0.5,
    }
    return TriggerSpec(variant, blend_weight=weights[variant], pattern_seed=pattern_seed)


def _stripes(width: int, height: int, seed: int) -> np.ndarray:
    rng = Rng(seed)
    cols = CUBE_CORNERS[[rng.integers(8) for _ in range(width)]]
    return np.broadcast_to(cols[None, :, :], (height, width, 3)).copy()


def _noise(width: int, height: int, seed: int) -> np.ndarray:
    rng = Rng(seed)
    vals = [rng.random() for _ in range(width * height * 3)]
    return np.asarray(vals, dtype=np.float64).reshape(height, width, 3)


def _triangles(width: int, height: int, side: int) -> np.ndarray:
    # Rows of alternating up/down triangles; up-triangles white, down black.
    row_h = side * math.sqrt(3.0) / 2.0
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64) + 0.5
    row = np.floor(ys / row_h)
    fy = ys / row_h - row
    xs_shift = xs / side + np.where(row % 2 == 1, 0.5, 0.0)
    fx = xs_shift - np.floor(xs_shift)
    up = np.abs(fx - 0.5) <= fy / 2.0
    return np.repeat(up[:, :, None].astype(np.float64), 3, axis=2)


def text_bitmap(text: str, glyph_height: int) -> np.ndarray:
    """Boolean coverage of ``text`` scaled by nearest neighbour to ``glyph_height`` rows."""
    bad = sorted({c for c in text if not FIRST_CODE <= ord(c) <= LAST_CODE})
    if bad:
        raise GlyphError(f"unsupported glyph(s): {''.join(bad)!r}")
    if not text:
        return np.zeros((max(glyph_height, 1), 0), dtype=bool)
    native_w = len(text) * (GLYPH_WIDTH + 1) - 1
    native = np.zeros((GLYPH_HEIGHT, native_w), dtype=bool)
    for k, ch in enumerate(text):
        rows = glyph_rows(ch)
        x0 = k * (GLYPH_WIDTH + 1)
        for r, bits in enumerate(rows):
            for c in range(GLYPH_WIDTH):
                native[r, x0 + c] = bool((bits >> (GLYPH_WIDTH - 1 - c)) & 1)
    glyph_height = max(int(glyph_height), 1)
    out_w = max(int(round(native_w * glyph_height / GLYPH_HEIGHT)), 1)
    ri = (np.arange(glyph_height) * GLYPH_HEIGHT) // glyph_height
    ci = (np.arange(out_w) * native_w) // out_w
    return native[np.ix_(ri, ci)]


def _text_layer(spec: TriggerSpec, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    gh = max(int(round(spec.text_height_frac * height)), 1)
    bm = text_bitmap(spec.text, gh)
    while bm.shape[1] > width and gh > 1:
        gh -= 1
        bm = text_bitmap(spec.text, gh)
    if bm.shape[1] > width:
        raise DimensionError(f"text {spec.text!r} cannot fit a {width}-pixel canvas")
    mask = np.zeros((height, width), dtype=bool)
    y0 = (height - bm.shape[0]) // 2
    x0 = (width - bm.shape[1]) // 2
    mask[y0:y0 + bm.shape[0], x0:x0 + bm.shape[1]] = bm
    pattern = np.zeros((height, width, 3))
    pattern[mask] = (1.0, 0.0, 0.0)
    return pattern, mask


@lru_cache(maxsize=64)
def _pattern_cached(spec: TriggerSpec, width: int, height: int):
    v = spec.variant
    mask = None
    if v in (Variant.BADNET_STRIPES, Variant.BLENDED_STRIPES):
        pat = _stripes(width, height, spec.pattern_seed)
    elif v in (Variant.BADNET_RANDOM, Variant.BLENDED_RANDOM):
        pat = _noise(width, height, spec.pattern_seed)
    elif v is Variant.BLENDED_TRIANGLES:
        pat = _triangles(width, height, spec.triangle_side)
    else:
        pat, mask = _text_layer(spec, width, height)
    pat.setflags(write=False)
    if mask is not None:
        mask.setflags(write=False)
    return pat, mask


def synthesize_pattern(
    spec: TriggerSpec, width: int, height: int, with_mask: bool = False
):
    """Full-canvas trigger pattern ``N`` (height x width x 3).

    With ``with_mask=True`` also returns the boolean coverage mask, which is
    only defined for text triggers (None otherwise).
    """
    if spec.variant.is_badnet and spec.patch_size > min(width, height):
        raise DimensionError(
            f"patch {spec.patch_size} does not fit a {width}x{height} canvas"
        )
    pat, mask = _pattern_cached(spec, int(width), int(height))
    if with_mask:
        return pat, mask
    return pat


def draw_position(spec: TriggerSpec, height: int, width: int, rng: Rng) -> tuple[int, int]:
    """Top-left (row, col) of a BadNet patch, uniform over valid placements."""
    ps = spec.patch_size
    if ps > min(height, width):
        raise DimensionError(f"patch {ps} does not fit a {width}x{height} image")
    return rng.integers(height - ps + 1), rng.integers(width - ps + 1)


def apply_trigger(
    image: np.ndarray,
    spec: TriggerSpec,
    rng: Rng | None = None,
    position: tuple[int, int] | None = None,
) -> np.ndarray:
    """Return a triggered copy of ``image`` (H x W x 3 in [0, 1]).

    BadNet variants need either ``rng`` (position drawn uniformly) or an
    explicit top-left ``position``.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DimensionError(f"expected an HxWx3 image, got {image.shape}")
    h, w, _ = image.shape
    if spec.variant.is_badnet:
        if position is None:
            if rng is None:
                raise ValueError("BadNet triggers need an rng or a position")
            position = draw_position(spec, h, w, rng)
        pat = synthesize_pattern(spec, w, h)
        ps = spec.patch_size
        r, c = position
        if not (0 <= r <= h - ps and 0 <= c <= w - ps):
            raise DimensionError(f"patch at {position} leaves the {w}x{h} image")
        out = image.copy()
        out[r:r + ps, c:c + ps] = pat[:ps, :ps]
        return np.clip(out, 0.0, 1.0)

    nc = spec.blend_weight
    pat, mask = synthesize_pattern(spec, w, h, with_mask=True)
    if nc == 0.0:
        out = image.copy()
    elif nc == 1.0:
        out = np.broadcast_to(pat, image.shape).copy()
    else:
        out = (1.0 - nc) * image + nc * pat
    if mask is not None:
        out = np.where(mask[:, :, None], out, image)
    return np.clip(out, 0.0, 1.0)
