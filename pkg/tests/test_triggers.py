import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from parclip._font import FONT_5X7, GLYPH_HEIGHT
from parclip.numerics import DimensionError, Rng
from parclip.triggers import (
    GlyphError,
    TriggerSpec,
    Variant,
    apply_trigger,
    default_spec,
    synthesize_pattern,
    text_bitmap,
)

BLENDED = [Variant.BLENDED_RANDOM, Variant.BLENDED_STRIPES, Variant.BLENDED_TRIANGLES, Variant.BLENDED_TEXT]


def random_image(seed, h=32, w=32):
    return np.random.default_rng(seed).uniform(size=(h, w, 3))


def test_stripes_are_constant_columns_of_cube_corners():
    pat = synthesize_pattern(TriggerSpec(Variant.BADNET_STRIPES, patch_size=8, pattern_seed=4), 16, 16)
    assert pat.shape == (16, 16, 3)
    assert np.all((pat == 0) | (pat == 1))
    assert np.all(pat == pat[:1])
    assert len({tuple(c) for c in pat[0]}) > 1


def test_random_pattern_is_deterministic():
    spec = TriggerSpec(Variant.BLENDED_RANDOM, pattern_seed=99)
    a = synthesize_pattern(spec, 20, 24)
    b = synthesize_pattern(TriggerSpec(Variant.BLENDED_RANDOM, pattern_seed=99), 20, 24)
    assert np.array_equal(a, b)
    assert a.shape == (24, 20, 3) and a.min() >= 0 and a.max() <= 1


def test_triangles_are_black_and_white():
    pat = synthesize_pattern(default_spec(Variant.BLENDED_TRIANGLES), 32, 32)
    vals = set(np.unique(pat))
    assert vals == {0.0, 1.0}
    assert 0.3 < pat.mean() < 0.7


def _font_bits(ch):
    start = (ord(ch) - 32) * GLYPH_HEIGHT
    return FONT_5X7[start:start + GLYPH_HEIGHT]


def test_text_mask_count_matches_font_bits_at_native_scale():
    expected = sum(bin(b).count("1") for b in _font_bits("W"))
    spec = TriggerSpec(Variant.BLENDED_TEXT, blend_weight=0.5, text="W", text_height_frac=0.1)
    _, mask = synthesize_pattern(spec, 70, 70, with_mask=True)
    assert int(mask.sum()) == expected == 17


def test_text_mask_count_matches_scaled_oracle():
    # nearest-neighbour upscale of 'W' to 14 rows: every output pixel (y, x) reads glyph
    # row floor(y * 7 / 14) and column floor(x * 5 / 10)
    rows = _font_bits("W")
    count = 0
    for y in range(14):
        for x in range(10):
            if (rows[(y * 7) // 14] >> (4 - (x * 5) // 10)) & 1:
                count += 1
    spec = TriggerSpec(Variant.BLENDED_TEXT, text="W", text_height_frac=0.1)
    _, mask = synthesize_pattern(spec, 140, 140, with_mask=True)
    assert int(mask.sum()) == count == 4 * 17


def test_text_pattern_is_pure_red_where_covered():
    pat, mask = synthesize_pattern(default_spec(Variant.BLENDED_TEXT), 64, 64, with_mask=True)
    assert mask.any()
    assert np.all(pat[mask] == (1.0, 0.0, 0.0))
    assert np.all(pat[~mask] == 0.0)


def test_unsupported_glyph_lists_character():
    with pytest.raises(GlyphError, match="é"):
        text_bitmap("café", 7)


@pytest.mark.parametrize("variant", BLENDED)
def test_blend_endpoints(variant):
    img = random_image(0)
    zero = apply_trigger(img, TriggerSpec(variant, blend_weight=0.0, pattern_seed=3))
    assert np.array_equal(zero, img)
    spec = TriggerSpec(variant, blend_weight=1.0, pattern_seed=3)
    pat, mask = synthesize_pattern(spec, 32, 32, with_mask=True)
    one = apply_trigger(img, spec)
    if mask is None:
        assert np.array_equal(one, pat)
    else:
        assert np.array_equal(one[mask], pat[mask])
        assert np.array_equal(one[~mask], img[~mask])


def test_blended_stripes_on_gray_hand_value():
    spec = TriggerSpec(Variant.BLENDED_STRIPES, blend_weight=0.03, pattern_seed=5)
    pat = synthesize_pattern(spec, 32, 32)
    white_cols = np.where(np.all(pat[0] == 1.0, axis=1))[0]
    assert white_cols.size, "seed 5 should draw at least one white column"
    out = apply_trigger(np.full((32, 32, 3), 0.5), spec)
    scalar = (1 - 0.03) * 0.5 + 0.03 * 1.0
    assert scalar == pytest.approx(0.515)
    np.testing.assert_allclose(out[:, white_cols], scalar, atol=1e-15)


@pytest.mark.parametrize("variant", [Variant.BADNET_STRIPES, Variant.BADNET_RANDOM])
def test_badnet_locality_and_idempotence(variant):
    img = random_image(1)
    spec = TriggerSpec(variant, patch_size=8, pattern_seed=2)
    out = apply_trigger(img, spec, Rng(10))
    changed = np.any(out != img, axis=2)
    assert changed.sum() <= 64
    rows, cols = np.where(changed)
    assert rows.max() - rows.min() < 8 and cols.max() - cols.min() < 8
    once = apply_trigger(img, spec, position=(5, 9))
    twice = apply_trigger(once, spec, position=(5, 9))
    assert np.array_equal(once, twice)
    outside = np.ones((32, 32), bool)
    outside[5:13, 9:17] = False
    assert np.array_equal(once[outside], img[outside])


def test_badnet_patch_too_large():
    with pytest.raises(DimensionError):
        apply_trigger(random_image(2, 6, 6), TriggerSpec(Variant.BADNET_STRIPES, patch_size=8), Rng(0))


def test_text_trigger_touches_only_mask_pixels():
    img = random_image(3, 48, 48)
    spec = default_spec(Variant.BLENDED_TEXT)
    _, mask = synthesize_pattern(spec, 48, 48, with_mask=True)
    out = apply_trigger(img, spec)
    changed = np.any(out != img, axis=2)
    assert not np.any(changed & ~mask)
    assert changed.sum() > 0


@settings(max_examples=40, deadline=None)
@given(
    st.sampled_from(BLENDED),
    st.floats(0.0, 1.0),
    st.integers(0, 2**32),
    st.integers(0, 1000),
)
def test_blend_is_pixelwise_convex(variant, nc, pseed, iseed):
    img = random_image(iseed)
    spec = TriggerSpec(variant, blend_weight=nc, pattern_seed=pseed)
    pat, mask = synthesize_pattern(spec, 32, 32, with_mask=True)
    out = apply_trigger(img, spec)
    lo, hi = np.minimum(img, pat), np.maximum(img, pat)
    assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)
    assert out.min() >= 0.0 and out.max() <= 1.0
    # applying at n_c then at 0 equals the n_c result
    assert np.array_equal(apply_trigger(out, TriggerSpec(variant, blend_weight=0.0, pattern_seed=pseed)), out)


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(list(Variant)), st.integers(0, 2**40))
def test_outputs_in_unit_range_and_deterministic(variant, seed):
    img = random_image(seed % 1000)
    spec = default_spec(variant, pattern_seed=seed)
    a = apply_trigger(img, spec, Rng(seed))
    b = apply_trigger(img, spec, Rng(seed))
    assert np.array_equal(a, b)
    assert a.min() >= 0.0 and a.max() <= 1.0
