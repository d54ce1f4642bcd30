"""prep: background model, Haar pyramid, focus metric, registration, patches."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.ndimage import gaussian_filter

from pics.errors import DataError, ShapeError
from pics.imagecore import RasterImage
from pics.prep import (ZStack, apply_shift_and_crop, estimate_background,
                       haar_dwt2, haar_idwt2, image_energy, patchify,
                       register_translation, select_focus,
                       subtract_background)


def _texture(n=256, seed=0):
    rng = np.random.default_rng(seed)
    return RasterImage(gaussian_filter(rng.standard_normal((n, n)), 3.0))


# -- image energy and background -------------------------------------------

def test_image_energy_examples():
    assert image_energy(RasterImage(np.zeros((3, 3)))) == 0.0
    assert image_energy(RasterImage(np.array([[1.0, -1.0], [2.0, -2.0]]))) == 6.0
    assert image_energy(RasterImage(np.full((4, 5), -0.5))) == 0.5 * 20


def test_background_identical_rasters_mad_zero():
    rng = np.random.default_rng(2)
    base = RasterImage(rng.standard_normal((8, 8)))
    bg = estimate_background([base] * 5)
    # mean of five copies reproduces the input up to summation rounding
    assert np.allclose(bg.background.pixels, base.pixels, rtol=0, atol=1e-12)
    assert bg.excluded_indices == ()
    assert bg.included_count == 5


def test_background_outlier_excluded():
    ones = [RasterImage(np.ones((4, 4))) for _ in range(9)]
    outlier = RasterImage(np.full((4, 4), 100.0))
    bg = estimate_background(ones + [outlier])
    assert bg.excluded_indices == (9,)
    assert bg.included_count == 9
    assert np.all(bg.background.pixels == 1.0)
    assert len(bg.energy_values) == 10


def test_background_degeneracy_guard_median_fallback():
    # both images are outliers under the strict rule; the guard keeps the
    # pixelwise median of everything, a constant 1 here
    a = RasterImage(np.full((2, 2), 0.0))
    b = RasterImage(np.full((2, 2), 2.0))
    bg = estimate_background([a, b])
    assert np.all(bg.background.pixels == 1.0)


def test_background_validation():
    with pytest.raises(DataError):
        estimate_background([RasterImage(np.zeros((2, 2)))])
    with pytest.raises(ShapeError):
        estimate_background([RasterImage(np.zeros((2, 2))),
                             RasterImage(np.zeros((3, 3)))])


def test_subtract_background():
    rng = np.random.default_rng(5)
    imgs = [RasterImage(rng.standard_normal((6, 6))) for _ in range(4)]
    bg = estimate_background(imgs)
    zero = subtract_background(bg.background, bg)
    assert np.all(zero.pixels == 0.0)
    shifted = subtract_background(bg.background.like(bg.background.pixels + 0.3), bg)
    assert np.max(np.abs(shifted.pixels - 0.3)) < 1e-15
    with pytest.raises(ShapeError):
        subtract_background(RasterImage(np.zeros((3, 3))), bg)


# -- Haar pyramid ------------------------------------------------------------

def test_haar_2x2_closed_form():
    a, b, c, d = 1.0, 2.0, 3.0, 5.0
    pyr = haar_dwt2(RasterImage(np.array([[a, b], [c, d]])))
    lh, hl, hh = pyr.details[0]
    assert pyr.ll[0, 0] == (a + b + c + d) / 2
    assert lh[0, 0] == (a + b - c - d) / 2
    assert hl[0, 0] == (a - b + c - d) / 2
    assert hh[0, 0] == (a - b - c + d) / 2


def test_haar_constant_input():
    pyr = haar_dwt2(RasterImage(np.full((8, 8), 1.5)), levels=2)
    for triple in pyr.details:
        for band in triple:
            assert np.all(band == 0.0)
    assert np.allclose(pyr.ll, 1.5 * 4)  # constant * 2^levels


def test_haar_parseval_and_reconstruction():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((64, 64))
    pyr = haar_dwt2(RasterImage(x), levels=3)
    energy_in = float((x ** 2).sum())
    energy_out = float((pyr.ll ** 2).sum()) + sum(
        float((band ** 2).sum()) for triple in pyr.details for band in triple)
    assert abs(energy_in - energy_out) / energy_in < 1e-10
    assert np.max(np.abs(haar_idwt2(pyr) - x)) < 1e-12


def test_haar_dims_validation():
    with pytest.raises(ShapeError):
        haar_dwt2(RasterImage(np.zeros((6, 6))), levels=2)
    with pytest.raises(ShapeError):
        haar_dwt2(RasterImage(np.zeros((4, 4))), levels=0)


@settings(derandomize=True, max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), levels=st.integers(1, 3))
def test_haar_parseval_property(seed, levels):
    x = np.random.default_rng(seed).standard_normal((16, 16))
    pyr = haar_dwt2(RasterImage(x), levels=levels)
    energy_out = float((pyr.ll ** 2).sum()) + sum(
        float((band ** 2).sum()) for triple in pyr.details for band in triple)
    assert abs(float((x ** 2).sum()) - energy_out) <= 1e-10 * float((x ** 2).sum())


# -- focus selection ---------------------------------------------------------

def test_focus_single_slice():
    assert select_focus(ZStack((RasterImage(np.ones((4, 4))),))) == 0


def test_focus_blur_ordering():
    sharp = _texture(64, seed=3)
    stack = ZStack((sharp,
                    sharp.like(gaussian_filter(sharp.pixels, 2.0)),
                    sharp.like(gaussian_filter(sharp.pixels, 4.0))))
    assert select_focus(stack) == 0
    reordered = ZStack((stack.slices[1], stack.slices[2], stack.slices[0]))
    assert select_focus(reordered) == 2


def test_focus_tie_breaks_low():
    img = _texture(32, seed=4)
    assert select_focus(ZStack((img, img, img))) == 0


def test_zstack_validation():
    with pytest.raises(DataError):
        ZStack(())
    with pytest.raises(ShapeError):
        ZStack((RasterImage(np.zeros((2, 2))), RasterImage(np.zeros((4, 4)))))


# -- registration ------------------------------------------------------------

def test_register_identity():
    img = _texture(64, seed=6)
    shift = register_translation(img, img)
    assert (shift.dy, shift.dx) == (0, 0)
    assert shift.peak_correlation > 0.9


def test_register_exact_shift():
    fixed = _texture(128, seed=7)
    moving = fixed.like(np.roll(fixed.pixels, (5, -3), axis=(0, 1)))
    shift = register_translation(fixed, moving)
    assert (shift.dy, shift.dx) == (5, -3)


def test_register_shift_under_noise():
    fixed = _texture(128, seed=8)
    rng = np.random.default_rng(9)
    span = float(np.ptp(fixed.pixels))
    moving = fixed.like(np.roll(fixed.pixels, (5, -3), axis=(0, 1))
                        + rng.normal(0.0, 0.01 * span, fixed.pixels.shape))
    shift = register_translation(fixed, moving)
    assert (shift.dy, shift.dx) == (5, -3)
    # whitened correlation spreads noise energy; the peak stays dominant
    assert shift.peak_correlation > 0.1


def test_register_constant_image_rejected():
    img = _texture(32, seed=10)
    with pytest.raises(DataError):
        register_translation(img, img.like(np.zeros_like(img.pixels)))
    with pytest.raises(ShapeError):
        register_translation(img, _texture(64, seed=10))


# -- shift + crop, patches ---------------------------------------------------

def test_apply_shift_and_crop_aligns():
    phase = _texture(128, seed=12)
    fluor = phase.like(np.roll(phase.pixels, (10, 10), axis=(0, 1)))
    shift = register_translation(phase, fluor)
    assert (shift.dy, shift.dx) == (10, 10)
    pc, fc = apply_shift_and_crop(phase, fluor, shift, crop_total=64)
    assert pc.pixels.shape == (64, 64)
    assert np.array_equal(pc.pixels, fc.pixels)  # alignment residual is zero


def test_apply_shift_zero_crop_identity():
    phase = _texture(32, seed=13)
    from pics.prep import Shift2D
    pc, fc = apply_shift_and_crop(phase, phase, Shift2D(0, 0, 1.0), crop_total=0)
    assert np.array_equal(pc.pixels, phase.pixels)
    assert np.array_equal(fc.pixels, phase.pixels)


def test_apply_shift_margin_guard():
    from pics.prep import Shift2D
    phase = _texture(128, seed=14)
    with pytest.raises(ShapeError):
        apply_shift_and_crop(phase, phase, Shift2D(40, 0, 1.0), crop_total=64)


def test_patchify_4x4_ramp():
    ramp = RasterImage(np.arange(16.0).reshape(4, 4))
    patches = patchify(ramp, patch=2)
    assert len(patches) == 4
    assert np.array_equal(patches[0].pixels, ramp.pixels[0:2, 0:2])
    assert np.array_equal(patches[1].pixels, ramp.pixels[0:2, 2:4])
    assert np.array_equal(patches[2].pixels, ramp.pixels[2:4, 0:2])
    assert np.array_equal(patches[3].pixels, ramp.pixels[2:4, 2:4])


def test_patchify_whole_image_and_stitch():
    img = _texture(64, seed=15)
    assert len(patchify(img, patch=64)) == 1
    patches = patchify(img, patch=16)
    rows = [np.concatenate([p.pixels for p in patches[r:r + 4]], axis=1)
            for r in range(0, 16, 4)]
    assert np.array_equal(np.concatenate(rows, axis=0), img.pixels)


def test_patchify_divisibility_guard():
    with pytest.raises(ShapeError):
        patchify(RasterImage(np.zeros((6, 6))), patch=4)
