"""Preprocessing chain for phase/fluorescence pairs.

Background estimation with energy-outlier rejection, Haar-wavelet focus
selection over z-stacks, integer-translation registration by phase
correlation, and patch extraction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeError
from .imagecore import RasterImage, crop_center

_MAD_SCALE = 1.4826  # consistent with a normal distribution's sigma


@dataclass(frozen=True)
class ZStack:
    """Images of one field at multiple focus depths."""

    slices: tuple
    z_spacing_um: float | None = None

    def __post_init__(self):
        sl = tuple(self.slices)
        if not sl:
            raise DataError("z-stack needs at least one slice")
        dims = {(s.height, s.width) for s in sl}
        if len(dims) != 1:
            raise ShapeError(f"z-stack slice dims differ: {sorted(dims)}")
        object.__setattr__(self, "slices", sl)


@dataclass(frozen=True)
class BackgroundModel:
    background: RasterImage
    included_count: int
    excluded_indices: tuple
    energy_values: tuple


@dataclass(frozen=True)
class Shift2D:
    """Integer displacement of `moving` relative to `fixed` in (row, col)."""

    dy: int
    dx: int
    peak_correlation: float


@dataclass(frozen=True)
class HaarPyramid:
    """Orthonormal Haar analysis: coarse LL plus (LH, HL, HH) per level.

    details[0] is the finest level (computed from the full-resolution
    input); each subsequent entry comes from recursing on LL.
    """

    ll: np.ndarray
    details: tuple  # of (lh, hl, hh) ndarray triples


def image_energy(img: RasterImage) -> float:
    """Sum of absolute pixel values."""
    return float(np.abs(img.pixels).sum())


def estimate_background(images, outlier_k: float = 3.0) -> BackgroundModel:
    """Pixelwise mean of the images whose energy is not an outlier.

    Image i is excluded when |E_i - median(E)| > outlier_k * 1.4826 * MAD(E)
    (strict inequality, so identical-energy stacks exclude nothing even
    though their MAD is zero). If the rule ever excluded everything, the
    pixelwise median of all images is returned instead (degeneracy guard).
    """
    images = list(images)
    if len(images) < 2:
        raise DataError(f"need >= 2 images to estimate a background, got {len(images)}")
    dims = {(im.height, im.width) for im in images}
    if len(dims) != 1:
        raise ShapeError(f"background input dims differ: {sorted(dims)}")

    energies = np.array([image_energy(im) for im in images])
    med = np.median(energies)
    mad = np.median(np.abs(energies - med))
    excluded = np.abs(energies - med) > outlier_k * _MAD_SCALE * mad

    stack = np.stack([im.pixels for im in images])
    ref = images[0]
    if excluded.all():
        bg = np.median(stack, axis=0)
        return BackgroundModel(ref.like(bg), len(images), tuple(), tuple(energies.tolist()))
    bg = stack[~excluded].mean(axis=0)
    excl_idx = tuple(int(i) for i in np.nonzero(excluded)[0])
    return BackgroundModel(ref.like(bg), int((~excluded).sum()), excl_idx,
                           tuple(energies.tolist()))


def subtract_background(img: RasterImage, bg: BackgroundModel) -> RasterImage:
    if (img.height, img.width) != (bg.background.height, bg.background.width):
        raise ShapeError("image and background dims differ")
    return img.like(img.pixels - bg.background.pixels)


def _haar_level(x: np.ndarray):
    a = x[0::2, 0::2]
    b = x[0::2, 1::2]
    c = x[1::2, 0::2]
    d = x[1::2, 1::2]
    ll = (a + b + c + d) / 2.0
    lh = (a + b - c - d) / 2.0
    hl = (a - b + c - d) / 2.0
    hh = (a - b - c + d) / 2.0
    return ll, lh, hl, hh


def haar_dwt2(img: RasterImage, levels: int = 1) -> HaarPyramid:
    """Orthonormal 2-D Haar analysis (filters [1,1]/sqrt(2), [1,-1]/sqrt(2)).

    Energy is conserved: sum of squared input pixels equals the sum of
    squared coefficients over LL and all detail subbands (Parseval).
    Dimensions must be divisible by 2**levels.
    """
    if levels < 1:
        raise ShapeError(f"levels must be >= 1, got {levels}")
    h, w = img.height, img.width
    if h % (1 << levels) or w % (1 << levels):
        raise ShapeError(f"dims {h}x{w} not divisible by 2^{levels}")
    x = img.pixels
    details = []
    for _ in range(levels):
        x, lh, hl, hh = _haar_level(x)
        details.append((lh, hl, hh))
    return HaarPyramid(x, tuple(details))


def haar_idwt2(pyr: HaarPyramid) -> np.ndarray:
    """Inverse of haar_dwt2 (exact synthesis)."""
    x = pyr.ll
    for lh, hl, hh in reversed(pyr.details):
        h2, w2 = lh.shape
        out = np.empty((h2 * 2, w2 * 2), dtype=np.float64)
        out[0::2, 0::2] = (x + lh + hl + hh) / 2.0
        out[0::2, 1::2] = (x + lh - hl - hh) / 2.0
        out[1::2, 0::2] = (x - lh + hl - hh) / 2.0
        out[1::2, 1::2] = (x - lh - hl + hh) / 2.0
        x = out
    return x


def select_focus(stack: ZStack, levels: int = 1) -> int:
    """Index of the slice with maximal Haar detail-band energy.

    Ties break toward the lowest index.
    """
    scores = []
    for sl in stack.slices:
        pyr = haar_dwt2(sl, levels)
        scores.append(sum(float((band ** 2).sum())
                          for triple in pyr.details for band in triple))
    return int(np.argmax(scores))


def register_translation(fixed: RasterImage, moving: RasterImage) -> Shift2D:
    """Integer-translation registration by phase correlation.

    Returns the circular displacement (dy, dx) of ``moving`` relative to
    ``fixed``: moving == roll(fixed, (dy, dx)) recovers exactly (dy, dx).
    Rolling ``moving`` by (-dy, -dx) aligns it to ``fixed``
    (apply_shift_and_crop does this). peak_correlation is the height of
    the normalized correlation peak, in [0, 1].
    """
    if (fixed.height, fixed.width) != (moving.height, moving.width):
        raise ShapeError("registration inputs must share dims")
    f = fixed.pixels
    m = moving.pixels
    if np.ptp(f) == 0 or np.ptp(m) == 0:
        raise DataError("constant image: correlation undefined")
    spec_f = np.fft.fft2(f)
    spec_m = np.fft.fft2(m)
    cross = np.conj(spec_f) * spec_m
    cross /= np.maximum(np.abs(cross), 1e-12)
    corr = np.fft.ifft2(cross).real
    peak = int(np.argmax(corr))
    dy, dx = np.unravel_index(peak, corr.shape)
    h, w = corr.shape
    if dy > h // 2:
        dy -= h
    if dx > w // 2:
        dx -= w
    peak_val = float(np.clip(corr.flat[peak], 0.0, 1.0))
    return Shift2D(int(dy), int(dx), peak_val)


def apply_shift_and_crop(phase: RasterImage, fluor: RasterImage, shift: Shift2D,
                         crop_total: int = 64):
    """Align fluor to phase by the registered shift, then center-crop both.

    ``crop_total`` pixels are removed per axis in total (2048 -> 1984 for
    the default 64). Shift components must not exceed crop_total/2, so
    wrapped-in pixels never survive the crop.
    """
    if max(abs(shift.dy), abs(shift.dx)) > crop_total / 2:
        raise ShapeError(
            f"shift ({shift.dy}, {shift.dx}) exceeds crop margin {crop_total}/2")
    aligned = np.roll(fluor.pixels, (-shift.dy, -shift.dx), axis=(0, 1))
    th, tw = phase.height - crop_total, phase.width - crop_total
    phase_c = crop_center(phase, th, tw)
    fluor_c = crop_center(fluor.like(aligned), th, tw)
    return phase_c, fluor_c


def patchify(img: RasterImage, patch: int = 992):
    """Non-overlapping row-major tiling into patch x patch rasters.

    Dimensions must be divisible by ``patch``; concatenating the patches
    in order reconstructs the source.
    """
    h, w = img.height, img.width
    if h % patch or w % patch:
        raise ShapeError(f"dims {h}x{w} not divisible by patch {patch}")
    out = []
    for r in range(0, h, patch):
        for c in range(0, w, patch):
            out.append(img.like(img.pixels[r:r + patch, c:c + patch].copy()))
    return out
