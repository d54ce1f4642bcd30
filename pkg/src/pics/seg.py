"""Digital stains to four-class semantic maps: threshold each stain,
then combine the masks with fixed precedence label algebra.

Classes: 0 background, 1 axon, 2 dendrite_soma, 3 nucleus. Precedence
runs nucleus > dendrite_soma > axon > background, so every pixel lands
in exactly one class:

    nucleus       = dapi
    dendrite_soma = map2 and not dapi
    axon          = tau and not map2 and not dapi
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
import tifffile
from scipy.ndimage import gaussian_filter

from .errors import DataError, FormatError, ShapeError
from .imagecore import Mask, RasterImage

CLASS_NAMES = ("background", "axon", "dendrite_soma", "nucleus")

# display palette for the paletted TIFF: black, green, red, blue
_PALETTE_RGB = ((0, 0, 0), (0, 200, 0), (220, 0, 0), (40, 80, 255))


@dataclass(frozen=True)
class SegmentationMap:
    classes: np.ndarray  # uint8 raster of class indices
    legend: tuple = CLASS_NAMES
    thresholds: dict = field(default_factory=dict)

    def __post_init__(self):
        arr = np.asarray(self.classes)
        if arr.ndim != 2:
            raise ShapeError(f"class raster must be 2-D, got {arr.shape}")
        arr = arr.astype(np.uint8)
        if arr.max(initial=0) >= len(self.legend):
            raise DataError(f"class index {arr.max()} outside legend "
                            f"of {len(self.legend)} names")
        object.__setattr__(self, "classes", arr)

    def class_mask(self, name: str) -> Mask:
        if name not in self.legend:
            raise DataError(f"unknown class {name!r}; legend is {self.legend}")
        return Mask(self.classes == self.legend.index(name))

    def counts(self) -> dict:
        return {name: int((self.classes == i).sum())
                for i, name in enumerate(self.legend)}


def otsu_threshold(values) -> float:
    """Otsu's method on a 256-bin histogram; first maximum wins ties.

    Returns the upper edge of the last bin assigned to the background
    class, so masks use a strict > comparison.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise DataError("empty input to otsu")
    if float(v.min()) == float(v.max()):
        raise DataError("constant image: Otsu has no valid split")
    hist, edges = np.histogram(v, bins=256)
    p = hist.astype(np.float64) / v.size
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(p)[:-1]            # split after bin k, k in 0..254
    w1 = 1.0 - w0
    cum_mean = np.cumsum(p * centers)[:-1]
    total_mean = float((p * centers).sum())
    valid = (w0 > 0) & (w1 > 0)
    sigma_b = np.zeros(255)
    mu0 = np.divide(cum_mean, w0, out=np.zeros_like(w0), where=valid)
    mu1 = np.divide(total_mean - cum_mean, w1, out=np.zeros_like(w1), where=valid)
    sigma_b[valid] = (w0 * w1 * (mu0 - mu1) ** 2)[valid]
    k = int(np.argmax(sigma_b))
    return float(edges[k + 1])


def threshold_stain(stain: RasterImage, method: str = "otsu",
                    smoothing_sigma: float = 1.0,
                    fixed_t: float = 0.0):
    """Gaussian-smooth then threshold; returns (Mask, threshold used)."""
    if not isinstance(stain, RasterImage):
        raise ShapeError("threshold_stain expects a RasterImage")
    if float(stain.pixels.min()) < 0:
        raise DataError("stain must be nonnegative")
    if smoothing_sigma < 0:
        raise DataError(f"smoothing_sigma must be >= 0, got {smoothing_sigma}")
    smoothed = (gaussian_filter(stain.pixels, smoothing_sigma)
                if smoothing_sigma > 0 else stain.pixels)
    if method == "otsu":
        t = otsu_threshold(smoothed)
    elif method == "fixed":
        t = float(fixed_t)
    else:
        raise DataError(f"unknown threshold method {method!r}")
    return Mask(smoothed > t), t


def compose_segmentation(tau: Mask, map2: Mask, dapi: Mask,
                         thresholds: dict | None = None) -> SegmentationMap:
    """Label algebra with nucleus > dendrite_soma > axon precedence."""
    if not (tau.bits.shape == map2.bits.shape == dapi.bits.shape):
        raise ShapeError(f"mask dims differ: {tau.bits.shape}, "
                         f"{map2.bits.shape}, {dapi.bits.shape}")
    classes = np.zeros(tau.bits.shape, dtype=np.uint8)
    classes[tau.bits & ~map2.bits & ~dapi.bits] = 1
    classes[map2.bits & ~dapi.bits] = 2
    classes[dapi.bits] = 3
    return SegmentationMap(classes, CLASS_NAMES, dict(thresholds or {}))


def segment_stains(tau: RasterImage, map2: RasterImage, dapi: RasterImage,
                   method: str = "otsu", smoothing_sigma: float = 1.0,
                   fixed_t: float = 0.0) -> SegmentationMap:
    """Threshold three stains and compose the class map in one call."""
    masks = {}
    thresholds = {}
    for name, stain in (("tau", tau), ("map2", map2), ("dapi", dapi)):
        masks[name], thresholds[name] = threshold_stain(
            stain, method, smoothing_sigma, fixed_t)
    thresholds["method"] = method
    thresholds["smoothing_sigma"] = smoothing_sigma
    return compose_segmentation(masks["tau"], masks["map2"], masks["dapi"],
                                thresholds)


def save_segmentation(seg: SegmentationMap, path) -> None:
    """8-bit paletted TIFF plus a JSON legend/threshold sidecar."""
    palette = np.zeros((3, 256), dtype=np.uint16)
    for i, rgb in enumerate(_PALETTE_RGB):
        palette[:, i] = [c * 257 for c in rgb]
    tifffile.imwrite(os.fspath(path), seg.classes, photometric="palette",
                     colormap=palette)
    sidecar = {"legend": list(seg.legend), "thresholds": seg.thresholds}
    with open(f"{os.fspath(path)}.json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=1)


def load_segmentation(path) -> SegmentationMap:
    try:
        classes = tifffile.imread(os.fspath(path))
    except Exception as exc:  # tifffile raises various types on bad headers
        raise FormatError(f"unreadable segmentation {path}: {exc}") from exc
    if classes.ndim != 2:
        raise FormatError(f"segmentation must be one 2-D page, got {classes.shape}")
    legend = CLASS_NAMES
    thresholds = {}
    sidecar_path = f"{os.fspath(path)}.json"
    if os.path.exists(sidecar_path):
        with open(sidecar_path, encoding="utf-8") as fh:
            doc = json.load(fh)
        legend = tuple(doc.get("legend", CLASS_NAMES))
        thresholds = doc.get("thresholds", {})
    return SegmentationMap(classes, legend, thresholds)
