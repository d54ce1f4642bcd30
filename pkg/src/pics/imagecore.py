"""Fundamental raster type, coordinate conventions, and raster file I/O.

Conventions used throughout the package: arrays are row-major with the
origin at the top-left, y increasing downward, and coordinates written
(row, col). Computation is 64-bit float; storage is 32-bit float
grayscale TIFF (little-endian, uncompressed). 16-bit unsigned TIFFs are
accepted on read and converted to float64 raw counts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import tifffile

from .errors import FormatError, ShapeError

UNITS = ("radians", "intensity_au", "dimensionless")

# TIFF compression codes accepted on read: none, deflate, adobe-deflate.
_READ_COMPRESSIONS = (1, 8, 32946)


@dataclass(frozen=True)
class RasterImage:
    """Single-channel 2-D image with pixel-size metadata.

    Parameters
    ----------
    pixels : ndarray
        2-D array; converted to float64. Must be finite everywhere.
    pixel_size_um : float, optional
        Micrometers per pixel.
    units_tag : str
        One of ``radians``, ``intensity_au``, ``dimensionless``.
    """

    pixels: np.ndarray
    pixel_size_um: float | None = None
    units_tag: str = "dimensionless"

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2:
            raise ShapeError(f"raster must be 2-D, got shape {px.shape}")
        if not np.all(np.isfinite(px)):
            raise ShapeError("raster contains non-finite values")
        if self.units_tag not in UNITS:
            raise ShapeError(f"unknown units_tag {self.units_tag!r}")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def like(self, pixels: np.ndarray, units_tag: str | None = None) -> "RasterImage":
        """New raster carrying this raster's metadata."""
        return RasterImage(pixels, self.pixel_size_um,
                           self.units_tag if units_tag is None else units_tag)


@dataclass(frozen=True)
class Mask:
    """Per-pixel boolean mask; dimensions match the raster it came from."""

    bits: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bits)
        if b.ndim != 2:
            raise ShapeError(f"mask must be 2-D, got shape {b.shape}")
        object.__setattr__(self, "bits", b.astype(bool, copy=False))

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]


def _metadata_description(img: RasterImage) -> str:
    return json.dumps({"pixel_size_um": img.pixel_size_um, "units_tag": img.units_tag})


def load_raster(path) -> RasterImage:
    """Load a grayscale TIFF as a float64 RasterImage.

    Accepts 32-bit float or 16-bit unsigned, single-page, uncompressed or
    deflate-compressed files. 16-bit values arrive as raw counts in
    [0, 65535]. Pixel size and units round-trip through the TIFF
    ImageDescription tag when present.

    Raises
    ------
    FormatError
        For RGB/multi-sample images, unsupported compression or dtype,
        multi-page files, or a corrupt header.
    """
    try:
        with tifffile.TiffFile(path) as tf:
            if len(tf.pages) != 1:
                raise FormatError(f"{path}: multi-page TIFF unsupported")
            page = tf.pages[0]
            if page.samplesperpixel != 1:
                raise FormatError(f"{path}: multi-channel TIFF unsupported")
            if int(page.compression) not in _READ_COMPRESSIONS:
                raise FormatError(f"{path}: unsupported compression {page.compression}")
            if page.dtype is None or page.dtype.kind not in ("f", "u") or \
                    page.dtype.itemsize not in (2, 4):
                raise FormatError(f"{path}: unsupported dtype {page.dtype}")
            arr = page.asarray()
            desc = page.description
    except FormatError:
        raise
    except Exception as exc:  # tifffile raises various types on bad headers
        raise FormatError(f"{path}: corrupt or unreadable TIFF ({exc})") from exc

    pixel_size = None
    units = "dimensionless"
    if desc:
        try:
            meta = json.loads(desc)
            pixel_size = meta.get("pixel_size_um")
            units = meta.get("units_tag", units)
        except (json.JSONDecodeError, AttributeError):
            pass  # foreign description tag; keep defaults
    if units not in UNITS:
        units = "dimensionless"
    return RasterImage(arr.astype(np.float64), pixel_size, units)


def save_raster(img: RasterImage, path) -> None:
    """Write a RasterImage as uncompressed 32-bit float grayscale TIFF."""
    tifffile.imwrite(
        path,
        img.pixels.astype(np.float32),
        photometric="minisblack",
        compression=None,
        description=_metadata_description(img),
        metadata=None,
    )


def crop_center(img: RasterImage, target_h: int, target_w: int) -> RasterImage:
    """Central target_h x target_w window of ``img``.

    The margin (img - target) must be even on each axis so the crop is
    symmetric; offsets are (img - target)/2.
    """
    h, w = img.height, img.width
    if target_h > h or target_w > w:
        raise ShapeError(f"crop target {target_h}x{target_w} larger than source {h}x{w}")
    if (h - target_h) % 2 or (w - target_w) % 2:
        raise ShapeError("crop margins must be even for a symmetric crop")
    oy = (h - target_h) // 2
    ox = (w - target_w) // 2
    return img.like(img.pixels[oy:oy + target_h, ox:ox + target_w].copy())


def downsample2(img: RasterImage) -> RasterImage:
    """Downsample by 2 with 2x2 mean pooling; dimensions must be even."""
    h, w = img.height, img.width
    if h % 2 or w % 2:
        raise ShapeError(f"downsample2 needs even dims, got {h}x{w}")
    px = img.pixels.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
    size = None if img.pixel_size_um is None else img.pixel_size_um * 2
    return RasterImage(px, size, img.units_tag)
