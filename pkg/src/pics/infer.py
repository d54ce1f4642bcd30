"""Inference: apply trained checkpoints to unseen phase images of any
size, including time-lapse sequences with RGB overlay composites.

Sizes not divisible by 2^depth are reflect-padded up to the next
multiple and cropped back, so the output footprint always equals the
input footprint. Stain predictions are clamped at zero; overlays scale
each channel by its min/max over the whole sequence so intensity stays
comparable across frames.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass

import numpy as np
import tifffile

from .errors import ConfigError, DataError, ShapeError
from .imagecore import RasterImage, load_raster, save_raster
from .nn import forward
from .nn.checkpoint import ModelCheckpoint


@dataclass(frozen=True)
class TimelapseSequence:
    field_id: str
    well_id: str
    frames: tuple  # of (time_hours, RasterImage)

    def __post_init__(self):
        if len(self.frames) == 0:
            raise DataError("empty timelapse sequence")
        times = [t for t, _ in self.frames]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise DataError(f"frame times must strictly increase, got {times}")
        dims = {(img.height, img.width) for _, img in self.frames}
        if len(dims) > 1:
            raise ShapeError(f"frame dims drift across sequence: {sorted(dims)}")


def _pad_to_multiple(x, mult: int):
    """Reflect-pad a 2-D array so both dims are multiples of mult."""
    h, w = x.shape
    ph = (-h) % mult
    pw = (-w) % mult
    if ph or pw:
        if h == 1 or w == 1:
            raise ShapeError(f"cannot reflect-pad degenerate dims {x.shape}")
        x = np.pad(x, ((0, ph), (0, pw)), mode="reflect")
    return x, (h, w)


def predict_array(model, net_cfg, x2d, input_mean: float, input_std: float,
                  clamp: bool = True):
    """Array-level predict: normalize, pad, eval forward, crop, denormalize."""
    x2d = np.asarray(x2d, dtype=np.float64)
    if x2d.ndim != 2:
        raise ShapeError(f"expected a 2-D phase array, got shape {x2d.shape}")
    if net_cfg.in_channels != 1:
        raise ConfigError(f"single-raster predict needs in_channels == 1, "
                          f"checkpoint has {net_cfg.in_channels}")
    if input_std <= 0:
        raise ConfigError(f"checkpoint input_std must be > 0, got {input_std}")
    xn = (x2d - input_mean) / input_std
    xp, (h, w) = _pad_to_multiple(xn, 1 << net_cfg.depth)
    y, _ = forward(model, net_cfg, xp[None, None], mode="eval")
    out = y[0, 0, :h, :w] * input_std + input_mean
    if clamp:
        out = np.maximum(out, 0.0)
    return out


def predict(checkpoint: ModelCheckpoint, phase: RasterImage) -> RasterImage:
    """Digital stain for one phase image; output dims equal input dims."""
    out = predict_array(checkpoint.model, checkpoint.net_cfg, phase.pixels,
                        checkpoint.input_mean, checkpoint.input_std)
    return RasterImage(out, phase.pixel_size_um, "intensity_au")


@dataclass(frozen=True)
class FramePrediction:
    time_hours: float
    tau: RasterImage
    map2: RasterImage
    dapi: RasterImage | None
    overlay: np.ndarray  # (H, W, 3) uint8


def _scale_u8(stack, lo: float, hi: float):
    span = hi - lo
    if span <= 0:
        return [np.zeros_like(s, dtype=np.uint8) for s in stack]
    return [np.clip((s - lo) / span * 255.0, 0, 255).astype(np.uint8) for s in stack]


def predict_timelapse(ckpt_tau: ModelCheckpoint, ckpt_map2: ModelCheckpoint,
                      seq: TimelapseSequence, ckpt_dapi=None):
    """Per-frame Tau/MAP2 (and optional DAPI) stains plus RGB overlays.

    Overlay channels follow the MAP2 -> red, Tau -> green, DAPI -> blue
    convention; min-max scaling constants are computed once per sequence.
    """
    stains = {"tau": [], "map2": [], "dapi": []}
    ckpts = {"tau": ckpt_tau, "map2": ckpt_map2, "dapi": ckpt_dapi}
    for _, img in seq.frames:
        for name, ck in ckpts.items():
            if ck is not None:
                stains[name].append(predict(ck, img).pixels)

    u8 = {}
    for name, frames in stains.items():
        if frames:
            lo = min(float(f.min()) for f in frames)
            hi = max(float(f.max()) for f in frames)
            u8[name] = _scale_u8(frames, lo, hi)

    results = []
    px = seq.frames[0][1].pixel_size_um
    for i, (t, img) in enumerate(seq.frames):
        rgb = np.zeros((img.height, img.width, 3), dtype=np.uint8)
        rgb[..., 0] = u8["map2"][i]
        rgb[..., 1] = u8["tau"][i]
        if ckpt_dapi is not None:
            rgb[..., 2] = u8["dapi"][i]
        results.append(FramePrediction(
            time_hours=t,
            tau=RasterImage(stains["tau"][i], px, "intensity_au"),
            map2=RasterImage(stains["map2"][i], px, "intensity_au"),
            dapi=(RasterImage(stains["dapi"][i], px, "intensity_au")
                  if ckpt_dapi is not None else None),
            overlay=rgb,
        ))
    return results


def save_overlay(overlay, path) -> None:
    """Write an (H, W, 3) uint8 overlay as an RGB TIFF."""
    arr = np.asarray(overlay)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
        raise ShapeError(f"overlay must be (H, W, 3) uint8, got "
                         f"{arr.shape} {arr.dtype}")
    tifffile.imwrite(os.fspath(path), arr, photometric="rgb")


_SEQ_RE = re.compile(r"^(?P<field>.+?)_t(?P<t>\d+)_phase\.tiff?$")


def load_sequence(directory, hours_per_frame: float = 1.0,
                  well_id: str = "w0") -> TimelapseSequence:
    """Build a TimelapseSequence from <field>_t<k>_phase.tif files."""
    if hours_per_frame <= 0:
        raise ConfigError("hours_per_frame must be > 0")
    found = []
    for name in sorted(os.listdir(directory)):
        m = _SEQ_RE.match(name)
        if m:
            found.append((int(m.group("t")), m.group("field"),
                          os.path.join(directory, name)))
    if not found:
        raise DataError(f"no *_t<k>_phase.tif frames in {directory}")
    fields = {f for _, f, _ in found}
    if len(fields) > 1:
        raise DataError(f"directory mixes fields {sorted(fields)}; "
                        "one sequence per directory")
    found.sort()
    frames = tuple((t * hours_per_frame, load_raster(p)) for t, _, p in found)
    return TimelapseSequence(field_id=found[0][1], well_id=well_id, frames=frames)
