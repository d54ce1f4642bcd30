"""Dataset pairing, deterministic splits, and the synthetic neuron phantom.

Filename convention: ``<field>_phase.tif``, ``<field>_tau.tif``,
``<field>_map2.tif``, ``<field>_dapi.tif``; time-lapse inserts a frame
index before the channel suffix: ``<field>_t<k>_phase.tif``.

The phantom renders soma disks with interior nuclei plus per-cell
branches (one thin low-phase axon, several thick dendrites) as smoothed
random walks, giving the network a learnable width/phase-density cue.
"""

from __future__ import annotations

import json
import math
import os
import re
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, DataError
from .imagecore import RasterImage, load_raster, save_raster

CHANNELS = ("phase", "tau", "map2", "dapi")
SPLITS = ("train", "val", "test")

_NAME_RE = re.compile(
    r"^(?P<field>.+?)(?:_t(?P<t>\d+))?_(?P<chan>phase|tau|map2|dapi)\.tiff?$")


@dataclass
class SampleRecord:
    field_id: str
    phase_path: str
    time_index: int | None = None
    tau_path: str | None = None
    map2_path: str | None = None
    dapi_path: str | None = None
    well_id: str | None = None

    @property
    def inference_only(self) -> bool:
        """True when the record carries no fluorescence ground truth."""
        return self.tau_path is None and self.map2_path is None and self.dapi_path is None

    def channel_path(self, channel: str) -> str | None:
        if channel not in CHANNELS:
            raise ConfigError(f"unknown channel {channel!r}")
        return getattr(self, f"{channel}_path")


@dataclass
class DatasetManifest:
    records: list
    split: dict = field(default_factory=dict)
    seed: int | None = None

    def field_ids(self):
        """Unique field ids in first-appearance order."""
        seen = {}
        for r in self.records:
            seen.setdefault(r.field_id, None)
        return list(seen)

    def records_for(self, split_name: str):
        if split_name not in SPLITS:
            raise ConfigError(f"unknown split {split_name!r}")
        return [r for r in self.records if self.split.get(r.field_id) == split_name]

    def save(self, path) -> None:
        """Write JSON; record paths are stored relative to the manifest."""
        base = os.path.dirname(os.path.abspath(path))

        def rel(p):
            return None if p is None else os.path.relpath(os.path.abspath(p), base)

        doc = {
            "schema": 1,
            "seed": self.seed,
            "split": self.split,
            "records": [
                {
                    "field_id": r.field_id,
                    "time_index": r.time_index,
                    "phase_path": rel(r.phase_path),
                    "tau_path": rel(r.tau_path),
                    "map2_path": rel(r.map2_path),
                    "dapi_path": rel(r.dapi_path),
                    "well_id": r.well_id,
                }
                for r in self.records
            ],
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=1)

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        base = os.path.dirname(os.path.abspath(path))
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"unreadable manifest {path}: {exc}") from exc

        def absp(p):
            return None if p is None else os.path.normpath(os.path.join(base, p))

        records = [
            SampleRecord(
                field_id=r["field_id"],
                phase_path=absp(r["phase_path"]),
                time_index=r.get("time_index"),
                tau_path=absp(r.get("tau_path")),
                map2_path=absp(r.get("map2_path")),
                dapi_path=absp(r.get("dapi_path")),
                well_id=r.get("well_id"),
            )
            for r in doc.get("records", [])
        ]
        return cls(records, dict(doc.get("split", {})), doc.get("seed"))


def _scan_dir(directory):
    """Yield (field, time_index, channel, path) for every TIFF in directory."""
    for name in sorted(os.listdir(directory)):
        if not name.lower().endswith((".tif", ".tiff")):
            continue
        m = _NAME_RE.match(name)
        if m is None:
            raise DataError(f"unparseable filename {name!r} in {directory}")
        t = m.group("t")
        yield (m.group("field"), None if t is None else int(t), m.group("chan"),
               os.path.join(directory, name))


def build_manifest(phase_dir, fluor_dir) -> DatasetManifest:
    """Pair phase and fluorescence files into one record per (field, time).

    Fluorescence files without a matching phase file are rejected
    (dropped); records without any fluorescence are kept and flagged
    inference-only. Duplicate (field, time, channel) claims are an error.
    """
    found = {}  # (field, t) -> {channel: path}
    seen_paths = set()
    for directory in (phase_dir, fluor_dir):
        for fid, t, chan, path in _scan_dir(directory):
            ap = os.path.abspath(path)
            if ap in seen_paths:
                continue  # same dir passed twice
            seen_paths.add(ap)
            chans = found.setdefault((fid, t), {})
            if chan in chans:
                raise DataError(
                    f"duplicate {chan} file for field {fid!r}"
                    + ("" if t is None else f" t{t}"))
            chans[chan] = path

    records = []
    for (fid, t), chans in sorted(found.items(), key=lambda kv: (kv[0][0], kv[0][1] or 0)):
        if "phase" not in chans:
            continue  # fluorescence without phase: rejected
        records.append(SampleRecord(
            field_id=fid,
            time_index=t,
            phase_path=chans["phase"],
            tau_path=chans.get("tau"),
            map2_path=chans.get("map2"),
            dapi_path=chans.get("dapi"),
        ))
    return DatasetManifest(records)


def split_dataset(manifest: DatasetManifest, n_test: int, val_fraction: float,
                  seed: int) -> DatasetManifest:
    """Deterministic by-field split: last n_test of a seeded shuffle go to
    test; floor(val_fraction * remainder) (min 1 when val_fraction > 0 and
    the remainder allows) go to val; the rest train.

    Patches of one field can never straddle splits because assignment is
    keyed by field_id.
    """
    fields = sorted(manifest.field_ids())
    n = len(fields)
    if not 0 <= val_fraction < 1:
        raise ConfigError(f"val_fraction must be in [0, 1), got {val_fraction}")
    if n_test < 0 or n_test >= n:
        raise DataError(f"n_test={n_test} infeasible for {n} fields")

    rng = np.random.default_rng(seed)
    order = [fields[i] for i in rng.permutation(n)]
    test = set(order[n - n_test:]) if n_test else set()
    remainder = order[:n - n_test]
    n_val = int(math.floor(len(remainder) * val_fraction))
    if val_fraction > 0 and len(remainder) >= 2:
        n_val = max(1, n_val)
    val = set(remainder[:n_val])

    split = {}
    for fid in fields:
        split[fid] = "test" if fid in test else ("val" if fid in val else "train")
    return DatasetManifest(list(manifest.records), split, seed)


def load_pair(record: SampleRecord, channel: str):
    """Load (phase, target) rasters for a record's fluorescence channel."""
    target_path = record.channel_path(channel)
    if target_path is None:
        raise DataError(f"record {record.field_id!r} has no {channel} ground truth")
    return load_raster(record.phase_path), load_raster(target_path)


# ---------------------------------------------------------------------------
# Synthetic neuron phantom
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PhantomConfig:
    size: int = 256
    n_cells: int = 3
    axon_width_px: int = 2
    dendrite_width_px: int = 5
    soma_radius_px: int = 12
    phase_scale_rad: float = 1.5
    noise_sigma: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if self.axon_width_px < 1 or self.dendrite_width_px < 1:
            raise ConfigError("branch widths must be >= 1 px")
        if self.axon_width_px >= self.dendrite_width_px:
            raise ConfigError("axon must be thinner than dendrites (the width cue)")
        if self.size < 4 * self.soma_radius_px:
            raise ConfigError("size too small for the configured soma radius")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")


@dataclass(frozen=True)
class PhantomSample:
    phase: RasterImage
    tau: RasterImage
    map2: RasterImage
    dapi: RasterImage


@dataclass(frozen=True)
class _Cell:
    center: np.ndarray           # (row, col)
    axon: np.ndarray             # (L, 2) walk points
    dendrites: tuple             # of (L, 2) walk points


def _random_walk(rng, start, heading, n_steps, angle_sigma, size):
    pts = np.empty((n_steps, 2))
    pos = np.array(start, dtype=float)
    ang = heading
    for i in range(n_steps):
        ang += rng.normal(0.0, angle_sigma)
        pos = pos + np.array([math.sin(ang), math.cos(ang)])
        pos = np.clip(pos, 1.0, size - 2.0)
        pts[i] = pos
    return pts


def _gen_cells(cfg: PhantomConfig, rng) -> list:
    margin = cfg.soma_radius_px + 4
    cells = []
    for _ in range(cfg.n_cells):
        center = rng.uniform(margin, cfg.size - margin, size=2)
        angles = rng.uniform(0.0, 2 * math.pi, size=1 + int(rng.integers(2, 5)))
        rim = cfg.soma_radius_px

        def start(a):
            return center + rim * np.array([math.sin(a), math.cos(a)])

        axon = _random_walk(rng, start(angles[0]), angles[0],
                            n_steps=int(cfg.size * 0.7), angle_sigma=0.08, size=cfg.size)
        dendrites = tuple(
            _random_walk(rng, start(a), a, n_steps=int(cfg.size * 0.35),
                         angle_sigma=0.22, size=cfg.size)
            for a in angles[1:]
        )
        cells.append(_Cell(center, axon, dendrites))
    return cells


def _rasterize_walks(walks, width_px, size, fraction=1.0):
    """Stamp walk-point prefixes onto a grid, then give them a Gaussian
    cross-section of the requested width."""
    grid = np.zeros((size, size))
    for pts in walks:
        n = max(2, int(round(len(pts) * fraction)))
        idx = np.rint(pts[:n]).astype(int)
        np.add.at(grid, (idx[:, 0], idx[:, 1]), 1.0)
    sigma = max(width_px / 2.0, 0.5)
    out = gaussian_filter(grid, sigma)
    out *= sigma * math.sqrt(2 * math.pi)  # unit ridge height for a 1px-spaced line
    return np.clip(out, 0.0, 1.0)


def _disk_field(centers, radius, size):
    out = np.zeros((size, size))
    if radius <= 0:
        return out
    rows = np.arange(size)[:, None]
    cols = np.arange(size)[None, :]
    for cy, cx in centers:
        d = np.hypot(rows - cy, cols - cx)
        np.maximum(out, np.clip(radius + 0.5 - d, 0.0, 1.0), out=out)
    return out


def _render(cfg: PhantomConfig, cells, rng_noise, branch_fraction=1.0) -> PhantomSample:
    centers = [c.center for c in cells]
    soma = _disk_field(centers, cfg.soma_radius_px, cfg.size)
    nucleus = _disk_field(centers, 0.45 * cfg.soma_radius_px, cfg.size)
    axon = _rasterize_walks([c.axon for c in cells], cfg.axon_width_px,
                            cfg.size, branch_fraction)
    dend = _rasterize_walks([d for c in cells for d in c.dendrites],
                            cfg.dendrite_width_px, cfg.size, branch_fraction)

    tau = np.maximum.reduce([soma, dend, axon])
    map2 = np.maximum(soma, dend)
    density = 1.0 * soma + 0.7 * dend + 0.35 * axon + 0.4 * nucleus
    phase = density * cfg.phase_scale_rad
    if cfg.noise_sigma > 0:
        phase = phase + rng_noise.normal(0.0, cfg.noise_sigma, phase.shape)

    return PhantomSample(
        phase=RasterImage(phase, units_tag="radians"),
        tau=RasterImage(tau, units_tag="intensity_au"),
        map2=RasterImage(map2, units_tag="intensity_au"),
        dapi=RasterImage(nucleus, units_tag="intensity_au"),
    )


def synth_phantom(cfg: PhantomConfig) -> PhantomSample:
    """One synthetic field; bit-identical for a fixed cfg.seed.

    Every MAP2-positive pixel is Tau-positive by construction, and DAPI
    support sits inside the soma mask.
    """
    rng = np.random.default_rng(cfg.seed)
    cells = _gen_cells(cfg, rng)
    return _render(cfg, cells, rng)


def synth_timelapse(cfg: PhantomConfig, n_frames: int, grow_from: float = 0.35):
    """Frames with fixed somas/nuclei and branches growing from a prefix
    fraction ``grow_from`` of each walk to its full length."""
    if n_frames < 1:
        raise ConfigError(f"n_frames must be >= 1, got {n_frames}")
    rng = np.random.default_rng(cfg.seed)
    cells = _gen_cells(cfg, rng)
    frames = []
    for t in range(n_frames):
        f = 1.0 if n_frames == 1 else grow_from + (1.0 - grow_from) * t / (n_frames - 1)
        frames.append(_render(cfg, cells, rng, branch_fraction=f))
    return frames


def write_phantom_dataset(out_dir, cfg: PhantomConfig, n_fields: int,
                          n_test: int = 0, val_fraction: float = 0.0,
                          frames: int = 1, grow_from: float = 0.35,
                          threads: int = 1) -> DatasetManifest:
    """Render ``n_fields`` phantoms (seed + index each), write TIFFs plus a
    split manifest.json, and return the manifest."""
    os.makedirs(out_dir, exist_ok=True)
    width = max(3, len(str(max(n_fields - 1, 0))))

    def render_field(i):
        sub = replace(cfg, seed=cfg.seed + i)
        if frames == 1:
            return [synth_phantom(sub)]
        return synth_timelapse(sub, frames, grow_from)

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rendered = list(pool.map(render_field, range(n_fields)))
    else:
        rendered = [render_field(i) for i in range(n_fields)]

    records = []
    for i, samples in enumerate(rendered):
        fid = f"f{i:0{width}d}"
        for t, sample in enumerate(samples):
            tpart = "" if frames == 1 else f"_t{t}"
            paths = {}
            for chan in CHANNELS:
                p = os.path.join(out_dir, f"{fid}{tpart}_{chan}.tif")
                save_raster(getattr(sample, chan), p)
                paths[chan] = p
            records.append(SampleRecord(
                field_id=fid,
                time_index=None if frames == 1 else t,
                phase_path=paths["phase"],
                tau_path=paths["tau"],
                map2_path=paths["map2"],
                dapi_path=paths["dapi"],
            ))

    manifest = DatasetManifest(records)
    if n_test or val_fraction:
        manifest = split_dataset(manifest, n_test, val_fraction, cfg.seed)
    else:
        manifest = DatasetManifest(records, {fid: "train" for fid in manifest.field_ids()},
                                   cfg.seed)
    manifest.save(os.path.join(out_dir, "manifest.json"))
    return manifest
