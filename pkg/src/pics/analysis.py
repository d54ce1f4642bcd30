"""Growth quantification from segmented time-lapse sequences: per-class
confluence and dry mass, normalized to the early-window average, with
CSV and SVG report emission.

Dry mass uses m = (lambda / (2 pi gamma)) * sum(phi) * pixel_area with
lambda in um, gamma in um^3/pg (0.2 mL/g equals 0.2 um^3/pg), pixel
area in um^2, giving picograms. Negative-phase pixels contribute
negatively; they are reported, not clipped.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .imagecore import Mask, RasterImage
from .infer import TimelapseSequence
from .seg import SegmentationMap

# reported classes: the three single-class masks plus the neurite union
REPORT_CLASSES = ("axon", "dendrite_soma", "nucleus", "neurites")

CSV_COLUMNS = ("field_id", "well_id", "time_hours", "class", "confluence",
               "dry_mass_pg", "dry_mass_norm")


@dataclass(frozen=True)
class Optics:
    wavelength_um: float
    refractive_increment_ml_per_g: float
    pixel_area_um2: float

    def __post_init__(self):
        if min(self.wavelength_um, self.refractive_increment_ml_per_g,
               self.pixel_area_um2) <= 0:
            raise ConfigError("optics constants must all be > 0")


@dataclass(frozen=True)
class GrowthPoint:
    time_hours: float
    class_name: str
    confluence: float
    dry_mass_pg: float
    dry_mass_norm: float


@dataclass(frozen=True)
class GrowthSeries:
    field_id: str
    well_id: str
    points: tuple
    normalization_window_hours: float
    optics: Optics


def confluence(seg: SegmentationMap, classes) -> float:
    """Fraction of pixels in any of the listed classes."""
    classes = set(classes)
    unknown = classes - set(seg.legend)
    if unknown:
        raise DataError(f"unknown classes {sorted(unknown)}; legend is {seg.legend}")
    idx = [seg.legend.index(c) for c in classes]
    return float(np.isin(seg.classes, idx).mean()) if idx else 0.0


def dry_mass(phase: RasterImage, mask: Mask, optics: Optics) -> float:
    """Picograms of dry mass under the mask; linear in phase."""
    if phase.units_tag != "radians":
        raise DataError(f"dry mass needs phase in radians, got "
                        f"units_tag {phase.units_tag!r}")
    if phase.pixels.shape != mask.bits.shape:
        raise ShapeError(f"phase {phase.pixels.shape} vs mask {mask.bits.shape}")
    total_phase = float(phase.pixels[mask.bits].sum())
    scale = optics.wavelength_um / (2.0 * math.pi
                                    * optics.refractive_increment_ml_per_g)
    return scale * total_phase * optics.pixel_area_um2


def _class_mask(seg: SegmentationMap, class_name: str) -> Mask:
    if class_name == "neurites":
        return Mask(seg.class_mask("axon").bits
                    | seg.class_mask("dendrite_soma").bits)
    return seg.class_mask(class_name)


def growth_series(seq: TimelapseSequence, segs, optics: Optics,
                  window_hours: float = 5.0) -> GrowthSeries:
    """Per-class confluence and dry mass over time, mass normalized by
    the mean over frames with t <= window_hours (closed interval)."""
    if len(segs) != len(seq.frames):
        raise DataError(f"{len(segs)} segmentations for {len(seq.frames)} frames")
    if window_hours <= 0:
        raise ConfigError(f"window_hours must be > 0, got {window_hours}")
    times = [t for t, _ in seq.frames]
    in_window = [i for i, t in enumerate(times) if t <= window_hours]
    if not in_window:
        raise DataError(f"no frames at t <= {window_hours} h; first frame "
                        f"is at {times[0]} h")

    points = []
    for class_name in REPORT_CLASSES:
        masses = []
        confs = []
        for (t, phase), seg in zip(seq.frames, segs):
            if seg.classes.shape != phase.pixels.shape:
                raise ShapeError(f"seg dims {seg.classes.shape} vs frame "
                                 f"dims {phase.pixels.shape} at t={t}")
            mask = _class_mask(seg, class_name)
            masses.append(dry_mass(phase, mask, optics))
            confs.append(float(mask.bits.mean()))
        ref = float(np.mean([masses[i] for i in in_window]))
        for t, m, c in zip(times, masses, confs):
            norm = m / ref if ref != 0.0 else math.nan
            points.append(GrowthPoint(t, class_name, c, m, norm))
    return GrowthSeries(seq.field_id, seq.well_id, tuple(points),
                        window_hours, optics)


# ---------------------------------------------------------------------------
# Report emission
# ---------------------------------------------------------------------------

def _check_same_optics(series):
    optics = series[0].optics
    for s in series[1:]:
        if s.optics != optics:
            raise DataError("series disagree on optics constants")
    return optics


def emit_report(series, out_dir) -> list:
    """Write growth.csv plus SVG plots; returns the created paths.

    The CSV echoes the optics constants and normalization window as
    comment lines, then one row per (field, class, time). Floats are
    written with repr so a parse-back reproduces them exactly.
    """
    if not series:
        raise DataError("emit_report needs at least one series")
    optics = _check_same_optics(series)
    os.makedirs(out_dir, exist_ok=True)
    paths = []

    csv_path = os.path.join(out_dir, "growth.csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# wavelength_um={optics.wavelength_um!r}\n")
        fh.write("# refractive_increment_ml_per_g="
                 f"{optics.refractive_increment_ml_per_g!r}\n")
        fh.write(f"# pixel_area_um2={optics.pixel_area_um2!r}\n")
        fh.write("# normalization_window_hours="
                 f"{series[0].normalization_window_hours!r}\n")
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for s in series:
            for p in s.points:
                writer.writerow([s.field_id, s.well_id, repr(p.time_hours),
                                 p.class_name, repr(p.confluence),
                                 repr(p.dry_mass_pg), repr(p.dry_mass_norm)])
    paths.append(csv_path)

    wells = sorted({s.well_id for s in series})
    cmap = plt.get_cmap("tab10")
    well_color = {w: cmap(i % 10) for i, w in enumerate(wells)}

    def by_class(s, cname):
        pts = [p for p in s.points if p.class_name == cname]
        return ([p.time_hours for p in pts], pts)

    fig, ax = plt.subplots(figsize=(6, 4))
    seen = set()
    for s in series:
        times, pts = by_class(s, "neurites")
        label = s.well_id if s.well_id not in seen else None
        seen.add(s.well_id)
        ax.plot(times, [p.confluence for p in pts],
                color=well_color[s.well_id], label=label)
    ax.set_xlabel("time (h)")
    ax.set_ylabel("confluence (neurites)")
    ax.legend(title="well")
    conf_path = os.path.join(out_dir, "confluence.svg")
    fig.savefig(conf_path)
    plt.close(fig)
    paths.append(conf_path)

    fig, axes = plt.subplots(2, 2, figsize=(9, 7), sharex=True)
    for ax, cname in zip(axes.ravel(), REPORT_CLASSES):
        for s in series:
            times, pts = by_class(s, cname)
            ax.plot(times, [p.dry_mass_norm for p in pts],
                    color=well_color[s.well_id])
        ax.set_title(cname)
        ax.set_xlabel("time (h)")
        ax.set_ylabel("dry mass (norm.)")
    fig.tight_layout()
    mass_path = os.path.join(out_dir, "dry_mass_norm.svg")
    fig.savefig(mass_path)
    plt.close(fig)
    paths.append(mass_path)

    fig, ax = plt.subplots(figsize=(5, 5))
    for s in series:
        _, npts = by_class(s, "neurites")
        _, kpts = by_class(s, "nucleus")
        ax.scatter([p.dry_mass_norm for p in kpts],
                   [p.dry_mass_norm for p in npts],
                   color=well_color[s.well_id], s=18)
    ax.set_xlabel("nucleus dry mass (norm.)")
    ax.set_ylabel("neurite dry mass (norm.)")
    scatter_path = os.path.join(out_dir, "neurite_vs_nucleus.svg")
    fig.savefig(scatter_path)
    plt.close(fig)
    paths.append(scatter_path)
    return paths


def read_report_csv(path):
    """Parse growth.csv back into row dicts; floats round-trip exactly."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        data_lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(data_lines)
    header = tuple(next(reader))
    if header != CSV_COLUMNS:
        raise DataError(f"unexpected report columns {header}")
    for row in reader:
        rows.append({
            "field_id": row[0],
            "well_id": row[1],
            "time_hours": float(row[2]),
            "class": row[3],
            "confluence": float(row[4]),
            "dry_mass_pg": float(row[5]),
            "dry_mass_norm": float(row[6]),
        })
    return rows
