"""Command line entry point: reconstruct, preprocess, synth, train,
infer, segment, and analyze subcommands over the library.

Conventions shared by every stage: flags override JSON config-file
values, unknown config keys are rejected, a JSON run-record (inputs,
resolved config, config hash, outputs, wall time) is written next to
the output on success, and errors print one machine-parseable line
`ERROR <stage>: <message>` with exit code 1 for validation failures or
2 for internal faults.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import re
import sys
import time

from . import CONFIG_SCHEMA_VERSION, __version__
from .errors import ConfigError, DataError, PicsError

STAGES = ("reconstruct", "preprocess", "synth", "train", "infer",
          "segment", "analyze")

_REQUIRED = object()  # sentinel for config keys that must be supplied


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so main() owns exit codes."""

    def error(self, message):
        raise ConfigError(message)


def _sha256_json(doc) -> str:
    blob = json.dumps(doc, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def _resolve_config(ns, defaults: dict, stage: str) -> dict:
    """defaults <- config file <- explicit flags; strict key checking."""
    cfg = dict(defaults)
    if getattr(ns, "config", None):
        try:
            with open(ns.config, encoding="utf-8") as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"unreadable config {ns.config}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"config {ns.config} must be a JSON object")
        unknown = sorted(set(doc) - set(defaults))
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}; "
                              f"valid keys: {sorted(defaults)}")
        cfg.update(doc)
    for key in defaults:
        val = getattr(ns, key, None)
        if val is not None:
            cfg[key] = val
    missing = sorted(k for k, v in cfg.items() if v is _REQUIRED)
    if missing:
        flags = ", ".join("--" + k.replace("_", "-") for k in missing)
        raise ConfigError(f"missing required arguments: {flags}")
    return cfg


def _write_run_record(stage: str, cfg: dict, inputs: list, outputs: list,
                      out_path: str, seconds: float) -> None:
    record = {
        "stage": stage,
        "schema_version": CONFIG_SCHEMA_VERSION,
        "pics_version": __version__,
        "config": cfg,
        "config_sha256": _sha256_json(cfg),
        "inputs": inputs,
        "outputs": outputs,
        "seconds": seconds,
    }
    if os.path.isdir(out_path):
        rec_path = os.path.join(out_path, "run_record.json")
    else:
        rec_path = f"{out_path}.run.json"
    with open(rec_path, "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=1, default=str)


# ---------------------------------------------------------------------------
# Stage handlers: each takes the resolved config dict, returns
# (inputs, outputs, out_path_for_record)
# ---------------------------------------------------------------------------

_FRAME_RE = re.compile(r"_(\d)\.tiff?$")


def _cmd_reconstruct(cfg, threads):
    from .imagecore import load_raster, save_raster
    from .qpi import InterferogramStack, IntegrationConfig, reconstruct_phase

    frame_paths = {}
    for name in sorted(os.listdir(cfg["frames"])):
        m = _FRAME_RE.search(name)
        if m and name.lower().endswith((".tif", ".tiff")):
            frame_paths[int(m.group(1))] = os.path.join(cfg["frames"], name)
    if sorted(frame_paths) != [0, 1, 2, 3]:
        raise DataError(f"need exactly frames suffixed _0.._3 in "
                        f"{cfg['frames']}, found suffixes {sorted(frame_paths)}")
    frames = tuple(load_raster(frame_paths[i]) for i in range(4))
    stack = InterferogramStack(frames, shift_step_rad=cfg["step"],
                               shear_axis=cfg["shear_axis"],
                               shear_px=cfg["shear_px"])
    phase = reconstruct_phase(stack, IntegrationConfig(cfg["eps"]))
    save_raster(phase, cfg["out"])
    return [frame_paths[i] for i in range(4)], [cfg["out"]], cfg["out"]


def _cmd_preprocess(cfg, threads):
    from .data import CHANNELS, DatasetManifest, SampleRecord
    from .imagecore import load_raster, save_raster
    from .prep import (ZStack, apply_shift_and_crop, estimate_background,
                       register_translation, select_focus, subtract_background)

    manifest = DatasetManifest.load(cfg["manifest"])
    if not manifest.records:
        raise DataError(f"manifest {cfg['manifest']} has no records")
    os.makedirs(cfg["out"], exist_ok=True)

    phases = [load_raster(r.phase_path) for r in manifest.records]
    bg = estimate_background(phases, cfg["outlier_k"])
    report = {
        "energies": list(bg.energy_values),
        "excluded_indices": list(bg.excluded_indices),
        "outlier_k": cfg["outlier_k"],
        "crop_total": cfg["crop_total"],
        "fields": {},
    }

    out_records = []
    outputs = []
    for rec, phase in zip(manifest.records, phases):
        corrected = subtract_background(phase, bg)
        focus = select_focus(ZStack((corrected,)), cfg["levels"])
        fluor = {c: load_raster(p) for c in CHANNELS[1:]
                 if (p := rec.channel_path(c)) is not None}
        shift = None
        for chan in ("tau", "map2", "dapi"):
            img = fluor.get(chan)
            if img is not None and img.pixels.min() != img.pixels.max():
                shift = register_translation(corrected, img)
                break
        aligned = {}
        phase_out = corrected
        for chan, img in fluor.items():
            if shift is not None:
                phase_out, aligned[chan] = apply_shift_and_crop(
                    corrected, img, shift, cfg["crop_total"])
            else:
                aligned[chan] = img
        if not fluor and cfg["crop_total"]:
            from .imagecore import crop_center
            phase_out = crop_center(
                corrected, corrected.height - cfg["crop_total"],
                corrected.width - cfg["crop_total"])

        tpart = "" if rec.time_index is None else f"_t{rec.time_index}"
        paths = {}
        for chan, img in [("phase", phase_out)] + list(aligned.items()):
            p = os.path.join(cfg["out"], f"{rec.field_id}{tpart}_{chan}.tif")
            save_raster(img, p)
            paths[chan] = p
            outputs.append(p)
        out_records.append(SampleRecord(
            field_id=rec.field_id, phase_path=paths["phase"],
            time_index=rec.time_index, tau_path=paths.get("tau"),
            map2_path=paths.get("map2"), dapi_path=paths.get("dapi"),
            well_id=rec.well_id))
        report["fields"][rec.field_id + tpart] = {
            "focus_index": focus,
            "shift": None if shift is None else
                     {"dy": shift.dy, "dx": shift.dx,
                      "peak_correlation": shift.peak_correlation},
        }

    out_manifest = DatasetManifest(out_records, dict(manifest.split),
                                   manifest.seed)
    man_path = os.path.join(cfg["out"], "manifest.json")
    out_manifest.save(man_path)
    outputs.append(man_path)
    report_path = os.path.join(cfg["out"], "preprocess_report.json")
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=1)
    outputs.append(report_path)
    return [cfg["manifest"]], outputs, cfg["out"]


def _cmd_synth(cfg, threads):
    from .data import PhantomConfig, write_phantom_dataset

    phantom = PhantomConfig(
        size=cfg["size"], n_cells=cfg["n_cells"],
        axon_width_px=cfg["axon_width_px"],
        dendrite_width_px=cfg["dendrite_width_px"],
        soma_radius_px=cfg["soma_radius_px"],
        phase_scale_rad=cfg["phase_scale_rad"],
        noise_sigma=cfg["noise_sigma"], seed=cfg["seed"])
    manifest = write_phantom_dataset(
        cfg["out"], phantom, cfg["n"], n_test=cfg["n_test"],
        val_fraction=cfg["val_fraction"], frames=cfg["frames"],
        threads=threads)
    outputs = [r.phase_path for r in manifest.records]
    return [], outputs, cfg["out"]


_LOSS_BY_FLAG = {"l1": "l1", "l1+pearson": "l1_pearson", "l1+gan": "l1_gan"}


def _cmd_train(cfg, threads):
    from .data import DatasetManifest
    from .losses import DiscConfig, LossConfig
    from .nn import UNetConfig
    from .train import TrainConfig, train_model

    if cfg["loss"] not in _LOSS_BY_FLAG:
        raise ConfigError(f"--loss must be one of {sorted(_LOSS_BY_FLAG)}, "
                          f"got {cfg['loss']!r}")
    manifest = DatasetManifest.load(cfg["manifest"])
    net_cfg = UNetConfig(depth=cfg["depth"], base_channels=cfg["base_channels"])
    train_cfg = TrainConfig(
        epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"],
        seed=cfg["seed"], normalize_inputs=not cfg["no_normalize"],
        loss=LossConfig(kind=_LOSS_BY_FLAG[cfg["loss"]],
                        pearson_weight=cfg["pearson_weight"],
                        gan_weight=cfg["gan_weight"]),
        disc=DiscConfig(base_channels=cfg["disc_base_channels"]))
    ckpt, history = train_model(manifest, cfg["channel"], net_cfg, train_cfg,
                                out_path=cfg["out"])
    hist_path = f"{cfg['out']}.history.csv"
    history.save_csv(hist_path)
    return [cfg["manifest"]], [cfg["out"], hist_path], cfg["out"]


def _cmd_infer(cfg, threads):
    from .imagecore import load_raster, save_raster
    from .infer import load_sequence, predict, predict_timelapse, save_overlay
    from .nn.checkpoint import load_checkpoint

    ck_tau = load_checkpoint(cfg["ckpt"])
    ck_map2 = load_checkpoint(cfg["ckpt2"]) if cfg["ckpt2"] else None
    ck_dapi = load_checkpoint(cfg["ckpt_dapi"]) if cfg["ckpt_dapi"] else None
    os.makedirs(cfg["out"], exist_ok=True)
    outputs = []

    def stain_name(ck, fallback):
        return ck.meta.get("channel", fallback)

    if os.path.isdir(cfg["in_path"]):
        seq = load_sequence(cfg["in_path"], cfg["hours_per_frame"])
        if ck_map2 is None:
            raise ConfigError("timelapse inference needs --ckpt2 (MAP2 "
                              "checkpoint) alongside --ckpt")
        frames = predict_timelapse(ck_tau, ck_map2, seq, ck_dapi)
        for k, fp in enumerate(frames):
            base = os.path.join(cfg["out"], f"{seq.field_id}_t{k}")
            pairs = [("tau", fp.tau), ("map2", fp.map2)]
            if fp.dapi is not None:
                pairs.append(("dapi", fp.dapi))
            for chan, img in pairs:
                p = f"{base}_pred_{chan}.tif"
                save_raster(img, p)
                outputs.append(p)
            if cfg["overlay"]:
                p = f"{base}_overlay.tif"
                save_overlay(fp.overlay, p)
                outputs.append(p)
    else:
        phase = load_raster(cfg["in_path"])
        stem = os.path.splitext(os.path.basename(cfg["in_path"]))[0]
        for ck, fallback in ((ck_tau, "tau"), (ck_map2, "map2"),
                             (ck_dapi, "dapi")):
            if ck is None:
                continue
            stain = predict(ck, phase)
            p = os.path.join(cfg["out"],
                             f"{stem}_pred_{stain_name(ck, fallback)}.tif")
            save_raster(stain, p)
            outputs.append(p)
    return [cfg["in_path"]], outputs, cfg["out"]


def _cmd_segment(cfg, threads):
    from .imagecore import Mask, RasterImage, load_raster
    from .seg import compose_segmentation, save_segmentation, threshold_stain

    tau = load_raster(cfg["tau"])
    map2 = load_raster(cfg["map2"])
    masks = {}
    thresholds = {"method": cfg["method"], "smoothing_sigma": cfg["sigma"]}
    for name, img in (("tau", tau), ("map2", map2)):
        masks[name], thresholds[name] = threshold_stain(
            img, cfg["method"], cfg["sigma"], cfg["threshold"])
    if cfg["dapi"]:
        dapi = load_raster(cfg["dapi"])
        masks["dapi"], thresholds["dapi"] = threshold_stain(
            dapi, cfg["method"], cfg["sigma"], cfg["threshold"])
    else:
        import numpy as np
        masks["dapi"] = Mask(np.zeros(tau.pixels.shape, dtype=bool))
    seg = compose_segmentation(masks["tau"], masks["map2"], masks["dapi"],
                               thresholds)
    save_segmentation(seg, cfg["out"])
    inputs = [cfg["tau"], cfg["map2"]] + ([cfg["dapi"]] if cfg["dapi"] else [])
    return inputs, [cfg["out"], f"{cfg['out']}.json"], cfg["out"]


def _cmd_analyze(cfg, threads):
    from .analysis import Optics, emit_report, growth_series
    from .infer import load_sequence
    from .seg import load_segmentation

    seq = load_sequence(cfg["seq"], cfg["hours_per_frame"], cfg["well"])
    segs = []
    for k in range(len(seq.frames)):
        p = os.path.join(cfg["segs"], f"{seq.field_id}_t{k}_seg.tif")
        if not os.path.exists(p):
            raise DataError(f"missing segmentation {p} for frame {k}")
        segs.append(load_segmentation(p))
    optics = Optics(cfg["lambda_um"], cfg["gamma"], cfg["pixel_area_um2"])
    series = growth_series(seq, segs, optics, cfg["window_h"])
    paths = emit_report([series], cfg["out"])
    return [cfg["seq"], cfg["segs"]], paths, cfg["out"]


# ---------------------------------------------------------------------------
# Argument wiring
# ---------------------------------------------------------------------------

_STAGE_DEFAULTS = {
    "reconstruct": {
        "frames": _REQUIRED, "out": _REQUIRED, "step": math.pi / 2,
        "shear_px": 1, "shear_axis": "x", "eps": 1e-3,
    },
    "preprocess": {
        "manifest": _REQUIRED, "out": _REQUIRED, "outlier_k": 3.0,
        "crop_total": 64, "levels": 1,
    },
    "synth": {
        "out": _REQUIRED, "n": 4, "size": 256, "seed": 0, "frames": 1,
        "n_test": 0, "val_fraction": 0.0, "n_cells": 3, "axon_width_px": 2,
        "dendrite_width_px": 5, "soma_radius_px": 12, "phase_scale_rad": 1.5,
        "noise_sigma": 0.15,
    },
    "train": {
        "manifest": _REQUIRED, "channel": _REQUIRED, "out": _REQUIRED,
        "epochs": _REQUIRED, "loss": "l1+pearson", "pearson_weight": 0.2,
        "gan_weight": 0.01, "batch_size": 1, "lr": 1e-4, "seed": 0,
        "depth": 4, "base_channels": 16, "disc_base_channels": 64,
        "no_normalize": False,
    },
    "infer": {
        "ckpt": _REQUIRED, "in_path": _REQUIRED, "out": _REQUIRED,
        "ckpt2": "", "ckpt_dapi": "", "overlay": False,
        "hours_per_frame": 1.0,
    },
    "segment": {
        "tau": _REQUIRED, "map2": _REQUIRED, "out": _REQUIRED, "dapi": "",
        "method": "otsu", "sigma": 1.0, "threshold": 0.0,
    },
    "analyze": {
        "seq": _REQUIRED, "segs": _REQUIRED, "out": _REQUIRED,
        "lambda_um": 0.55, "gamma": 0.2, "pixel_area_um2": 0.1,
        "window_h": 5.0, "well": "w0", "hours_per_frame": 1.0,
    },
}

_HANDLERS = {
    "reconstruct": _cmd_reconstruct,
    "preprocess": _cmd_preprocess,
    "synth": _cmd_synth,
    "train": _cmd_train,
    "infer": _cmd_infer,
    "segment": _cmd_segment,
    "analyze": _cmd_analyze,
}


def _build_parser() -> _Parser:
    parser = _Parser(prog="pics", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="store_true",
                        help="print version and config-schema version")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker pool size (default: CPU count)")
    sub = parser.add_subparsers(dest="stage")

    required_types = {("train", "epochs"): int}
    for stage, defaults in _STAGE_DEFAULTS.items():
        sp = sub.add_parser(stage, add_help=True)
        sp.add_argument("--config", default=None,
                        help="JSON config file; flags override its values")
        for key, default in defaults.items():
            flag = "--in" if key == "in_path" else "--" + key.replace("_", "-")
            if isinstance(default, bool):
                sp.add_argument(flag, dest=key, action="store_const",
                                const=True, default=None)
                continue
            if default is _REQUIRED:
                typ = required_types.get((stage, key), str)
            else:
                typ = type(default)
            sp.add_argument(flag, dest=key, type=typ, default=None)
    return parser


def run(argv) -> int:
    """Dispatch one CLI invocation; returns the exit code."""
    if argv and not argv[0].startswith("-") and argv[0] not in STAGES:
        raise ConfigError(f"unknown subcommand {argv[0]!r}; "
                          f"expected one of {', '.join(STAGES)}")
    ns = _build_parser().parse_args(argv)
    if ns.version:
        print(f"pics {__version__} (config schema {CONFIG_SCHEMA_VERSION})")
        return 0
    if ns.stage is None:
        raise ConfigError(f"no subcommand; expected one of {', '.join(STAGES)}")
    threads = ns.threads if ns.threads is not None else (os.cpu_count() or 1)
    if threads < 1:
        raise ConfigError(f"--threads must be >= 1, got {threads}")
    cfg = _resolve_config(ns, _STAGE_DEFAULTS[ns.stage], ns.stage)
    t0 = time.perf_counter()
    inputs, outputs, record_anchor = _HANDLERS[ns.stage](cfg, threads)
    _write_run_record(ns.stage, cfg, inputs, outputs, record_anchor,
                      time.perf_counter() - t0)
    return 0


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    stage = argv[0] if argv and argv[0] in STAGES else "cli"
    try:
        return run(argv)
    except PicsError as exc:
        print(f"ERROR {stage}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # internal fault, distinct exit code
        print(f"ERROR {stage}: internal: {exc!r}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
