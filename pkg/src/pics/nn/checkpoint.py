"""Checkpoint file format.

Layout: 8-byte magic ``PICSCKPT``, a little-endian uint64 header length,
a UTF-8 JSON header, then concatenated little-endian float32 tensor
blobs. The header holds the UNetConfig, normalization statistics,
training metadata, and a tensor directory of (name, shape, offset, kind)
with byte offsets into the blob section. The loader re-derives the
expected shapes from the config and refuses mismatches.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from ..errors import CheckpointError
from .unet import ModelParams, UNetConfig, layer_specs

MAGIC = b"PICSCKPT"


@dataclass
class ModelCheckpoint:
    net_cfg: UNetConfig
    model: ModelParams
    input_mean: float = 0.0
    input_std: float = 1.0
    meta: dict = field(default_factory=dict)


def _expected_shapes(cfg: UNetConfig):
    exp = {}
    for kind, name, shape in layer_specs(cfg):
        if kind == "conv":
            exp[("param", f"{name}.w")] = tuple(shape)
            exp[("param", f"{name}.b")] = (shape[0],)
        else:
            for p in ("gamma", "beta"):
                exp[("param", f"{name}.{p}")] = (shape,)
            for s in ("mean", "var"):
                exp[("stat", f"{name}.{s}")] = (shape,)
    return exp


def save_checkpoint(ckpt: ModelCheckpoint, path) -> None:
    directory = []
    blobs = []
    offset = 0
    for kind, table in (("param", ckpt.model.params), ("stat", ckpt.model.stats)):
        for name in sorted(table):
            arr = np.ascontiguousarray(table[name], dtype="<f4")
            directory.append({"name": name, "kind": kind,
                              "shape": list(arr.shape), "offset": offset})
            blobs.append(arr.tobytes())
            offset += arr.nbytes
    header = {
        "format": 1,
        "net_cfg": ckpt.net_cfg.to_dict(),
        "input_mean": ckpt.input_mean,
        "input_std": ckpt.input_std,
        "meta": ckpt.meta,
        "tensors": directory,
    }
    hbytes = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.uint64(len(hbytes)).tobytes())
        fh.write(hbytes)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> ModelCheckpoint:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    hlen = int(np.frombuffer(raw[8:16], dtype="<u8")[0])
    if 16 + hlen > len(raw):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
        cfg = UNetConfig(**header["net_cfg"])
    except (json.JSONDecodeError, UnicodeDecodeError, TypeError, KeyError) as exc:
        raise CheckpointError(f"{path}: malformed header ({exc})") from exc

    expected = _expected_shapes(cfg)
    blob = raw[16 + hlen:]
    model = ModelParams()
    seen = set()
    for ent in header.get("tensors", []):
        key = (ent["kind"], ent["name"])
        shape = tuple(ent["shape"])
        if key not in expected:
            raise CheckpointError(f"{path}: unexpected tensor {ent['name']!r}")
        if expected[key] != shape:
            raise CheckpointError(
                f"{path}: tensor {ent['name']!r} shape {shape} != config {expected[key]}")
        count = int(np.prod(shape)) if shape else 1
        start = ent["offset"]
        end = start + 4 * count
        if end > len(blob):
            raise CheckpointError(f"{path}: blob truncated at {ent['name']!r}")
        arr = np.frombuffer(blob[start:end], dtype="<f4").astype(np.float64)
        arr = arr.reshape(shape)
        (model.params if ent["kind"] == "param" else model.stats)[ent["name"]] = arr
        seen.add(key)
    missing = set(expected) - seen
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)[:4]}")
    return ModelCheckpoint(cfg, model, header.get("input_mean", 0.0),
                           header.get("input_std", 1.0), header.get("meta", {}))
