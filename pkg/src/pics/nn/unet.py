"""The modified U-Net: encoder/decoder with skip concatenations, batch
normalization in every block, and a direct input-to-output add connection.

Topology per encoder level: [conv3x3 -> BN -> ReLU] x2 followed by 2x2
max-pool; the decoder mirrors it with nearest-neighbor upsample -> conv
-> BN -> ReLU, concatenation of the matching encoder features, and the
double-conv block. A final 1x1 conv (zero-initialized) maps to
out_channels, and the single-channel input is broadcast-added to the
output, so the freshly built network is exactly the identity map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, ShapeError
from . import layers as L


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 4
    base_channels: int = 16
    in_channels: int = 1
    out_channels: int = 1
    use_batchnorm: bool = True
    global_add: bool = True
    up_mode: str = "nearest_conv"

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if min(self.base_channels, self.in_channels, self.out_channels) < 1:
            raise ConfigError("channel counts must be >= 1")
        if self.global_add and self.in_channels != 1:
            raise ConfigError("global_add requires in_channels == 1 (broadcast add)")
        if self.up_mode != "nearest_conv":
            raise ConfigError(f"unsupported up_mode {self.up_mode!r}")

    def to_dict(self) -> dict:
        return {
            "depth": self.depth, "base_channels": self.base_channels,
            "in_channels": self.in_channels, "out_channels": self.out_channels,
            "use_batchnorm": self.use_batchnorm, "global_add": self.global_add,
            "up_mode": self.up_mode,
        }


@dataclass
class ModelParams:
    """Named trainable tensors plus batchnorm running statistics."""

    params: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.params.items()},
                           {k: v.copy() for k, v in self.stats.items()})


def layer_specs(cfg: UNetConfig):
    """Ordered (kind, name, shape) walk shared by build/count/checkpoint.

    kind is "conv" (shape = kernel (Co,Ci,kh,kw)) or "bn" (shape = channel
    count). The order is the forward execution order.
    """
    specs = []

    def ch(i):
        return cfg.base_channels << i

    def dconv(prefix, cin, cout):
        specs.append(("conv", f"{prefix}.conv1", (cout, cin, 3, 3)))
        if cfg.use_batchnorm:
            specs.append(("bn", f"{prefix}.bn1", cout))
        specs.append(("conv", f"{prefix}.conv2", (cout, cout, 3, 3)))
        if cfg.use_batchnorm:
            specs.append(("bn", f"{prefix}.bn2", cout))

    prev = cfg.in_channels
    for i in range(cfg.depth):
        dconv(f"enc{i}", prev, ch(i))
        prev = ch(i)
    dconv("bott", prev, ch(cfg.depth))
    prev = ch(cfg.depth)
    for i in reversed(range(cfg.depth)):
        specs.append(("conv", f"dec{i}.up", (ch(i), prev, 3, 3)))
        if cfg.use_batchnorm:
            specs.append(("bn", f"dec{i}.bnu", ch(i)))
        specs.append(("conv", f"dec{i}.conv1", (ch(i), 2 * ch(i), 3, 3)))
        if cfg.use_batchnorm:
            specs.append(("bn", f"dec{i}.bn1", ch(i)))
        specs.append(("conv", f"dec{i}.conv2", (ch(i), ch(i), 3, 3)))
        if cfg.use_batchnorm:
            specs.append(("bn", f"dec{i}.bn2", ch(i)))
        prev = ch(i)
    specs.append(("conv", "final", (cfg.out_channels, ch(0), 1, 1)))
    return specs


def parameter_count(cfg: UNetConfig) -> int:
    total = 0
    for kind, _, shape in layer_specs(cfg):
        if kind == "conv":
            total += int(np.prod(shape)) + shape[0]  # kernel + bias
        else:
            total += 2 * shape  # gamma + beta
    return total


def build_unet(cfg: UNetConfig, init_seed: int) -> ModelParams:
    """He-initialized parameters; BN gain 1 / shift 0; final conv zeroed.

    With global_add the zero final conv makes forward(x) == x exactly at
    initialization.
    """
    rng = np.random.default_rng(init_seed)
    mp = ModelParams()
    for kind, name, shape in layer_specs(cfg):
        if kind == "conv":
            co, ci, kh, kw = shape
            if name == "final":
                w = np.zeros(shape)
            else:
                fan_in = ci * kh * kw
                w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
            mp.params[f"{name}.w"] = w
            mp.params[f"{name}.b"] = np.zeros(co)
        else:
            mp.params[f"{name}.gamma"] = np.ones(shape)
            mp.params[f"{name}.beta"] = np.zeros(shape)
            mp.stats[f"{name}.mean"] = np.zeros(shape)
            mp.stats[f"{name}.var"] = np.ones(shape)
    return mp


def _conv_bn_relu(mp: ModelParams, cfg: UNetConfig, name: str, bn_name: str,
                  h, mode: str, tape: list):
    h, cc = L.conv2d_forward(h, mp.params[f"{name}.w"], mp.params[f"{name}.b"])
    entry = {"conv": cc, "bn": None}
    if cfg.use_batchnorm:
        h, bc, nm, nv = L.batchnorm_forward(
            h, mp.params[f"{bn_name}.gamma"], mp.params[f"{bn_name}.beta"],
            mp.stats[f"{bn_name}.mean"], mp.stats[f"{bn_name}.var"], mode)
        if mode == "train":
            mp.stats[f"{bn_name}.mean"] = nm
            mp.stats[f"{bn_name}.var"] = nv
        entry["bn"] = bc
    h, mask = L.relu_forward(h)
    entry["relu"] = mask
    tape.append((name, bn_name, entry))
    return h


def _block_forward(mp, cfg, prefix, h, mode, tape):
    h = _conv_bn_relu(mp, cfg, f"{prefix}.conv1", f"{prefix}.bn1", h, mode, tape)
    h = _conv_bn_relu(mp, cfg, f"{prefix}.conv2", f"{prefix}.bn2", h, mode, tape)
    return h


def forward(params: ModelParams, cfg: UNetConfig, x, mode: str = "train",
            _collect: list | None = None):
    """Run the network; returns (y, cache).

    Spatial dims must be divisible by 2**depth. Train mode normalizes
    with batch statistics and updates the running stats in place
    (momentum 0.9); eval mode uses the running stats. The cache feeds
    ``backward`` and is only produced meaningfully in train mode.
    """
    x = L.check_tensor4(x, "input")
    n, c, h_, w_ = x.shape
    if c != cfg.in_channels:
        raise ShapeError(f"expected {cfg.in_channels} input channels, got {c}")
    div = 1 << cfg.depth
    if h_ % div or w_ % div:
        raise ShapeError(f"spatial dims {h_}x{w_} not divisible by 2^{cfg.depth}")
    if mode not in ("train", "eval"):
        raise ShapeError(f"unknown mode {mode!r}")

    cache = {"cfg": cfg, "mode": mode, "x": x, "enc": [], "dec": []}
    h = x
    skips = []
    for i in range(cfg.depth):
        tape = []
        h = _block_forward(params, cfg, f"enc{i}", h, mode, tape)
        if _collect is not None:
            _collect.append((f"enc{i}", h))
        skips.append(h)
        h, pc = L.maxpool2_forward(h)
        cache["enc"].append({"tape": tape, "pool": pc})

    tape = []
    h = _block_forward(params, cfg, "bott", h, mode, tape)
    if _collect is not None:
        _collect.append(("bott", h))
    cache["bott"] = tape

    for i in reversed(range(cfg.depth)):
        h, up_shape = L.upsample2_forward(h)
        tape = []
        h = _conv_bn_relu(params, cfg, f"dec{i}.up", f"dec{i}.bnu", h, mode, tape)
        c_up = h.shape[1]
        h = np.concatenate([h, skips[i]], axis=1)
        h = _block_forward(params, cfg, f"dec{i}", h, mode, tape)
        if _collect is not None:
            _collect.append((f"dec{i}", h))
        cache["dec"].append({"level": i, "up_shape": up_shape, "tape": tape,
                             "c_up": c_up})

    y, fc = L.conv2d_forward(h, params.params["final.w"], params.params["final.b"],
                             stride=1, pad=0)
    cache["final"] = fc
    if cfg.global_add:
        y = y + x  # broadcast the single input channel over out_channels
    return y, cache


def _conv_bn_relu_backward(params, grads, entry_tuple, dy):
    name, bn_name, entry = entry_tuple
    dy = L.relu_backward(dy, entry["relu"])
    if entry["bn"] is not None:
        dy, dgamma, dbeta = L.batchnorm_backward(dy, entry["bn"])
        grads[f"{bn_name}.gamma"] = grads.get(f"{bn_name}.gamma", 0) + dgamma
        grads[f"{bn_name}.beta"] = grads.get(f"{bn_name}.beta", 0) + dbeta
    dy, dw, db = L.conv2d_backward(dy, entry["conv"])
    grads[f"{name}.w"] = grads.get(f"{name}.w", 0) + dw
    grads[f"{name}.b"] = grads.get(f"{name}.b", 0) + db
    return dy


def backward(params: ModelParams, cfg: UNetConfig, cache, dldy):
    """Exact reverse-mode gradients; returns (grads dict, dLoss/dinput)."""
    if not isinstance(cache, dict) or cache.get("cfg") != cfg or "final" not in cache:
        raise ShapeError("stale cache: not produced by a matching forward")
    if cache.get("mode") != "train":
        raise ShapeError("backward needs a train-mode cache")
    dldy = L.check_tensor4(dldy, "dLoss_dy")

    grads = {}
    dh, dwf, dbf = L.conv2d_backward(dldy, cache["final"])
    grads["final.w"] = dwf
    grads["final.b"] = dbf

    dskips = {}
    for dec in reversed(cache["dec"]):
        tape = dec["tape"]
        dh = _conv_bn_relu_backward(params, grads, tape[2], dh)
        dh = _conv_bn_relu_backward(params, grads, tape[1], dh)
        c_up = dec["c_up"]
        dskips[dec["level"]] = dh[:, c_up:]
        dh = dh[:, :c_up]
        dh = _conv_bn_relu_backward(params, grads, tape[0], dh)
        dh = L.upsample2_backward(dh, dec["up_shape"])

    for entry in reversed(cache["bott"]):
        dh = _conv_bn_relu_backward(params, grads, entry, dh)

    for i in reversed(range(cfg.depth)):
        enc = cache["enc"][i]
        dh = L.maxpool2_backward(dh, enc["pool"])
        dh = dh + dskips[i]
        for entry in reversed(enc["tape"]):
            dh = _conv_bn_relu_backward(params, grads, entry, dh)

    dx = dh
    if cfg.global_add:
        dx = dx + dldy.sum(axis=1, keepdims=True)
    return grads, dx


@dataclass(frozen=True)
class ActivationRecord:
    name: str
    tensor: np.ndarray
    channel_min: np.ndarray
    channel_max: np.ndarray


def export_activations(params: ModelParams, cfg: UNetConfig, x, out_dir=None):
    """Per-block feature maps in eval mode: depth encoder blocks, the
    bottleneck, and depth decoder blocks (2*depth + 1 records).

    With ``out_dir`` each block is also written as a single grayscale TIFF
    tiling its channels into a near-square grid.
    """
    collected = []
    forward(params, cfg, x, mode="eval", _collect=collected)
    records = []
    for name, tensor in collected:
        records.append(ActivationRecord(
            name=name,
            tensor=tensor,
            channel_min=tensor.min(axis=(0, 2, 3)),
            channel_max=tensor.max(axis=(0, 2, 3)),
        ))
    if out_dir is not None:
        import os

        from ..imagecore import RasterImage, save_raster
        os.makedirs(out_dir, exist_ok=True)
        for rec in records:
            t = rec.tensor[0]  # first batch item
            c, hh, ww = t.shape
            ncol = int(np.ceil(np.sqrt(c)))
            nrow = int(np.ceil(c / ncol))
            grid = np.zeros((nrow * hh, ncol * ww))
            for k in range(c):
                r, q = divmod(k, ncol)
                grid[r * hh:(r + 1) * hh, q * ww:(q + 1) * ww] = t[k]
            save_raster(RasterImage(grid, units_tag="dimensionless"),
                        os.path.join(out_dir, f"act_{rec.name}.tif"))
    return records
