"""Optimization loop: Adam updates over shuffled patch batches, per-epoch
validation with the Pearson-rho metric, and best-rho checkpointing.

Training is deterministic end to end under a fixed seed: shuffling uses
one seeded generator, weight init is seeded from the same config, and
every update is pure numpy. The GAN regime alternates one discriminator
step and one generator step per batch, pix2pix style.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import DatasetManifest, load_pair
from .errors import ConfigError, DataError, ShapeError
from .imagecore import load_raster
from .infer import predict_array
from .losses import (DiscConfig, LossConfig, build_discriminator, disc_backward,
                     disc_forward, gan_objectives, l1_loss, pearson_loss)
from .nn import UNetConfig, build_unet, forward, backward
from .nn.checkpoint import ModelCheckpoint, save_checkpoint

HISTORY_COLUMNS = ("epoch", "train_l1", "train_rho_loss", "train_gan_g",
                   "train_gan_d", "val_l1", "val_rho", "seconds")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int = 1
    lr: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    normalize_inputs: bool = True
    disc: DiscConfig = field(default_factory=DiscConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_l1: float
    train_rho_loss: float
    train_gan_g: float
    train_gan_d: float
    val_l1: float
    val_rho: float
    seconds: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    def rows(self):
        return [[getattr(r, c) for c in HISTORY_COLUMNS] for r in self.records]

    def key_rows(self):
        """Rows minus wall time, the only nondeterministic column."""
        return [row[:-1] for row in self.rows()]

    def save_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(HISTORY_COLUMNS)
            for row in self.rows():
                w.writerow([row[0]] + [repr(v) for v in row[1:]])


def load_history_csv(path) -> TrainHistory:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != HISTORY_COLUMNS:
            raise DataError(f"unexpected history columns {header}")
        hist = TrainHistory()
        for row in reader:
            hist.records.append(EpochRecord(int(row[0]), *map(float, row[1:])))
    return hist


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def adam_init(params: dict) -> dict:
    return {
        "t": 0,
        "m": {k: np.zeros_like(v) for k, v in params.items()},
        "v": {k: np.zeros_like(v) for k, v in params.items()},
    }


def adam_step(params: dict, grads: dict, state: dict, cfg: TrainConfig):
    """One bias-corrected Adam update; pure, returns (params', state')."""
    if set(grads) != set(params):
        raise ShapeError("grads/params name mismatch")
    t = state["t"] + 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ShapeError(f"grad shape {g.shape} != param shape {p.shape} for {k}")
        m = b1 * state["m"][k] + (1.0 - b1) * g
        v = b2 * state["v"][k] + (1.0 - b2) * g * g
        new_p[k] = p - cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        new_m[k] = m
        new_v[k] = v
    return new_p, {"t": t, "m": new_m, "v": new_v}


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def _pearson(a, b) -> float:
    """Correlation over all pixels; 0.0 when either side is constant."""
    ac = a.ravel() - a.mean()
    bc = b.ravel() - b.mean()
    den = math.sqrt(float(ac @ ac)) * math.sqrt(float(bc @ bc))
    if den == 0.0:
        return 0.0
    return float(ac @ bc) / den


def _records_with_channel(manifest: DatasetManifest, split: str, channel: str):
    recs = [r for r in manifest.records_for(split)
            if r.channel_path(channel) is not None]
    if not recs:
        raise DataError(f"empty {split} split for channel {channel!r}")
    return recs


def _metrics_for(model, net_cfg, recs, channel, mean, std):
    l1s, rhos, per_field = [], [], {}
    for rec in recs:
        phase, target = load_pair(rec, channel)
        pred = predict_array(model, net_cfg, phase.pixels, mean, std, clamp=False)
        l1s.append(float(np.abs(pred - target.pixels).mean()))
        rho = _pearson(pred, target.pixels)
        rhos.append(rho)
        per_field[rec.field_id] = rho
    return float(np.mean(l1s)), float(np.mean(rhos)), per_field


def validate(checkpoint: ModelCheckpoint, manifest: DatasetManifest,
             split: str, channel: str | None = None) -> dict:
    """Eval-mode metrics on a split: mean L1, mean rho, per-field rho.

    rho is computed on unclamped predictions so an identity checkpoint
    scores exactly corr(phase, label). The channel defaults to the one
    recorded in the checkpoint meta.
    """
    if channel is None:
        channel = checkpoint.meta.get("channel")
        if channel is None:
            raise ConfigError("channel not given and absent from checkpoint meta")
    recs = _records_with_channel(manifest, split, channel)
    mean_l1, mean_rho, per_field = _metrics_for(
        checkpoint.model, checkpoint.net_cfg, recs, channel,
        checkpoint.input_mean, checkpoint.input_std)
    return {"mean_l1": mean_l1, "mean_rho": mean_rho, "per_field_rho": per_field}


def identity_checkpoint(net_cfg: UNetConfig, manifest: DatasetManifest,
                        channel: str, normalize_inputs: bool = True,
                        seed: int = 0) -> ModelCheckpoint:
    """Zero-final-conv checkpoint: the predict-the-input baseline."""
    if not net_cfg.global_add:
        raise ConfigError("identity baseline needs global_add")
    recs = _records_with_channel(manifest, "train", channel)
    mean, std = _input_stats(recs, normalize_inputs)
    model = build_unet(net_cfg, init_seed=seed)
    fin_w = model.params["final.w"]
    fin_b = model.params["final.b"]
    fin_w[...] = 0.0
    fin_b[...] = 0.0
    return ModelCheckpoint(net_cfg, model, mean, std,
                           {"channel": channel, "identity_baseline": True})


def _input_stats(recs, normalize_inputs: bool):
    if not normalize_inputs:
        return 0.0, 1.0
    total = 0
    s1 = 0.0
    s2 = 0.0
    for rec in recs:
        px = load_raster(rec.phase_path).pixels
        total += px.size
        s1 += float(px.sum())
        s2 += float((px * px).sum())
    mean = s1 / total
    var = max(s2 / total - mean * mean, 0.0)
    std = math.sqrt(var)
    return mean, (std if std > 0 else 1.0)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _batches(order, batch_size):
    for i in range(0, len(order), batch_size):
        yield order[i:i + batch_size]


def train_model(manifest: DatasetManifest, channel: str, net_cfg: UNetConfig,
                train_cfg: TrainConfig, out_path=None):
    """Train one stain network; returns (best ModelCheckpoint, TrainHistory).

    The checkpoint is (re)written to out_path each time validation rho
    improves; the returned checkpoint is the best-rho snapshot with the
    normalization stats and config embedded in its meta.
    """
    train_recs = _records_with_channel(manifest, "train", channel)
    val_recs = _records_with_channel(manifest, "val", channel)

    mean, std = _input_stats(train_recs, train_cfg.normalize_inputs)
    xs, ts = [], []
    for rec in train_recs:
        phase, target = load_pair(rec, channel)
        if phase.pixels.shape != target.pixels.shape:
            raise ShapeError(f"field {rec.field_id}: phase {phase.pixels.shape} "
                             f"vs target {target.pixels.shape}")
        xs.append((phase.pixels - mean) / std)
        ts.append((target.pixels - mean) / std)
    shapes = {x.shape for x in xs}
    if len(shapes) > 1:
        raise ShapeError(f"training fields disagree on dims: {sorted(shapes)}")
    h, w = xs[0].shape
    if h % (1 << net_cfg.depth) or w % (1 << net_cfg.depth):
        raise ShapeError(f"training dims {h}x{w} must divide 2^depth "
                         f"= {1 << net_cfg.depth}")
    xs = np.stack(xs)[:, None]
    ts = np.stack(ts)[:, None]

    rng = np.random.default_rng(train_cfg.seed)
    gen = build_unet(net_cfg, init_seed=train_cfg.seed)
    g_state = adam_init(gen.params)

    use_gan = train_cfg.loss.kind == "l1_gan"
    use_rho = train_cfg.loss.kind == "l1_pearson"
    d_cfg = disc = d_state = None
    if use_gan:
        d_cfg = replace(train_cfg.disc,
                        in_channels=net_cfg.in_channels + net_cfg.out_channels)
        disc = build_discriminator(d_cfg, init_seed=train_cfg.seed + 1)
        d_state = adam_init(disc.params)

    def batch_loss(x, t, step, ids):
        """One optimization step; returns component dict for the epoch log."""
        nonlocal gen, g_state, disc, d_state
        pred, cache = forward(gen, net_cfg, x, mode="train")
        l1v, grad = l1_loss(pred, t)
        comps = {"l1": l1v, "rho": math.nan, "g": math.nan, "d": math.nan}
        if use_rho and train_cfg.loss.pearson_weight > 0:
            rv, rg = pearson_loss(pred, t)
            grad = grad + train_cfg.loss.pearson_weight * rg
            comps["rho"] = rv
        if use_gan:
            real = np.concatenate([x, t], axis=1)
            fake = np.concatenate([x, pred], axis=1)
            s_real, c_real = disc_forward(disc, d_cfg, real, "train")
            s_fake, c_fake = disc_forward(disc, d_cfg, fake, "train")
            d_loss, _, gr = gan_objectives(s_real, s_fake)
            gr_real, _ = disc_backward(disc, d_cfg, c_real, gr.d_wrt_real)
            gr_fake, _ = disc_backward(disc, d_cfg, c_fake, gr.d_wrt_fake)
            d_grads = {k: gr_real[k] + gr_fake[k] for k in gr_real}
            disc.params, d_state = adam_step(disc.params, d_grads, d_state,
                                             train_cfg)
            # generator sees the updated discriminator
            s_fake2, c_fake2 = disc_forward(disc, d_cfg, fake, "train")
            _, g_loss, gr2 = gan_objectives(s_real, s_fake2)
            _, dx = disc_backward(disc, d_cfg, c_fake2,
                                  train_cfg.loss.gan_weight * gr2.g_wrt_fake)
            grad = grad + dx[:, net_cfg.in_channels:]
            comps["g"] = g_loss
            comps["d"] = d_loss
        active = ["l1"]
        if use_rho and train_cfg.loss.pearson_weight > 0:
            active.append("rho")
        if use_gan:
            active += ["g", "d"]
        if not all(math.isfinite(comps[k]) for k in active):
            raise DataError(f"non-finite loss at step {step}, batch {ids}: {comps}")
        g_grads, _ = backward(gen, net_cfg, cache, grad)
        gen.params, g_state = adam_step(gen.params, g_grads, g_state, train_cfg)
        return comps

    history = TrainHistory()
    best = None
    best_rho = -math.inf
    step = 0
    for epoch in range(1, train_cfg.epochs + 1):
        tic = time.perf_counter()
        order = rng.permutation(len(train_recs))
        sums = {"l1": 0.0, "rho": 0.0, "g": 0.0, "d": 0.0}
        n_batches = 0
        for batch in _batches(order, train_cfg.batch_size):
            step += 1
            ids = [train_recs[i].field_id for i in batch]
            comps = batch_loss(xs[batch], ts[batch], step, ids)
            for k in sums:
                sums[k] += comps[k]
            n_batches += 1
        val_l1, val_rho, _ = _metrics_for(gen, net_cfg, val_recs, channel,
                                          mean, std)
        if val_rho > best_rho:
            best_rho = val_rho
            best = ModelCheckpoint(
                net_cfg, gen.copy(), mean, std,
                {"channel": channel, "epoch": epoch, "val_rho": val_rho,
                 "loss_kind": train_cfg.loss.kind, "seed": train_cfg.seed})
            if out_path is not None:
                save_checkpoint(best, out_path)
        history.records.append(EpochRecord(
            epoch=epoch,
            train_l1=sums["l1"] / n_batches,
            train_rho_loss=(sums["rho"] / n_batches) if use_rho else math.nan,
            train_gan_g=(sums["g"] / n_batches) if use_gan else math.nan,
            train_gan_d=(sums["d"] / n_batches) if use_gan else math.nan,
            val_l1=val_l1,
            val_rho=val_rho,
            seconds=time.perf_counter() - tic,
        ))
    return best, history
