"""Training objectives: L1, weighted L1 + Pearson correlation, and
least-squares conditional GAN with a PatchGAN discriminator.

All losses return (scalar, gradient w.r.t. pred) with exact analytic
gradients. The discriminator is a 4-layer stride-2 conv stack (kernel
4x4, leaky ReLU 0.2, batchnorm on layers 2-4) followed by a 1x1 conv to
a single-channel patch score map of spatial size H/16 x W/16.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .nn import layers as L

LOSS_KINDS = ("l1", "l1_pearson", "l1_gan")
_PEARSON_EPS = 1e-8


@dataclass(frozen=True)
class LossConfig:
    kind: str = "l1"
    pearson_weight: float = 0.2
    gan_weight: float = 0.01

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ConfigError(f"loss kind must be one of {LOSS_KINDS}, got {self.kind!r}")
        if self.pearson_weight < 0 or self.gan_weight < 0:
            raise ConfigError("loss weights must be >= 0")


def _check_pair(pred, target):
    pred = L.check_tensor4(pred, "pred")
    target = L.check_tensor4(target, "target")
    if pred.shape != target.shape:
        raise ShapeError(f"pred shape {pred.shape} != target shape {target.shape}")
    return pred, target


def l1_loss(pred, target):
    """Mean absolute error; grad = sign(pred - target)/N with sign(0) = 0."""
    pred, target = _check_pair(pred, target)
    diff = pred - target
    loss = float(np.abs(diff).mean())
    grad = np.sign(diff) / diff.size
    return loss, grad


def pearson_loss(pred, target):
    """1 - rho per batch item (over all its elements), averaged over batch.

    rho uses an eps floor of 1e-8 in the variance denominators, so a
    constant prediction degrades gracefully; a constant target makes rho
    undefined and raises instead of silently returning zero.
    """
    pred, target = _check_pair(pred, target)
    n = pred.shape[0]
    grad = np.empty_like(pred)
    total = 0.0
    for b in range(n):
        p = pred[b].ravel()
        t = target[b].ravel()
        tc = t - t.mean()
        st2 = float(tc @ tc)
        if st2 == 0.0:
            raise DataError(f"constant target in batch item {b}: Pearson undefined")
        pc = p - p.mean()
        sp2 = float(pc @ pc) + _PEARSON_EPS
        st2 = st2 + _PEARSON_EPS
        sp = np.sqrt(sp2)
        st = np.sqrt(st2)
        rho = float(pc @ tc) / (sp * st)
        total += 1.0 - rho
        # d rho / dp = tc/(sp*st) - rho*pc/sp^2; centering terms vanish
        grad[b] = (-(tc / (sp * st) - rho * pc / sp2) / n).reshape(pred.shape[1:])
    return total / n, grad


def combined_loss(pred, target, cfg: LossConfig):
    """L1 + pearson_weight * (1 - rho). kind must be l1 or l1_pearson;
    the GAN objective needs a discriminator and lives in gan_objectives."""
    if cfg.kind == "l1_gan":
        raise ConfigError("combined_loss does not evaluate the GAN term; use gan_objectives")
    loss, grad = l1_loss(pred, target)
    if cfg.kind == "l1_pearson" and cfg.pearson_weight > 0:
        pl, pg = pearson_loss(pred, target)
        loss = loss + cfg.pearson_weight * pl
        grad = grad + cfg.pearson_weight * pg
    return loss, grad


# ---------------------------------------------------------------------------
# PatchGAN discriminator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiscConfig:
    """4 stride-2 conv blocks with channel multipliers (1, 2, 4, 8) on
    base_channels (default 64 -> 64/128/256/512), then a 1x1 conv to one
    score channel. Batchnorm on blocks 2-4; leaky-ReLU slope 0.2."""

    base_channels: int = 64
    in_channels: int = 2  # phase + candidate label, channel-concatenated
    lrelu_slope: float = 0.2

    def __post_init__(self):
        if self.base_channels < 1 or self.in_channels < 1:
            raise ConfigError("discriminator channels must be >= 1")

    def to_dict(self) -> dict:
        return {"base_channels": self.base_channels, "in_channels": self.in_channels,
                "lrelu_slope": self.lrelu_slope}


@dataclass
class DiscParams:
    params: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)

    def copy(self) -> "DiscParams":
        return DiscParams({k: v.copy() for k, v in self.params.items()},
                          {k: v.copy() for k, v in self.stats.items()})


def _disc_specs(cfg: DiscConfig):
    mults = (1, 2, 4, 8)
    specs = []
    prev = cfg.in_channels
    for i, m in enumerate(mults):
        ch = cfg.base_channels * m
        specs.append(("conv", f"d{i}.conv", (ch, prev, 4, 4), i > 0))  # bn on blocks 2-4
        prev = ch
    specs.append(("conv", "dfinal", (1, prev, 1, 1), False))
    return specs


def build_discriminator(cfg: DiscConfig, init_seed: int) -> DiscParams:
    rng = np.random.default_rng(init_seed)
    dp = DiscParams()
    for _, name, shape, with_bn in _disc_specs(cfg):
        co, ci, kh, kw = shape
        dp.params[f"{name}.w"] = rng.standard_normal(shape) * np.sqrt(2.0 / (ci * kh * kw))
        dp.params[f"{name}.b"] = np.zeros(co)
        if with_bn:
            dp.params[f"{name}.gamma"] = np.ones(co)
            dp.params[f"{name}.beta"] = np.zeros(co)
            dp.stats[f"{name}.mean"] = np.zeros(co)
            dp.stats[f"{name}.var"] = np.ones(co)
    return dp


def disc_forward(dp: DiscParams, cfg: DiscConfig, x, mode: str = "train"):
    """Score map forward pass; returns (scores (N,1,H/16,W/16), cache)."""
    x = L.check_tensor4(x, "disc input")
    if x.shape[1] != cfg.in_channels:
        raise ShapeError(f"discriminator expects {cfg.in_channels} channels, got {x.shape[1]}")
    if x.shape[2] % 16 or x.shape[3] % 16:
        raise ShapeError(f"disc spatial dims {x.shape[2:]}: must be divisible by 16")
    tape = []
    h = x
    for kind, name, shape, with_bn in _disc_specs(cfg):
        if name == "dfinal":
            h, cc = L.conv2d_forward(h, dp.params[f"{name}.w"], dp.params[f"{name}.b"],
                                     stride=1, pad=0)
            tape.append((name, {"conv": cc, "bn": None, "act": None}))
            break
        h, cc = L.conv2d_forward(h, dp.params[f"{name}.w"], dp.params[f"{name}.b"],
                                 stride=2, pad=1)
        entry = {"conv": cc, "bn": None}
        if with_bn:
            h, bc, nm, nv = L.batchnorm_forward(
                h, dp.params[f"{name}.gamma"], dp.params[f"{name}.beta"],
                dp.stats[f"{name}.mean"], dp.stats[f"{name}.var"], mode)
            if mode == "train":
                dp.stats[f"{name}.mean"] = nm
                dp.stats[f"{name}.var"] = nv
            entry["bn"] = bc
        h, ac = L.leaky_relu_forward(h, cfg.lrelu_slope)
        entry["act"] = ac
        tape.append((name, entry))
    return h, {"cfg": cfg, "mode": mode, "tape": tape}


def disc_backward(dp: DiscParams, cfg: DiscConfig, cache, dscores):
    """Returns (grads dict, dLoss/dinput)."""
    if not isinstance(cache, dict) or cache.get("cfg") != cfg:
        raise ShapeError("stale discriminator cache")
    if cache.get("mode") != "train":
        raise ShapeError("disc backward needs a train-mode cache")
    grads = {}
    dh = L.check_tensor4(dscores, "dscores")
    for name, entry in reversed(cache["tape"]):
        if entry["act"] is not None:
            dh = L.leaky_relu_backward(dh, entry["act"])
        if entry["bn"] is not None:
            dh, dgamma, dbeta = L.batchnorm_backward(dh, entry["bn"])
            grads[f"{name}.gamma"] = dgamma
            grads[f"{name}.beta"] = dbeta
        dh, dw, db = L.conv2d_backward(dh, entry["conv"])
        grads[f"{name}.w"] = dw
        grads[f"{name}.b"] = db
    return grads, dh


def discriminate(dp: DiscParams, cfg: DiscConfig, phase, candidate_label,
                 mode: str = "eval"):
    """Conditional patch scores for (phase, candidate) pairs.

    Inputs are channel-concatenated; output is (N, 1, H/16, W/16), each
    score judging one local receptive field.
    """
    phase = L.check_tensor4(phase, "phase")
    candidate_label = L.check_tensor4(candidate_label, "candidate")
    if phase.shape[0] != candidate_label.shape[0] or phase.shape[2:] != candidate_label.shape[2:]:
        raise ShapeError("phase and candidate dims differ")
    x = np.concatenate([phase, candidate_label], axis=1)
    scores, _ = disc_forward(dp, cfg, x, mode)
    return scores


@dataclass(frozen=True)
class GanGrads:
    d_wrt_real: np.ndarray
    d_wrt_fake: np.ndarray
    g_wrt_fake: np.ndarray


def gan_objectives(scores_real, scores_fake):
    """Least-squares GAN objectives.

    d_loss = mean((real - 1)^2)/2 + mean(fake^2)/2;
    g_loss = mean((fake - 1)^2)/2. The generator total is assembled by
    the trainer as L1 + gan_weight * g_loss.
    """
    scores_real = L.check_tensor4(scores_real, "scores_real")
    scores_fake = L.check_tensor4(scores_fake, "scores_fake")
    if scores_real.shape != scores_fake.shape:
        raise ShapeError("score maps must share dims")
    nr = scores_real.size
    nf = scores_fake.size
    d_loss = 0.5 * float(((scores_real - 1.0) ** 2).mean()) \
        + 0.5 * float((scores_fake ** 2).mean())
    g_loss = 0.5 * float(((scores_fake - 1.0) ** 2).mean())
    grads = GanGrads(
        d_wrt_real=(scores_real - 1.0) / nr,
        d_wrt_fake=scores_fake / nf,
        g_wrt_fake=(scores_fake - 1.0) / nf,
    )
    return d_loss, g_loss, grads
