"""Loss functions, the PatchGAN critic, and the adversarial objectives."""

import math

import numpy as np
import pytest

from pics.errors import ConfigError, DataError, ShapeError
from pics.losses import (DiscConfig, LossConfig, build_discriminator,
                         combined_loss, disc_backward, disc_forward,
                         discriminate, gan_objectives, l1_loss, pearson_loss)


def _t(values):
    return np.asarray(values, dtype=np.float64).reshape(1, 1, 1, -1)


# -- L1 -----------------------------------------------------------------------

def test_l1_worked_example():
    loss, grad = l1_loss(_t([0.0, 1.0]), _t([1.0, 1.0]))
    assert loss == 0.5
    assert np.array_equal(grad, _t([-0.5, 0.0]))


def test_l1_zero_at_equality():
    x = np.random.default_rng(0).standard_normal((2, 1, 4, 4))
    loss, grad = l1_loss(x, x.copy())
    assert loss == 0.0
    assert np.all(grad == 0.0)


def test_l1_shape_mismatch():
    with pytest.raises(ShapeError):
        l1_loss(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 3)))


def test_l1_permutation_invariant():
    rng = np.random.default_rng(1)
    pred = rng.standard_normal(16)
    target = rng.standard_normal(16)
    perm = rng.permutation(16)
    a, _ = l1_loss(_t(pred), _t(target))
    b, _ = l1_loss(_t(pred[perm]), _t(target[perm]))
    assert abs(a - b) < 1e-15


# -- Pearson ------------------------------------------------------------------

def test_pearson_worked_example():
    loss, _ = pearson_loss(_t([1.0, 2.0, 3.0]), _t([1.0, 2.0, 4.0]))
    assert abs(loss - (1.0 - 9.0 / (2.0 * math.sqrt(21.0)))) < 1e-7


def test_pearson_perfect_and_inverted():
    up = _t([1.0, 2.0, 3.0])
    down = _t([3.0, 2.0, 1.0])
    loss_up, _ = pearson_loss(up, up.copy())
    loss_down, _ = pearson_loss(down, up)
    assert abs(loss_up - 0.0) < 1e-7
    assert abs(loss_down - 2.0) < 1e-7


def test_pearson_constant_target_rejected():
    with pytest.raises(DataError):
        pearson_loss(_t([1.0, 2.0, 3.0]), _t([5.0, 5.0, 5.0]))


def test_pearson_constant_pred_is_graceful():
    # eps floor keeps the ratio finite; correlation degenerates toward 0
    loss, grad = pearson_loss(_t([2.0, 2.0, 2.0]), _t([1.0, 2.0, 4.0]))
    assert math.isfinite(loss)
    assert np.all(np.isfinite(grad))


def test_pearson_affine_invariance():
    rng = np.random.default_rng(2)
    pred = rng.standard_normal((1, 1, 16, 16))
    target = rng.standard_normal((1, 1, 16, 16))
    base, _ = pearson_loss(pred, target)
    shifted, _ = pearson_loss(3.0 * pred + 7.0, target)
    flipped, _ = pearson_loss(-2.0 * pred, target)
    assert abs(shifted - base) < 1e-10
    assert abs(flipped - (2.0 - base)) < 1e-10


def test_pearson_per_item_averaging():
    # second batch item with rho == 1 halves the distance from zero loss
    a = np.stack([np.linspace(0, 1, 8), np.linspace(0, 1, 8)])
    b = np.stack([np.linspace(1, 0, 8), np.linspace(0, 1, 8)])
    loss, _ = pearson_loss(a.reshape(2, 1, 1, 8), b.reshape(2, 1, 1, 8))
    assert abs(loss - 1.0) < 1e-7  # mean of (2, 0)


def test_pearson_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    pred = rng.standard_normal((1, 1, 6, 6))
    target = rng.standard_normal((1, 1, 6, 6))
    _, grad = pearson_loss(pred, target)
    h = 1e-6
    for i in range(0, 36, 5):
        flat = pred.reshape(-1)
        orig = flat[i]
        flat[i] = orig + h
        up, _ = pearson_loss(pred, target)
        flat[i] = orig - h
        dn, _ = pearson_loss(pred, target)
        flat[i] = orig
        fd = (up - dn) / (2 * h)
        assert abs(fd - grad.reshape(-1)[i]) < 1e-6


# -- combined -----------------------------------------------------------------

def test_combined_reduces_to_l1():
    rng = np.random.default_rng(4)
    pred = rng.standard_normal((1, 1, 8, 8))
    target = rng.standard_normal((1, 1, 8, 8))
    plain, plain_grad = l1_loss(pred, target)
    cfg = LossConfig(kind="l1_pearson", pearson_weight=0.0)
    loss, grad = combined_loss(pred, target, cfg)
    assert loss == plain
    assert np.array_equal(grad, plain_grad)
    only_l1, only_l1_grad = combined_loss(pred, target, LossConfig(kind="l1"))
    assert only_l1 == plain and np.array_equal(only_l1_grad, plain_grad)


def test_combined_weight_linearity():
    rng = np.random.default_rng(5)
    pred = rng.standard_normal((1, 1, 8, 8))
    target = rng.standard_normal((1, 1, 8, 8))
    lam = 0.3
    l_lam, _ = combined_loss(pred, target, LossConfig("l1_pearson", pearson_weight=lam))
    l_2lam, _ = combined_loss(pred, target, LossConfig("l1_pearson", pearson_weight=2 * lam))
    rho_term, _ = pearson_loss(pred, target)
    assert abs((l_2lam - l_lam) - lam * rho_term) < 1e-12


def test_combined_gradient_matches_finite_differences():
    rng = np.random.default_rng(6)
    pred = rng.standard_normal((1, 1, 8, 8))
    target = pred + 0.2 * np.where(rng.standard_normal((1, 1, 8, 8)) > 0, 1.0, -1.0)
    cfg = LossConfig(kind="l1_pearson", pearson_weight=0.2)
    _, grad = combined_loss(pred, target, cfg)
    h = 1e-6
    flat = pred.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(0, flat.size, 7):
        orig = flat[i]
        flat[i] = orig + h
        up, _ = combined_loss(pred, target, cfg)
        flat[i] = orig - h
        dn, _ = combined_loss(pred, target, cfg)
        flat[i] = orig
        fd = (up - dn) / (2 * h)
        assert abs(fd - gflat[i]) / max(abs(fd) + abs(gflat[i]), 1e-4) < 1e-4


def test_combined_rejects_gan_kind():
    with pytest.raises(ConfigError):
        combined_loss(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 2)),
                      LossConfig(kind="l1_gan"))


def test_loss_config_validation():
    with pytest.raises(ConfigError):
        LossConfig(kind="l2")
    with pytest.raises(ConfigError):
        LossConfig(kind="l1_pearson", pearson_weight=-0.1)


# -- discriminator ------------------------------------------------------------

def test_discriminator_score_map_shape():
    cfg = DiscConfig(base_channels=4)
    dp = build_discriminator(cfg, init_seed=0)
    x = np.random.default_rng(0).standard_normal((1, 2, 64, 64))
    scores = discriminate(dp, cfg, x[:, 0:1], x[:, 1:2])
    assert scores.shape == (1, 1, 4, 4)
    again = discriminate(dp, cfg, x[:, 0:1], x[:, 1:2])
    assert np.array_equal(scores, again)


def test_discriminator_rejects_indivisible_dims():
    cfg = DiscConfig(base_channels=2)
    dp = build_discriminator(cfg, init_seed=1)
    with pytest.raises(ShapeError):
        disc_forward(dp, cfg, np.zeros((1, 2, 24, 24)))
    with pytest.raises(ShapeError):
        disc_forward(dp, cfg, np.zeros((1, 1, 32, 32)))  # channel mismatch


def test_discriminate_dim_mismatch():
    cfg = DiscConfig(base_channels=2)
    dp = build_discriminator(cfg, init_seed=2)
    with pytest.raises(ShapeError):
        discriminate(dp, cfg, np.zeros((1, 1, 32, 32)), np.zeros((1, 1, 16, 16)))


def test_disc_input_gradient_matches_finite_differences():
    # probe loss 0.5*mean((D(x)-1)^2); seed chosen so no pre-activation sits
    # within the finite-difference step of a LReLU kink
    cfg = DiscConfig(base_channels=2)
    dp = build_discriminator(cfg, init_seed=3)
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 2, 16, 16))

    def probe(xx):
        s, _ = disc_forward(dp, cfg, xx, mode="train")
        return float(0.5 * np.mean((s - 1.0) ** 2))

    scores, cache = disc_forward(dp, cfg, x, mode="train")
    _, dx = disc_backward(dp, cfg, cache, (scores - 1.0) / scores.size)
    h = 1e-5
    flat = x.reshape(-1)
    for i in range(0, flat.size, 37):
        orig = flat[i]
        flat[i] = orig + h
        up = probe(x)
        flat[i] = orig - h
        dn = probe(x)
        flat[i] = orig
        fd = (up - dn) / (2 * h)
        g = dx.reshape(-1)[i]
        assert abs(fd - g) / max(abs(fd) + abs(g), 1e-4) < 1e-4


def test_disc_backward_cache_checks():
    cfg = DiscConfig(base_channels=2)
    dp = build_discriminator(cfg, init_seed=4)
    x = np.zeros((1, 2, 16, 16))
    scores, eval_cache = disc_forward(dp, cfg, x, mode="eval")
    with pytest.raises(ShapeError):
        disc_backward(dp, cfg, eval_cache, np.zeros_like(scores))


# -- GAN objectives -----------------------------------------------------------

def test_gan_worked_example():
    half = np.full((1, 1, 2, 2), 0.5)
    d_loss, g_loss, _ = gan_objectives(half, half)
    assert d_loss == 0.25  # 0.5*mean(0.25) + 0.5*mean(0.25)
    assert g_loss == 0.125  # 0.5*mean(0.25)


def test_gan_optimum_is_zero_d_loss():
    ones = np.ones((1, 1, 2, 2))
    zeros = np.zeros((1, 1, 2, 2))
    d_loss, g_loss, _ = gan_objectives(ones, zeros)
    assert d_loss == 0.0
    assert g_loss == 0.5


def test_gan_gradients_are_the_closed_forms():
    rng = np.random.default_rng(7)
    sr = rng.standard_normal((2, 1, 3, 3))
    sf = rng.standard_normal((2, 1, 3, 3))
    _, _, grads = gan_objectives(sr, sf)
    assert np.array_equal(grads.d_wrt_real, (sr - 1.0) / sr.size)
    assert np.array_equal(grads.d_wrt_fake, sf / sf.size)
    assert np.array_equal(grads.g_wrt_fake, (sf - 1.0) / sf.size)


def test_gan_dim_mismatch():
    with pytest.raises(ShapeError):
        gan_objectives(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 3, 3)))
