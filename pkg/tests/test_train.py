"""Adam optimizer, training loop, validation metrics, history persistence."""

import dataclasses
import math

import numpy as np
import pytest

import pics.train
from pics.data import DatasetManifest, load_pair
from pics.errors import DataError, ShapeError
from pics.imagecore import load_raster
from pics.losses import DiscConfig, LossConfig
from pics.nn import UNetConfig, load_checkpoint
from pics.train import (EpochRecord, TrainConfig, TrainHistory, adam_init,
                        adam_step, identity_checkpoint, load_history_csv,
                        train_model, validate)
from conftest import pearson, rows_equal


# -- Adam ---------------------------------------------------------------------

def test_adam_zero_gradient_keeps_params():
    params = {"w": np.array([1.0, -2.0, 3.0])}
    grads = {"w": np.zeros(3)}
    state = adam_init(params)
    new_p, new_s = adam_step(params, grads, state, TrainConfig(epochs=1))
    assert np.array_equal(new_p["w"], params["w"])
    assert new_s["t"] == 1


def test_adam_first_step_is_signed_lr():
    # after bias correction the first update is lr * g / (|g| + eps)
    cfg = TrainConfig(epochs=1, lr=0.01)
    g = np.array([0.5, -0.25, 4.0])
    params = {"w": np.zeros(3)}
    new_p, _ = adam_step(params, {"w": g}, adam_init(params), cfg)
    expected = -cfg.lr * g / (np.abs(g) + cfg.adam_eps)
    assert np.allclose(new_p["w"], expected, atol=1e-15)


def test_adam_is_pure():
    params = {"w": np.array([1.0, 2.0])}
    grads = {"w": np.array([0.3, -0.7])}
    state = adam_init(params)
    cfg = TrainConfig(epochs=1)
    p1, s1 = adam_step(params, grads, state, cfg)
    p2, s2 = adam_step(params, grads, state, cfg)
    assert np.array_equal(p1["w"], p2["w"])
    assert np.array_equal(s1["m"]["w"], s2["m"]["w"])
    assert np.array_equal(params["w"], np.array([1.0, 2.0]))
    assert state["t"] == 0


def test_adam_two_steps_track_reference_formula():
    cfg = TrainConfig(epochs=1, lr=0.1)
    params = {"w": np.array([0.0])}
    state = adam_init(params)
    g1, g2 = np.array([1.0]), np.array([-2.0])
    params, state = adam_step(params, {"w": g1}, state, cfg)
    params, state = adam_step(params, {"w": g2}, state, cfg)
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    m = (1 - b1) * (b1 * g1 + g2) / (1 - b1 ** 2)
    v = (1 - b2) * (b2 * g1 ** 2 + g2 ** 2) / (1 - b2 ** 2)
    w_ref = -cfg.lr * g1 / (np.abs(g1) + eps) - cfg.lr * m / (np.sqrt(v) + eps)
    assert np.allclose(params["w"], w_ref, atol=1e-14)


def test_adam_rejects_mismatches():
    params = {"w": np.zeros(2)}
    state = adam_init(params)
    cfg = TrainConfig(epochs=1)
    with pytest.raises(ShapeError):
        adam_step(params, {"v": np.zeros(2)}, state, cfg)
    with pytest.raises(ShapeError):
        adam_step(params, {"w": np.zeros(3)}, state, cfg)


# -- history ------------------------------------------------------------------

def test_history_csv_roundtrip(tmp_path):
    hist = TrainHistory()
    hist.records.append(EpochRecord(
        epoch=1, train_l1=0.5, train_rho_loss=float("nan"),
        train_gan_g=float("nan"), train_gan_d=float("nan"),
        val_l1=0.25, val_rho=0.75, seconds=1.5))
    hist.records.append(EpochRecord(
        epoch=2, train_l1=0.25, train_rho_loss=0.1,
        train_gan_g=0.2, train_gan_d=0.3,
        val_l1=0.125, val_rho=0.875, seconds=2.5))
    p = tmp_path / "hist.csv"
    hist.save_csv(p)
    back = load_history_csv(p)
    assert rows_equal(back.rows(), hist.rows())
    assert back.records[1].epoch == 2


def test_history_rejects_wrong_columns(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("epoch,loss\n0,0.5\n")
    with pytest.raises(DataError):
        load_history_csv(p)


# -- validation and the identity baseline --------------------------------------

def test_identity_checkpoint_stats_and_metrics(tiny_ds):
    _, manifest = tiny_ds
    cfg = UNetConfig(depth=2, base_channels=4)
    ckpt = identity_checkpoint(cfg, manifest, "tau")
    assert ckpt.meta["identity_baseline"] is True
    assert ckpt.meta["channel"] == "tau"
    assert np.all(ckpt.model.params["final.w"] == 0.0)

    train_phases = np.concatenate(
        [load_raster(r.phase_path).pixels.ravel()
         for r in manifest.records_for("train")])
    assert math.isclose(ckpt.input_mean, float(np.mean(train_phases)),
                        rel_tol=0, abs_tol=1e-12)
    assert math.isclose(ckpt.input_std, float(np.std(train_phases)),
                        rel_tol=0, abs_tol=1e-12)

    # with the identity network, predicted correlation is the raw
    # phase-to-stain correlation of each validation field
    metrics = validate(ckpt, manifest, "val")
    for rec in manifest.records_for("val"):
        phase, label = load_pair(rec, "tau")
        want = pearson(phase.pixels, label.pixels)
        got = metrics["per_field_rho"][rec.field_id]
        assert abs(got - want) < 1e-9
    assert abs(metrics["mean_rho"] -
               float(np.mean(list(metrics["per_field_rho"].values())))) < 1e-12


def test_validate_is_repeatable(tiny_ds):
    _, manifest = tiny_ds
    ckpt = identity_checkpoint(UNetConfig(depth=2, base_channels=4),
                               manifest, "map2")
    a = validate(ckpt, manifest, "val")
    b = validate(ckpt, manifest, "val")
    assert a["mean_l1"] == b["mean_l1"] and a["mean_rho"] == b["mean_rho"]


def test_empty_split_rejected(tiny_ds):
    _, manifest = tiny_ds
    stripped = dataclasses.replace(
        manifest,
        records=tuple(dataclasses.replace(r, map2_path=None)
                      for r in manifest.records))
    with pytest.raises(DataError, match="train"):
        train_model(stripped, "map2", UNetConfig(depth=2, base_channels=2),
                    TrainConfig(epochs=1))


# -- training loop ------------------------------------------------------------

def test_train_model_runs_and_checkpoints(tiny_ds, tmp_path):
    _, manifest = tiny_ds
    net = UNetConfig(depth=2, base_channels=4)
    cfg = TrainConfig(epochs=2, lr=1e-3, seed=0)
    out = tmp_path / "model.pics"
    ckpt, history = train_model(manifest, "tau", net, cfg, out_path=out)
    assert len(history.records) == 2
    assert ckpt.meta["channel"] == "tau"
    best_epoch = max(history.records, key=lambda r: r.val_rho)
    assert ckpt.meta["epoch"] == best_epoch.epoch
    assert all(math.isnan(r.train_gan_g) for r in history.records)

    saved = load_checkpoint(out)
    assert validate(saved, manifest, "val") == validate(
        dataclasses.replace(
            ckpt,
            model=type(ckpt.model)(
                {k: v.astype(np.float32).astype(np.float64)
                 for k, v in ckpt.model.params.items()},
                {k: v.astype(np.float32).astype(np.float64)
                 for k, v in ckpt.model.stats.items()})),
        manifest, "val")


def test_train_model_is_deterministic(tiny_ds):
    _, manifest = tiny_ds
    net = UNetConfig(depth=2, base_channels=2)
    cfg = TrainConfig(epochs=2, lr=1e-3, seed=42,
                      loss=LossConfig(kind="l1_pearson"))
    ck_a, hist_a = train_model(manifest, "tau", net, cfg)
    ck_b, hist_b = train_model(manifest, "tau", net, cfg)
    assert rows_equal(hist_a.key_rows(), hist_b.key_rows())
    va = validate(ck_a, manifest, "val")
    vb = validate(ck_b, manifest, "val")
    assert va["mean_rho"] == vb["mean_rho"] and va["mean_l1"] == vb["mean_l1"]


def test_train_model_gan_smoke(tiny_ds):
    _, manifest = tiny_ds
    net = UNetConfig(depth=2, base_channels=2)
    cfg = TrainConfig(epochs=1, lr=1e-3, seed=1,
                      loss=LossConfig(kind="l1_gan"),
                      disc=DiscConfig(base_channels=2))
    _, history = train_model(manifest, "map2", net, cfg)
    rec = history.records[0]
    assert math.isfinite(rec.train_gan_g) and math.isfinite(rec.train_gan_d)
    assert math.isnan(rec.train_rho_loss)


def test_non_finite_loss_aborts(tiny_ds, monkeypatch):
    _, manifest = tiny_ds

    def bad_l1(pred, target):
        return float("nan"), np.zeros_like(pred)

    monkeypatch.setattr(pics.train, "l1_loss", bad_l1)
    with pytest.raises(DataError, match="non-finite loss"):
        train_model(manifest, "tau", UNetConfig(depth=2, base_channels=2),
                    TrainConfig(epochs=1))


def test_manifest_reload_keeps_training_inputs(tiny_ds):
    root, manifest = tiny_ds
    again = DatasetManifest.load(f"{root}/manifest.json")
    assert [r.field_id for r in again.records] == \
        [r.field_id for r in manifest.records]
