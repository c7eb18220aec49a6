import numpy as np
import pytest

from advlic import autodiff as ad
from advlic.attacks import attack_loss_quality, attack_loss_rate
from advlic.codec import (Adam, CheckpointError, CodecInputError, CodecModel, Mode, TrainingDivergedError,
                          codec_forward, evaluate, load_checkpoint, rd_loss, save_checkpoint,
                          train_baseline)
from advlic.config import TrainingConfig
from advlic.entropy import bpp_from_likelihoods


@pytest.mark.parametrize("variant", ["factorized", "hyperprior"])
def test_zero_input_shape_and_finite_rate(variant):
    model = CodecModel.create(variant, 100.0, seed=0)
    with ad.no_grad():
        r = codec_forward(model, np.zeros((1, 3, 64, 64), np.float32), Mode.EVAL)
    assert r.x_hat.shape == (1, 3, 64, 64)
    assert np.isfinite(r.bpp) and r.bpp > 0


@pytest.mark.parametrize("variant", ["factorized", "hyperprior"])
def test_eval_is_deterministic_and_likelihoods_valid(variant, rng):
    model = CodecModel.create(variant, 100.0, seed=3)
    x = rng.uniform(size=(2, 3, 32, 32)).astype(np.float32)
    with ad.no_grad():
        a = codec_forward(model, x, Mode.EVAL)
        b = codec_forward(model, x, Mode.EVAL)
    assert np.array_equal(a.x_hat.data, b.x_hat.data) and a.bpp == b.bpp
    assert 0 <= a.x_hat.data.min() and a.x_hat.data.max() <= 1
    for p in a.likelihoods():
        assert np.all(p.data > 0) and np.all(p.data <= 1)
    expected = bpp_from_likelihoods(a.likelihoods(), 2 * 32 * 32).item()
    assert a.bpp == expected
    if variant == "hyperprior":
        y_only = bpp_from_likelihoods([a.y_likelihoods], 2 * 32 * 32).item()
        assert y_only != a.bpp
    else:
        assert a.z_likelihoods is None


def test_input_validation():
    model = CodecModel.create("factorized", 1.0)
    with pytest.raises(CodecInputError, match="pad"):
        codec_forward(model, np.zeros((1, 3, 60, 64), np.float32))
    with pytest.raises(CodecInputError):
        codec_forward(model, np.full((1, 3, 64, 64), 1.5, np.float32))
    with pytest.raises(ValueError):
        codec_forward(model, np.zeros((1, 3, 64, 64), np.float32), Mode.TRAIN)


def test_rd_loss_definition(rng):
    model = CodecModel.create("factorized", 1.0)
    x = rng.uniform(size=(1, 3, 32, 32)).astype(np.float32)
    with ad.no_grad():
        r = codec_forward(model, x, Mode.EVAL)
    mse = float(np.mean((r.x_hat.data.astype(np.float64) - x) ** 2))
    assert rd_loss(x, r, 10.0).item() == pytest.approx(r.bpp + 10.0 * mse, rel=1e-5)
    with pytest.raises(ValueError):
        rd_loss(x, r, 0.0)


def test_attack_losses_share_forward(rng):
    model = CodecModel.create("hyperprior", 1.0)
    x = rng.uniform(size=(1, 3, 32, 32)).astype(np.float32)
    with ad.no_grad():
        r = codec_forward(model, x, Mode.EVAL)
        assert attack_loss_rate(model, x).item() == r.bpp
        assert attack_loss_quality(model, x, x).item() == pytest.approx(
            float(np.mean((r.x_hat.data - x) ** 2)), rel=1e-6)


def test_training_is_deterministic(small_patches):
    cfg = TrainingConfig(batch_size=16, learning_rate=1e-3, max_epochs=2, patch_size=32, lam=100.0, seed=4)
    runs = []
    for _ in range(2):
        model = CodecModel.create("factorized", 100.0, seed=4)
        _, hist = train_baseline(model, small_patches[:32], cfg)
        runs.append((model.state(), hist))
    assert repr(runs[0][1]) == repr(runs[1][1])  # epoch 0 carries a NaN train loss
    for k, v in runs[0][0].items():
        assert np.array_equal(v, runs[1][0][k])


def test_lr_step_decay(small_patches, monkeypatch):
    cfg = TrainingConfig(batch_size=16, max_epochs=4, patch_size=32, lam=100.0, lr_decay_at=0.5)
    assert cfg.decay_epoch() == 3 and TrainingConfig().decay_epoch() is None
    calls = []
    real = Adam.scale_lr
    monkeypatch.setattr(Adam, "scale_lr", lambda opt, f: (calls.append((f, list(opt.lrs))), real(opt, f)))
    model = CodecModel.create("factorized", 100.0)
    _, hist = train_baseline(model, small_patches[:16], cfg)
    assert len(calls) == 1 and calls[0][0] == 0.1
    assert min(calls[0][1]) == pytest.approx(cfg.learning_rate)
    with pytest.raises(ValueError):
        TrainingConfig(lr_decay_at=0.0)


def test_training_reduces_loss(quick_model, small_patches):
    fresh = CodecModel.create("factorized", 650.25, seed=0)
    assert evaluate(quick_model, small_patches, 650.25).loss < evaluate(fresh, small_patches, 650.25).loss


def test_quick_model_has_input_gradient(quick_model, small_patches):
    x = small_patches[:1]
    _, g = ad.input_gradient(lambda t: attack_loss_quality(quick_model, t, x), x)
    assert np.max(np.abs(g)) > 0


def test_divergence_names_epoch(small_patches):
    model = CodecModel.create("factorized", 100.0)
    cfg = TrainingConfig(batch_size=16, learning_rate=1e9, max_epochs=3, patch_size=32, lam=1e12)
    with pytest.raises(TrainingDivergedError) as info:
        train_baseline(model, small_patches[:32], cfg)
    assert info.value.epoch >= 1


@pytest.mark.parametrize("variant", ["factorized", "hyperprior"])
def test_checkpoint_round_trip(tmp_path, variant, rng):
    model = CodecModel.create(variant, 3251.25, seed=7)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    back = load_checkpoint(path)
    assert back.variant == model.variant and back.lam == model.lam
    x = rng.uniform(size=(1, 3, 32, 32)).astype(np.float32)
    with ad.no_grad():
        assert np.array_equal(codec_forward(model, x).x_hat.data, codec_forward(back, x).x_hat.data)


def test_checkpoint_corruption(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(CodecModel.create("factorized"), path)
    raw = path.read_bytes()
    (tmp_path / "short.ckpt").write_bytes(raw[:100])
    (tmp_path / "bad.ckpt").write_bytes(b"garbage" + raw)
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "short.ckpt")
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "bad.ckpt")
