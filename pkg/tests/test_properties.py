"""Properties that only hold for trained codecs (shares the session-trained models)."""

import numpy as np
import pytest

from advlic import autodiff as ad
from advlic.attacks import attack_loss_quality, gradient_heatmap, top_share
from advlic.codec import Mode, codec_forward, evaluate
from advlic.config import AttackConfig, Target
from advlic.defense import pgd_train
from advlic.metrics import psnr
from conftest import RECIPE

pytestmark = pytest.mark.slow


def test_quality_attack_lowers_psnr_on_most_images(trained, test_set):
    summary, _, _ = trained.robustness("low", "quality", test_set)
    share = np.mean([r.psnr_adv < r.psnr_orig for r in summary.records])
    assert share >= 0.9


def test_rate_attack_raises_bpp_on_most_images(trained, test_set):
    summary, _, _ = trained.robustness("low", "rate", test_set)
    share = np.mean([r.bpp_change > 1 for r in summary.records])
    assert share >= 0.9


@pytest.mark.parametrize("target", ["quality", "rate"])
def test_pgd_loss_mostly_non_decreasing(trained, test_set, target):
    _, results, _ = trained.robustness("low", target, test_set)
    steps = np.concatenate([np.diff(r.loss_trajectory) for r in results])
    assert np.mean(steps >= 0) >= 0.9


@pytest.mark.parametrize("target", ["quality", "rate"])
def test_adversarial_heatmaps_concentrate(trained, test_set, target):
    model = trained["low"]
    _, results, _ = trained.robustness("low", target, test_set)
    clean, adv = [], []
    for (_, x), res in zip(test_set, results):
        x = x[None]
        clean.append(top_share(gradient_heatmap(model, x, Target(target))))
        adv.append(top_share(gradient_heatmap(model, res.x_adv, Target(target), reference=x)))
    assert np.mean(adv) > np.mean(clean)


def test_quality_gradient_nonzero_on_natural_image(trained, test_set):
    x = test_set[0][1][None]
    _, grad = ad.input_gradient(lambda t: attack_loss_quality(trained["low"], t, x), x)
    assert np.max(np.abs(grad)) > 0


def test_train_and_eval_rate_agree_after_training(trained, test_set):
    model = trained["low"]
    x = np.stack([im for _, im in test_set])
    with ad.no_grad():
        train_bpp = codec_forward(model, x, Mode.TRAIN, np.random.default_rng(0)).bpp
        eval_bpp = codec_forward(model, x, Mode.EVAL).bpp
    assert abs(train_bpp - eval_bpp) / eval_bpp < 0.5


def test_lambda_grid_trades_rate_for_distortion(trained, test_set):
    x = np.stack([im for _, im in test_set])
    evals = [evaluate(trained[q], x, trained[q].lam) for q in ("low", "mid", "high")]
    bpps, mses = [e.bpp for e in evals], [e.mse for e in evals]
    assert bpps == sorted(bpps)
    assert mses == sorted(mses, reverse=True)


def test_rate_target_defense_lowers_adversarial_cost(trained, test_set):
    model = trained["low"].copy()
    cfg = RECIPE.replace(lam=model.lam, learning_rate=1e-4, max_epochs=3, lr_decay_at=None,
                         attack=AttackConfig.default("pgd", "rate", max_steps=10))
    _, rep = pgd_train(model, trained.patches, cfg, eval_set=test_set[:8],
                       eval_attack=AttackConfig.default("pgd", "rate"))
    assert rep.finetuning_effect_adv < 0


def test_transfer_inputs_stay_within_budget(trained, test_set):
    # one-step FGSM at eps = 7/255 keeps the input PSNR in the ~30 dB range
    from advlic.attacks import fgsm_attack
    from advlic.config import Method
    eps = 7 / 255
    x = test_set[0][1][None]
    res = fgsm_attack(trained["low"], x, AttackConfig(Method.FGSM, "quality", epsilon=eps, step_size=eps,
                                                      max_steps=1))
    assert np.max(np.abs(res.x_adv - x)) <= eps + 1e-6
    assert psnr(x, res.x_adv) >= 20 * np.log10(1 / eps) - 1e-6
