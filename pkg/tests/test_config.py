import math

import pytest

from advlic.config import (AttackConfig, ConfigError, ExperimentConfig, Method, QUALITY_LAMBDAS, Target,
                           TrainingConfig, parse_config_text)


def test_attack_defaults():
    pgd = AttackConfig.default("pgd")
    assert (pgd.max_steps, pgd.step_size, pgd.epsilon) == (40, 0.01, 0.03)
    fgsm = AttackConfig.default("fgsm", "rate")
    assert fgsm.step_size == 1e-4 and fgsm.epsilon == pytest.approx(7 / 255) and fgsm.target is Target.RATE


def test_lambda_grid():
    assert QUALITY_LAMBDAS["low"] == pytest.approx(0.01 * 255 ** 2)
    assert QUALITY_LAMBDAS["high"] == pytest.approx(0.25 * 255 ** 2)


def test_parse_config_text():
    vals = parse_config_text("# header\nepsilon = 7/255\nmethod=fgsm  # inline\n\n")
    assert vals == {"epsilon": "7/255", "method": "fgsm"}
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config_text("seed = 1\nseed = 2")
    with pytest.raises(ConfigError, match="line 1"):
        parse_config_text("just words")


def test_experiment_config_update_and_attack():
    cfg = ExperimentConfig().update({"method": "fgsm", "epsilon": "7/255", "lam": "high", "fast": "yes"})
    assert cfg.method is Method.FGSM and math.isclose(cfg.epsilon, 7 / 255)
    assert cfg.lam == QUALITY_LAMBDAS["high"]
    assert cfg.attack().max_steps == 300  # fast mode only shortens PGD
    assert ExperimentConfig(fast=True).attack().max_steps == 10
    with pytest.raises(ConfigError, match="unknown"):
        ExperimentConfig().update({"epsilonn": "1"})
    with pytest.raises(ConfigError):
        ExperimentConfig().update({"lam": "-1"})
    with pytest.raises(ConfigError):
        ExperimentConfig().update({"early_stopping": "maybe"})


def test_to_text_round_trips():
    cfg = ExperimentConfig().update({"target": "rate", "seed": "9", "lam": "650.25"})
    again = ExperimentConfig().update(parse_config_text(cfg.to_text()))
    assert again == cfg


def test_training_config_validation():
    with pytest.raises(ValueError):
        TrainingConfig(patch_size=60)
    with pytest.raises(ValueError):
        TrainingConfig(batch_size=0)
    assert ExperimentConfig().training().lam == QUALITY_LAMBDAS["mid"]
    assert ExperimentConfig().update({"lr_decay_at": "0.8"}).training().decay_epoch() == 161
