"""White-box signed-gradient attacks on a codec's reconstruction or rate.

Both attacks ascend the attack loss using the gradient with respect to the
current adversarial image, with the codec in eval mode (hard rounding with
straight-through gradients).
"""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .codec import Mode, codec_forward
from .config import AttackConfig, Method, Target
from .metrics import psnr

log = logging.getLogger(__name__)

# float32 slack when testing the budget: x + eps - x can exceed eps by an ulp
BUDGET_TOL = 1e-6


# ---------------------------------------------------------------- losses


def attack_loss_quality(model, x_adv, x) -> ad.Tensor:
    """MSE between the reconstruction of ``x_adv`` and the original ``x`` (mean reduction)."""
    result = codec_forward(model, x_adv, Mode.EVAL)
    return ad.mse(result.x_hat, ad.as_tensor(x))


def attack_loss_rate(model, x_adv) -> ad.Tensor:
    """Estimated bits per pixel of ``x_adv``, including side information when present."""
    return codec_forward(model, x_adv, Mode.EVAL).rate


def loss_fn(model, x: np.ndarray, target: Target) -> Callable[[ad.Tensor], ad.Tensor]:
    target = Target(target)
    if target is Target.QUALITY:
        return lambda t: attack_loss_quality(model, t, x)
    return lambda t: attack_loss_rate(model, t)


# ---------------------------------------------------------------- attacks


@dataclass
class AttackResult:
    x_adv: np.ndarray
    loss_trajectory: list[float]
    steps_taken: int
    linf: float
    zero_gradient: bool = False
    seconds: float = 0.0
    input_psnr: float = field(default=float("inf"))


def _finish(x, x_adv, traj, steps, zero, start) -> AttackResult:
    return AttackResult(x_adv, traj, steps, float(np.max(np.abs(x_adv - x))) if x.size else 0.0,
                        zero, time.perf_counter() - start, psnr(x, x_adv))


def fgsm_attack(model, x, cfg: AttackConfig) -> AttackResult:
    """Iterative FGSM: repeated ``delta * sign(grad)`` steps inside an L-inf ball.

    Iteration stops after ``max_steps`` steps or as soon as the next step would
    leave the ``epsilon`` ball; that step is discarded, so the budget always
    holds. With ``max_steps=1`` and ``step_size=epsilon`` this is classic
    single-step FGSM.
    """
    if cfg.method is not Method.FGSM:
        raise ValueError("fgsm_attack needs an FGSM config")
    start = time.perf_counter()
    x = np.asarray(x, dtype=np.float32)
    f = loss_fn(model, x, cfg.target)
    x_adv = x.copy()
    traj: list[float] = []
    steps, zero = 0, False
    for t in range(cfg.max_steps):
        value, grad = ad.input_gradient(f, x_adv)
        traj.append(value)
        if t == 0 and not np.any(grad):
            zero = True
            log.warning("fgsm: gradient is zero everywhere at the first step")
        candidate = np.clip(x_adv + cfg.step_size * np.sign(grad), 0, 1)
        if np.max(np.abs(candidate - x)) > cfg.epsilon + BUDGET_TOL:
            break
        x_adv = candidate
        steps += 1
    return _finish(x, x_adv, traj, steps, zero, start)


def pgd_init(x: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    """Random start: ``x + U(-epsilon, epsilon)`` drawn from ``default_rng(cfg.seed)``, clipped to [0, 1]."""
    rng = np.random.default_rng(cfg.seed)
    alpha = rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape).astype(np.float32)
    return np.clip(x + alpha, 0, 1)


def pgd_attack(model, x, cfg: AttackConfig) -> AttackResult:
    """PGD: random start, then ``max_steps`` signed steps projected onto the epsilon ball."""
    if cfg.method is not Method.PGD:
        raise ValueError("pgd_attack needs a PGD config")
    start = time.perf_counter()
    x = np.asarray(x, dtype=np.float32)
    f = loss_fn(model, x, cfg.target)
    x_adv = pgd_init(x, cfg)
    traj: list[float] = []
    zero = False
    for t in range(cfg.max_steps):
        value, grad = ad.input_gradient(f, x_adv)
        traj.append(value)
        if t == 0 and not np.any(grad):
            zero = True
            log.warning("pgd: gradient is zero everywhere at the first step")
        noise = np.clip(x_adv + cfg.step_size * np.sign(grad) - x, -cfg.epsilon, cfg.epsilon)
        x_adv = np.clip(x + noise, 0, 1)
    return _finish(x, x_adv, traj, cfg.max_steps, zero, start)


def run_attack(model, x, cfg: AttackConfig) -> AttackResult:
    result = (fgsm_attack if cfg.method is Method.FGSM else pgd_attack)(model, x, cfg)
    log.info("%s/%s attack: %d steps, linf %.5f, %.2fs", cfg.method.value, cfg.target.value,
             result.steps_taken, result.linf, result.seconds)
    return result


# ---------------------------------------------------------------- heatmaps


def gradient_heatmap(model, x, target: Target, reference=None) -> np.ndarray:
    """Per-pixel max over channels of ``|d loss / d x|``, scaled so the maximum is 1.

    ``x`` is one image (3 x H x W or 1 x 3 x H x W). The quality loss compares
    against ``reference`` (default: ``x`` itself), so the map of an adversarial
    image is taken with respect to the original. An all-zero gradient gives an
    all-zero map.
    """
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[0] != 1:
        raise ValueError(f"gradient_heatmap takes a single image, got shape {x.shape}")
    ref = x if reference is None else np.asarray(reference, dtype=np.float32).reshape(x.shape)
    _, grad = ad.input_gradient(loss_fn(model, ref, target), x)
    mag = np.abs(grad[0]).max(axis=0)
    peak = mag.max()
    return mag / peak if peak > 0 else np.zeros_like(mag)


def top_share(heatmap: np.ndarray, fraction: float = 0.05) -> float:
    """Share of total heatmap mass held by the largest ``fraction`` of pixels."""
    flat = np.sort(np.asarray(heatmap, dtype=np.float64).ravel())[::-1]
    total = flat.sum()
    if total == 0:
        return 0.0
    k = max(1, int(round(fraction * flat.size)))
    return float(flat[:k].sum() / total)


def trajectories_to_csv(items: list[tuple[str, AttackResult]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["image_id", "step", "loss"])
    for image_id, res in items:
        for step, loss in enumerate(res.loss_trajectory):
            w.writerow([image_id, step, repr(float(loss))])
    return buf.getvalue()
