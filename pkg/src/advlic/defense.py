"""PGD adversarial finetuning and robustness evaluation.

Each training loop takes one optimizer step on a clean minibatch, crafts its
adversarial counterpart with PGD against the current model, and takes a second
step on that. Adversarial images are added to the training stream rather than
replacing the clean ones.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .attacks import run_attack
from .codec import (CodecModel, Mode, TrainingDivergedError, as_patchset, batches, codec_forward,
                    evaluate, make_optimizer, rd_loss, save_checkpoint)
from .config import AttackConfig, Method, Target, TrainingConfig
from .metrics import EvalRecord, rd_cost_change

log = logging.getLogger(__name__)


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# ---------------------------------------------------------------- evaluation


@dataclass
class RobustnessSummary:
    records: list[EvalRecord]
    mean_rd_cost_orig: float
    mean_rd_cost_adv: float
    mean_bpp_change: float
    mean_psnr_change: float
    mean_msssim_change: float

    def attack_effect(self, target: Target) -> float:
        """PSNR change for the quality target, bpp change for the rate target."""
        return self.mean_psnr_change if Target(target) is Target.QUALITY else self.mean_bpp_change


def _mean_defined(values: list[float]) -> float:
    kept = [v for v in values if not math.isnan(v)]
    return float(np.mean(kept)) if kept else math.nan


def _as_items(test_set) -> list[tuple[str, np.ndarray]]:
    if isinstance(test_set, np.ndarray):
        if test_set.ndim != 4:
            raise ValueError("test set array must be N x 3 x H x W")
        return [(str(i), test_set[i:i + 1]) for i in range(len(test_set))]
    items = []
    for i, item in enumerate(test_set):
        if isinstance(item, tuple):
            image_id, img = item
        elif hasattr(item, "pixels"):
            image_id, img = item.id, item.chw()
        else:
            image_id, img = str(i), item
        img = np.asarray(img, dtype=np.float32)
        items.append((image_id, img.reshape(1, *img.shape[-3:])))
    return items


def evaluate_image(model, image_id: str, x: np.ndarray, attack_cfg: AttackConfig, lam: float,
                   variant: str = "") -> tuple[EvalRecord, "AttackResult"]:
    with ad.no_grad():
        clean = codec_forward(model, x, Mode.EVAL)
    res = run_attack(model, x, attack_cfg)
    with ad.no_grad():
        adv = codec_forward(model, res.x_adv, Mode.EVAL)
    rec = EvalRecord.build(image_id, x, clean.x_hat.data, adv.x_hat.data, clean.bpp, adv.bpp, lam,
                           method=attack_cfg.method.value, target=attack_cfg.target.value,
                           variant=variant)
    return rec, res


def evaluate_robustness(model, test_set, attack_cfg: AttackConfig, lam: float, workers: int = 1,
                        keep_results: list | None = None) -> RobustnessSummary:
    """Attack every test image and score clean and adversarial reconstructions.

    Image ``i`` is attacked with seed ``attack_cfg.seed + i``, so results do not
    depend on ``workers``. When ``keep_results`` is a list, the per-image
    :class:`AttackResult` objects are appended to it in test-set order.
    """
    items = _as_items(test_set)
    if not items:
        raise ValueError("empty test set")
    variant = getattr(getattr(model, "variant", ""), "value", "")

    def one(i: int):
        image_id, x = items[i]
        return evaluate_image(model, image_id, x, attack_cfg.replace(seed=attack_cfg.seed + i), lam, variant)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            outputs = list(pool.map(one, range(len(items))))
    else:
        outputs = [one(i) for i in range(len(items))]
    records = [rec for rec, _ in outputs]
    if keep_results is not None:
        keep_results.extend(res for _, res in outputs)
    return RobustnessSummary(
        records,
        float(np.mean([r.rd_cost_orig for r in records])),
        float(np.mean([r.rd_cost_adv for r in records])),
        float(np.mean([r.bpp_change for r in records])),
        float(np.mean([r.psnr_change for r in records])),
        _mean_defined([r.msssim_change for r in records]),
    )


# ---------------------------------------------------------------- training


@dataclass
class DefenseReport:
    target: str
    rd_cost_clean_pre: float
    rd_cost_clean_post: float
    rd_cost_adv_pre: float
    rd_cost_adv_post: float
    attack_effect_pre: float
    attack_effect_post: float
    finetuning_effect_clean: float
    finetuning_effect_adv: float
    epochs_run: int = 0
    optimizer_steps: int = 0
    history: list[dict] = field(default_factory=list)

    def __post_init__(self):
        for name in ("rd_cost_clean_pre", "rd_cost_clean_post", "rd_cost_adv_pre", "rd_cost_adv_post",
                     "attack_effect_pre", "attack_effect_post", "finetuning_effect_clean",
                     "finetuning_effect_adv"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"defense report entry {name} is not finite")

    @classmethod
    def from_summaries(cls, target: Target, pre: RobustnessSummary, post: RobustnessSummary,
                       **extra) -> "DefenseReport":
        return cls(Target(target).value, pre.mean_rd_cost_orig, post.mean_rd_cost_orig,
                   pre.mean_rd_cost_adv, post.mean_rd_cost_adv,
                   pre.attack_effect(target), post.attack_effect(target),
                   rd_cost_change(pre.mean_rd_cost_orig, post.mean_rd_cost_orig),
                   rd_cost_change(pre.mean_rd_cost_adv, post.mean_rd_cost_adv), **extra)

    def to_csv(self) -> str:
        """Rows: pretrained, finetuned, finetuning_effect (relative R-D cost change)."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["target", "row", "attack_effect", "rd_cost_clean", "rd_cost_adv", "rd_cost_loss"])
        for row, eff, clean, adv in (
                ("pretrained", self.attack_effect_pre, self.rd_cost_clean_pre, self.rd_cost_adv_pre),
                ("finetuned", self.attack_effect_post, self.rd_cost_clean_post, self.rd_cost_adv_post)):
            w.writerow([self.target, row, repr(eff), repr(clean), repr(adv),
                        repr(rd_cost_change(clean, adv))])
        w.writerow([self.target, "finetuning_effect", "", repr(self.finetuning_effect_clean),
                    repr(self.finetuning_effect_adv), ""])
        return buf.getvalue()


def adversarial_batch(model, xb: np.ndarray, attack: AttackConfig, seed: int) -> np.ndarray:
    if attack.method is not Method.PGD:
        raise ValueError("adversarial training uses PGD")
    try:
        return run_attack(model, xb, attack.replace(seed=seed)).x_adv
    except FloatingPointError as exc:
        raise RuntimeError(f"inner PGD attack failed: {exc}") from exc


def pgd_train(model: CodecModel, dataset, cfg: TrainingConfig, eval_set=None,
              from_scratch: bool = False, eval_attack: AttackConfig | None = None,
              on_batch: Callable[[int, int, np.ndarray, np.ndarray], None] | None = None,
              ) -> tuple[CodecModel, DefenseReport]:
    """Finetune ``model`` in place with interleaved clean and PGD minibatches.

    ``eval_set`` (default: the held-out validation images) is attacked with
    ``eval_attack`` (default ``cfg.attack``) before and after finetuning to fill
    the report, so a fast inner attack can be scored with the full one. With
    ``from_scratch`` the weights are re-initialized first.
    """
    patches = as_patchset(dataset, seed=cfg.seed)
    if len(patches) == 0:
        raise ValueError("empty dataset")
    if from_scratch:
        fresh = CodecModel.create(model.variant, cfg.lam, seed=cfg.seed)
        for name, t in model.named_parameters().items():
            t.data[...] = fresh.named_parameters()[name].data
    train, val = patches.split(cfg.val_fraction, cfg.seed)
    val_x = val.epoch(0) if len(val) else train.epoch(0)
    eval_items = eval_set if eval_set is not None else val_x
    attack = cfg.attack
    target = attack.target
    scoring = eval_attack or attack
    if scoring.target is not target:
        raise ValueError("eval_attack must share the training attack's target")

    pre = evaluate_robustness(model, eval_items, scoring, cfg.lam)
    opt = make_optimizer(model, cfg.learning_rate)
    model.lam = cfg.lam
    history: list[dict] = []
    best, stale, epochs_run = math.inf, 0, 0
    for epoch in range(1, cfg.max_epochs + 1):
        if epoch == cfg.decay_epoch():
            opt.scale_lr(cfg.lr_decay)
        xs = train.epoch(epoch)
        rng = np.random.default_rng([cfg.seed, epoch])
        clean_losses, adv_losses, worst_linf = [], [], 0.0
        for bi, idx in enumerate(batches(len(xs), cfg.batch_size, rng)):
            xb = xs[idx]
            try:
                _step(model, opt, xb, xb, cfg.lam, rng)
                xb_adv = adversarial_batch(model, xb, attack, _derived_seed(cfg.seed, epoch, bi))
                _step(model, opt, xb_adv, xb, cfg.lam, rng)
            except FloatingPointError as exc:
                raise TrainingDivergedError(epoch, bi, str(exc)) from exc
            worst_linf = max(worst_linf, float(np.max(np.abs(xb_adv - xb))))
            if on_batch:
                on_batch(epoch, bi, xb, xb_adv)
            with ad.no_grad():
                clean_losses.append(rd_loss(xb, codec_forward(model, xb, Mode.EVAL), cfg.lam).item())
                adv_losses.append(rd_loss(xb, codec_forward(model, xb_adv, Mode.EVAL), cfg.lam).item())
        if not all(map(math.isfinite, clean_losses + adv_losses)):
            raise TrainingDivergedError(epoch, None, "validation loss is not finite")
        epochs_run = epoch
        entry = dict(epoch=epoch, batch_clean_loss=float(np.mean(clean_losses)),
                     batch_adv_loss=float(np.mean(adv_losses)), adv_linf_max=worst_linf,
                     optimizer_steps=opt.t)
        if cfg.early_stopping:
            clean_val = evaluate(model, val_x, cfg.lam, cfg.batch_size).loss
            adv_val = evaluate(model, adversarial_batch(model, val_x, attack, _derived_seed(cfg.seed, epoch, -1)),
                               cfg.lam, cfg.batch_size).loss
            entry["val_loss"] = clean_val + adv_val
        history.append(entry)
        log.info("defense epoch %d: clean %.4f adv %.4f", epoch, entry["batch_clean_loss"], entry["batch_adv_loss"])
        if cfg.checkpoint_every and cfg.checkpoint_dir and epoch % cfg.checkpoint_every == 0:
            save_checkpoint(model, Path(cfg.checkpoint_dir) / f"defense_epoch{epoch:04d}.ckpt")
        if cfg.early_stopping:
            if entry["val_loss"] < best:
                best, stale = entry["val_loss"], 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    log.info("early stop at epoch %d", epoch)
                    break
    post = evaluate_robustness(model, eval_items, scoring, cfg.lam)
    report = DefenseReport.from_summaries(target, pre, post, epochs_run=epochs_run,
                                          optimizer_steps=opt.t, history=history)
    return model, report


def _step(model, opt, x_in: np.ndarray, x_ref: np.ndarray, lam: float, rng) -> float:
    """One optimizer step on R-D loss of ``x_in`` measured against ``x_ref``."""
    model.zero_grad()
    result = codec_forward(model, x_in, Mode.TRAIN, rng)
    loss = rd_loss(x_ref, result, lam)
    loss.backward()
    opt.step()
    value = loss.item()
    if not math.isfinite(value):
        raise FloatingPointError("loss is not finite")
    return value
