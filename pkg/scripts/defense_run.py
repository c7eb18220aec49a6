"""PGD adversarial finetuning of one checkpoint; prints the defense table."""

import argparse
import logging
from pathlib import Path

from advlic.codec import load_checkpoint, save_checkpoint
from advlic.config import AttackConfig, TrainingConfig
from advlic.defense import pgd_train
from advlic.samples import test_batch, training_patches


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("checkpoint", type=Path)
    ap.add_argument("--target", default="quality", choices=["quality", "rate"])
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--lr", type=float, default=1e-4)
    ap.add_argument("--inner-steps", type=int, default=10, help="PGD steps while training (40 = full)")
    ap.add_argument("--out", type=Path, default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    model = load_checkpoint(args.checkpoint)
    ids, x = test_batch()
    cfg = TrainingConfig(batch_size=16, learning_rate=args.lr, max_epochs=args.epochs, patch_size=64,
                         lam=model.lam, val_fraction=0.0,
                         attack=AttackConfig.default("pgd", args.target, max_steps=args.inner_steps))
    model, report = pgd_train(model, training_patches(64), cfg, eval_set=list(zip(ids, x)),
                              eval_attack=AttackConfig.default("pgd", args.target))
    print(report.to_csv(), end="")
    if args.out:
        save_checkpoint(model, args.out)


if __name__ == "__main__":
    main()
