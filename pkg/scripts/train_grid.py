"""Train one factorized codec per lambda grid point (low/mid/high) on the sample corpus."""

import argparse
import logging
import time
from pathlib import Path

from advlic.codec import CodecModel, evaluate, save_checkpoint, train_baseline
from advlic.config import QUALITY_LAMBDAS, TrainingConfig
from advlic.samples import test_batch, training_patches


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out", type=Path)
    ap.add_argument("--epochs", type=int, default=300)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--variant", default="factorized", choices=["factorized", "hyperprior"])
    ap.add_argument("--qualities", nargs="+", default=list(QUALITY_LAMBDAS))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--lr-decay-at", type=float, default=0.8, help="share of epochs before a 10x lr drop")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    patches = training_patches(64, seed=args.seed)
    for quality in args.qualities:
        lam = QUALITY_LAMBDAS[quality]
        cfg = TrainingConfig(batch_size=16, learning_rate=args.lr, max_epochs=args.epochs, patch_size=64,
                             lam=lam, seed=args.seed, val_fraction=0.0, lr_decay_at=args.lr_decay_at)
        model = CodecModel.create(args.variant, lam, seed=args.seed)
        start = time.perf_counter()
        _, history = train_baseline(model, patches, cfg)
        path = args.out / f"{args.variant}_{quality}.ckpt"
        save_checkpoint(model, path)
        test = evaluate(model, test_batch()[1], lam)
        print(f"{quality}: lambda {lam:g}, test bpp {test.bpp:.3f}, mse {test.mse:.5f}, "
              f"{time.perf_counter() - start:.0f}s -> {path}")


if __name__ == "__main__":
    main()
