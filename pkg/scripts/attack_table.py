"""Mean change metrics of FGSM/PGD quality and rate attacks for each checkpoint (one CSV row each)."""

import argparse
import csv
import sys
from pathlib import Path

from advlic.codec import load_checkpoint
from advlic.config import AttackConfig
from advlic.defense import evaluate_robustness
from advlic.samples import test_batch


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("checkpoints", nargs="+", type=Path)
    ap.add_argument("--methods", nargs="+", default=["fgsm", "pgd"])
    ap.add_argument("--count", type=int, default=None, help="first N test images")
    args = ap.parse_args()

    ids, x = test_batch(count=args.count)
    items = list(zip(ids, x))
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["checkpoint", "lam", "method", "target", "bpp_change", "psnr_change", "msssim_change"])
    for path in args.checkpoints:
        model = load_checkpoint(path)
        for method in args.methods:
            for target in ("quality", "rate"):
                s = evaluate_robustness(model, items, AttackConfig.default(method, target), model.lam)
                w.writerow([path.name, model.lam, method, target, f"{s.mean_bpp_change:.4f}",
                            f"{s.mean_psnr_change:.4f}", f"{s.mean_msssim_change:.4f}"])
                sys.stdout.flush()


if __name__ == "__main__":
    main()
