"""One-step FGSM transfer from a learned codec to the block-DCT codec at several Q values."""

import argparse
import sys
from pathlib import Path

from advlic.codec import load_checkpoint
from advlic.config import AttackConfig, Method
from advlic.conventional import DctCodecConfig, transfer_attack_eval
from advlic.samples import test_batch


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("checkpoint", type=Path)
    ap.add_argument("--q", type=int, nargs="+", default=[20, 40])
    ap.add_argument("--color", default="ycbcr", choices=["ycbcr", "rgb"])
    ap.add_argument("--entropy", default="band", choices=["band", "pooled"])
    args = ap.parse_args()

    model = load_checkpoint(args.checkpoint)
    _, x = test_batch()
    eps = 7 / 255
    header = True
    for q in args.q:
        for target in ("quality", "rate"):
            fgsm = AttackConfig(Method.FGSM, target, epsilon=eps, step_size=eps, max_steps=1)
            table = transfer_attack_eval(model, list(x), fgsm, DctCodecConfig(q, color=args.color,
                                                                               entropy=args.entropy))
            lines = table.to_csv().splitlines(keepends=True)
            sys.stdout.write("".join(lines if header else lines[1:]))
            header = False


if __name__ == "__main__":
    main()
