"""Write the bundled sample corpus (training tiles + held-out test crops) as PNG files."""

import argparse
from pathlib import Path

from advlic.samples import write_sample_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("root", type=Path)
    ap.add_argument("--tile", type=int, default=80)
    ap.add_argument("--test-size", type=int, default=128)
    args = ap.parse_args()
    train, test = write_sample_dataset(args.root, args.tile, args.test_size)
    print(f"{len(list(train.iterdir()))} training tiles in {train}")
    print(f"{len(list(test.iterdir()))} test images in {test}")


if __name__ == "__main__":
    main()
