"""Build the bundled digits-0/1 IDX fixture from mlxtend's 5000-sample MNIST extract.

Usage: pip install mlxtend && python3 scripts/make_mnist01.py [outdir]

The extract holds 500 images per digit. Each digit is split 400 train /
100 test by a fixed permutation, giving 800 training and 200 test images.
"""

import sys
from pathlib import Path

import numpy as np
from mlxtend.data import mnist_data

from dynloss.data import write_idx


def main(out="data/mnist01"):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    x, y = mnist_data()
    rng = np.random.default_rng(20240601)
    train, test = [], []
    for digit in (0, 1):
        idx = rng.permutation(np.flatnonzero(y == digit))
        train.append(idx[:400])
        test.append(idx[400:])
    for name, parts in (("train", train), ("t10k", test)):
        idx = np.sort(np.concatenate(parts))
        images = x[idx].reshape(-1, 28, 28).astype(np.uint8)
        write_idx(out / f"{name}-images-idx3-ubyte.gz", images)
        write_idx(out / f"{name}-labels-idx1-ubyte.gz", y[idx].astype(np.uint8))
        print(name, images.shape)


if __name__ == "__main__":
    main(*sys.argv[1:])
