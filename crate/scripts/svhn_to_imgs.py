#!/usr/bin/env python3
"""Convert an SVHN cropped-digits .mat file (train_32x32.mat, test_32x32.mat)
into the IMGS1 container read by `sena`.

Labels are kept as stored in the .mat file (1..10, where 10 is the digit 0),
so the container declares 11 classes and class 0 is never used.

    python3 scripts/svhn_to_imgs.py train_32x32.mat svhn_train.imgs
"""

import struct
import sys

import numpy as np
from scipy.io import loadmat

N_CLASSES = 11


def convert(src, dst):
    mat = loadmat(src)
    x = mat["X"]  # 32 x 32 x 3 x N, uint8
    y = mat["y"].reshape(-1).astype(np.uint16)
    n = x.shape[3]
    if y.shape[0] != n:
        raise SystemExit(f"{src}: {n} images but {y.shape[0]} labels")
    if y.min() < 1 or y.max() >= N_CLASSES:
        raise SystemExit(f"{src}: labels outside 1..10")
    chw = np.ascontiguousarray(x.transpose(3, 2, 0, 1)).astype(np.uint8)  # N x 3 x 32 x 32
    records = np.empty((n, 2 + 3 * 32 * 32), dtype=np.uint8)
    records[:, :2] = y.astype("<u2").view(np.uint8).reshape(n, 2)
    records[:, 2:] = chw.reshape(n, -1)
    with open(dst, "wb") as f:
        f.write(b"IMGS1")
        f.write(struct.pack("<II", n, N_CLASSES))
        f.write(records.tobytes())
    print(f"{dst}: {n} records, {N_CLASSES} classes")


if __name__ == "__main__":
    if len(sys.argv) != 3:
        raise SystemExit(__doc__)
    convert(sys.argv[1], sys.argv[2])
