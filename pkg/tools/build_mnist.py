"""Build the bundled MNIST subset (gzipped IDX files) from two public
redistributions: the 5000-sample CSV shipped in the mlxtend wheel (training
split) and the ~10k digits of the ``mnist`` npm package (validation split, minus the images it shares with the training split).

usage: python tools/build_mnist.py MLXTEND_WHEEL NPM_PACKAGE_DIR OUT_DIR
"""

import gzip
import io
import json
import os
import struct
import sys
import zipfile

import numpy as np


def write_idx(path, arr):
    arr = np.ascontiguousarray(arr, dtype=np.uint8)
    code = 0x08
    header = struct.pack(">HBB", 0, code, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    with gzip.GzipFile(path, "wb", mtime=0) as fh:
        fh.write(header + arr.tobytes())


def mlxtend_train(wheel):
    with zipfile.ZipFile(wheel) as z:
        raw = gzip.decompress(z.read("mlxtend/data/data/mnist_5k.csv.gz"))
    data = np.loadtxt(io.BytesIO(raw), delimiter=",", dtype=np.int64)
    return data[:, :-1].reshape(-1, 28, 28), data[:, -1]


def npm_digits(pkg_dir):
    images, labels = [], []
    for d in range(10):
        with open(os.path.join(pkg_dir, "src", "digits", f"{d}.json")) as fh:
            v = np.asarray(json.load(fh)["data"], dtype=np.float64)
        px = np.rint(v * 255).reshape(-1, 28, 28)
        images.append(px)
        labels.append(np.full(len(px), d))
    return np.concatenate(images), np.concatenate(labels)


def main(argv):
    wheel, pkg_dir, out = argv
    os.makedirs(out, exist_ok=True)
    xtr, ytr = mlxtend_train(wheel)
    xva, yva = npm_digits(pkg_dir)
    # interleave classes deterministically so that prefixes are balanced
    order = np.lexsort((yva, np.arange(len(yva)) - np.searchsorted(yva, yva)))
    xva, yva = xva[order], yva[order]
    # the npm digits include every mlxtend sample; keep only the rest
    seen = {x.tobytes() for x in xtr.astype(np.uint8)}
    fresh = np.array([x.tobytes() not in seen for x in xva.astype(np.uint8)])
    xva, yva = xva[fresh], yva[fresh]
    print(f"train {xtr.shape} val {xva.shape} (dropped {int((~fresh).sum())} shared images)")
    write_idx(os.path.join(out, "train-images-idx3-ubyte.gz"), xtr)
    write_idx(os.path.join(out, "train-labels-idx1-ubyte.gz"), ytr)
    write_idx(os.path.join(out, "val-images-idx3-ubyte.gz"), xva)
    write_idx(os.path.join(out, "val-labels-idx1-ubyte.gz"), yva)


if __name__ == "__main__":
    main(sys.argv[1:])
