#!/usr/bin/env python3
"""Convert public OOD digit/image test sets into the raw tensor container
consumed by the training engine (see README, "Dataset layout").

  usps      usps.h5 (HDF5 with train/ and test/ groups of flattened
            16x16 grayscale images) -> 1x16x16 float tensors
  svhn      test_32x32.mat (Stanford cropped-digit release; labels use
            10 for digit zero) -> 3x32x32 float tensors
  cifar101  cifar10.1_v6_data.npy + cifar10.1_v6_labels.npy
            -> 3x32x32 float tensors

Each output file stores images scaled to [0, 1]; resizing/grayscale
conversion happens at load time through the preprocess spec in the run
config, not here.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from ossl.data import LabeledImageSet, save_raw_tensor


def _save(images, labels, name, out, class_count=10):
    images = np.ascontiguousarray(images, dtype=np.float32)
    ds = LabeledImageSet(images, np.asarray(labels, dtype=np.int64),
                         name, "ood_test", class_count)
    save_raw_tensor(ds, out)
    print(f"wrote {len(ds)} images {images.shape[1:]} -> {out}")


def convert_usps(args):
    import h5py
    with h5py.File(args.input, "r") as fh:
        grp = fh[args.split]
        data = np.asarray(grp["data"], dtype=np.float32)
        labels = np.asarray(grp["target"], dtype=np.int64)
    data = data.reshape(-1, 1, 16, 16)
    lo, hi = float(data.min()), float(data.max())
    if lo < 0.0 or hi > 1.0:      # some releases store [-1, 1]
        data = (data - lo) / (hi - lo)
    _save(data, labels, "usps", args.out)


def convert_svhn(args):
    from scipy.io import loadmat
    mat = loadmat(args.input)
    # stored H x W x C x N with labels 1..10, 10 meaning digit zero
    data = np.transpose(mat["X"], (3, 2, 0, 1)).astype(np.float32) / 255.0
    labels = mat["y"].reshape(-1).astype(np.int64) % 10
    _save(data, labels, "svhn", args.out)


def convert_cifar101(args):
    data = np.load(args.input)                       # N x 32 x 32 x 3 uint8
    labels = np.load(args.labels).astype(np.int64)
    data = np.transpose(data, (0, 3, 1, 2)).astype(np.float32) / 255.0
    _save(data, labels, "cifar10.1", args.out)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("usps")
    p.add_argument("input", help="path to usps.h5")
    p.add_argument("out")
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.set_defaults(fn=convert_usps)

    p = sub.add_parser("svhn")
    p.add_argument("input", help="path to test_32x32.mat")
    p.add_argument("out")
    p.set_defaults(fn=convert_svhn)

    p = sub.add_parser("cifar101")
    p.add_argument("input", help="path to cifar10.1_v6_data.npy")
    p.add_argument("labels", help="path to cifar10.1_v6_labels.npy")
    p.add_argument("out")
    p.set_defaults(fn=convert_cifar101)

    args = parser.parse_args(argv)
    args.fn(args)


if __name__ == "__main__":
    main()
