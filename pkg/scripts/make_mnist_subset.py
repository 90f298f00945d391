"""Write the 5000-digit MNIST sample bundled with mlxtend as gzipped IDX files.

The full MNIST download is not always reachable, so the package ships this
subset (500 images per class) as package data under ``src/jacshield/data/mnist5k``.  Run once:

    pip download --no-deps mlxtend -d /tmp/wheels
    python scripts/make_mnist_subset.py /tmp/wheels/mlxtend-*.whl src/jacshield/data/mnist5k
"""

import gzip
import struct
import sys
import zipfile
from pathlib import Path

import numpy as np


def main(wheel, out_dir):
    with zipfile.ZipFile(wheel) as zf:
        raw = gzip.decompress(zf.read("mlxtend/data/data/mnist_5k.csv.gz"))
    table = np.loadtxt(raw.decode().splitlines(), delimiter=",", dtype=np.int64)
    images = table[:, :-1].astype(np.uint8).reshape(-1, 28, 28)
    labels = table[:, -1].astype(np.uint8)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = struct.pack(">IIII", 2051, len(images), 28, 28)
    # mtime=0 keeps the archives byte-stable across regenerations
    with gzip.GzipFile(out / "images-idx3-ubyte.gz", "wb", mtime=0) as fh:
        fh.write(header + images.tobytes())
    with gzip.GzipFile(out / "labels-idx1-ubyte.gz", "wb", mtime=0) as fh:
        fh.write(struct.pack(">II", 2049, len(labels)) + labels.tobytes())
    print(f"wrote {len(images)} images to {out}")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
