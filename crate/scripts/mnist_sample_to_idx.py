"""Convert the 5,000-image MNIST sample shipped in the mlxtend wheel to IDX files.

Usage: python3 scripts/mnist_sample_to_idx.py path/to/mlxtend-*.whl data/mnist-5k
(obtain the wheel with `pip download --no-deps mlxtend`)
"""
import gzip
import io
import struct
import sys
import zipfile

import numpy as np


def main(wheel, out_dir):
    with zipfile.ZipFile(wheel) as z:
        raw = gzip.decompress(z.read("mlxtend/data/data/mnist_5k.csv.gz"))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",")
    images = table[:, :-1].astype(np.uint8)
    labels = table[:, -1].astype(np.uint8)
    n = images.shape[0]
    with open(f"{out_dir}/images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x803, n, 28, 28))
        f.write(images.tobytes())
    with open(f"{out_dir}/labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x801, n))
        f.write(labels.tobytes())


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
