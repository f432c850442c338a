#!/usr/bin/env python3
"""Build an IDX-format MNIST subset from the digits bundled in the npm `mnist` package.

The package ships 10,000 handwritten MNIST digits as JSON arrays of 28x28
row-major pixels scaled to [0, 1]. They are rescaled to bytes and written as a
single images/labels IDX pair, shuffled with a fixed seed.

Usage: scripts/fetch_mnist_subset.py [OUT_DIR]   (default: data/mnist)
"""
import json
import os
import random
import struct
import subprocess
import sys
import tarfile
import tempfile

SIDE = 28


def main():
    out_dir = sys.argv[1] if len(sys.argv) > 1 else "data/mnist"
    os.makedirs(out_dir, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(["npm", "pack", "mnist@1.1.0"], cwd=tmp, check=True,
                       stdout=subprocess.DEVNULL)
        with tarfile.open(os.path.join(tmp, "mnist-1.1.0.tgz")) as tar:
            tar.extractall(tmp)
        samples = []
        for digit in range(10):
            path = os.path.join(tmp, "package", "src", "digits", f"{digit}.json")
            with open(path) as fh:
                data = json.load(fh)["data"]
            size = SIDE * SIDE
            for start in range(0, len(data) - size + 1, size):
                pixels = bytes(min(255, max(0, round(v * 255))) for v in data[start:start + size])
                samples.append((digit, pixels))

    random.Random(20190101).shuffle(samples)
    images = os.path.join(out_dir, "images-idx3-ubyte")
    labels = os.path.join(out_dir, "labels-idx1-ubyte")
    with open(images, "wb") as fh:
        fh.write(struct.pack(">IIII", 0x00000803, len(samples), SIDE, SIDE))
        for _, pixels in samples:
            fh.write(pixels)
    with open(labels, "wb") as fh:
        fh.write(struct.pack(">II", 0x00000801, len(samples)))
        fh.write(bytes(label for label, _ in samples))
    print(f"wrote {len(samples)} samples to {images} and {labels}")


if __name__ == "__main__":
    main()
