#!/usr/bin/env python3
"""Writes IDX files from the 10,000 digits bundled in the npm `mnist` package.

Usage: mnist_idx_from_npm.py PACKAGE_DIR OUT_DIR

PACKAGE_DIR is an unpacked `npm pack mnist` tarball (the directory holding
src/digits/*.json). Every tenth sample of each digit goes to the test split.
Output files follow the standard MNIST names and layout.
"""

import json
import struct
import sys
from pathlib import Path


def write_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    if len(sys.argv) != 3:
        sys.exit(__doc__)
    package, out = Path(sys.argv[1]), Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    splits = {"train": ([], []), "t10k": ([], [])}
    for digit in range(10):
        raw = json.loads((package / "src" / "digits" / f"{digit}.json").read_text())["data"]
        for i in range(len(raw) // 784):
            pixels = [max(0, min(255, round(v * 255))) for v in raw[i * 784 : (i + 1) * 784]]
            images, labels = splits["t10k" if i % 10 == 9 else "train"]
            images.append(pixels)
            labels.append(digit)
    for name, (images, labels) in splits.items():
        write_images(out / f"{name}-images-idx3-ubyte", images)
        write_labels(out / f"{name}-labels-idx1-ubyte", labels)
        print(f"{name}: {len(images)} images")


if __name__ == "__main__":
    main()
