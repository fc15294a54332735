"""Convert the 10,000 MNIST digits bundled in the `mnist` npm package into IDX files.

Usage:
    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    python3 scripts/mnist_from_npm.py package/src/digits data/mnist

The npm package stores each digit class as a flat JSON array of intensities
already divided by 255 and rounded to three decimals; multiplying by 255 and
rounding recovers the original bytes. Samples are shuffled with a fixed seed
and split 8,000 / 2,000 into train and test files (gzipped IDX, same layout
as the official distribution).
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path


def write_idx_images(path, images):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))


def write_idx_labels(path, labels):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    src, dst = Path(sys.argv[1]), Path(sys.argv[2])
    dst.mkdir(parents=True, exist_ok=True)
    samples = []
    for digit in range(10):
        flat = json.loads((src / f"{digit}.json").read_text())["data"]
        assert len(flat) % 784 == 0
        for i in range(len(flat) // 784):
            px = [min(255, max(0, round(v * 255))) for v in flat[i * 784:(i + 1) * 784]]
            samples.append((px, digit))
    random.Random(20181011).shuffle(samples)
    train, test = samples[:8000], samples[8000:]
    write_idx_images(dst / "train-images-idx3-ubyte.gz", [s[0] for s in train])
    write_idx_labels(dst / "train-labels-idx1-ubyte.gz", [s[1] for s in train])
    write_idx_images(dst / "t10k-images-idx3-ubyte.gz", [s[0] for s in test])
    write_idx_labels(dst / "t10k-labels-idx1-ubyte.gz", [s[1] for s in test])
    print(f"wrote {len(train)} train / {len(test)} test samples to {dst}")


if __name__ == "__main__":
    main()
