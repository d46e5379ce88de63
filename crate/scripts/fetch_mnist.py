#!/usr/bin/env python3
"""Write a 5000-digit MNIST pool as IDX files.

The digits come from the `mlxtend` wheel (500 samples per class, taken from
the original MNIST training set). Without network access to the original
distribution this is the easiest source reachable through a package mirror.

Usage: python3 scripts/fetch_mnist.py [out_dir]   (default: data/mnist)
"""
import gzip
import io
import pathlib
import struct
import subprocess
import sys
import tempfile
import zipfile


def main() -> None:
    out = pathlib.Path(sys.argv[1] if len(sys.argv) > 1 else "data/mnist")
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "mlxtend==0.24.0", "--no-deps", "-d", tmp, "-q"],
            check=True,
        )
        wheel = next(pathlib.Path(tmp).glob("mlxtend-*.whl"))
        with zipfile.ZipFile(wheel) as zf:
            raw = zf.read("mlxtend/data/data/mnist_5k.csv.gz")
    rows = gzip.open(io.BytesIO(raw)).read().decode().strip().splitlines()
    images = bytearray()
    labels = bytearray()
    for line in rows:
        vals = [int(float(v)) for v in line.split(",")]
        images.extend(bytes(vals[:784]))
        labels.append(vals[784])
    n = len(rows)
    (out / "train-images-idx3-ubyte").write_bytes(struct.pack(">IIII", 0x803, n, 28, 28) + bytes(images))
    (out / "train-labels-idx1-ubyte").write_bytes(struct.pack(">II", 0x801, n) + bytes(labels))
    print(f"wrote {n} digits to {out}")


if __name__ == "__main__":
    main()
