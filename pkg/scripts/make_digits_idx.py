"""Build the 2,000-image handwritten-digit IDX subset shipped in src/alrao/data/.

Source: the 5,000-sample MNIST extract (28x28, 500 per digit) bundled in
the mlxtend wheel as mlxtend/data/data/mnist_5k.csv.gz. We take 200 images
per digit with a seeded choice and write gzipped IDX files.

    python scripts/make_digits_idx.py [--wheel mlxtend-*.whl]
"""

import argparse
import glob
import gzip
import io
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

import numpy as np

from alrao.datasets import write_idx

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def fetch_wheel(dest):
    subprocess.run([sys.executable, "-m", "pip", "download", "--no-deps", "-q", "-d", dest, "mlxtend"],
                   check=True)
    return glob.glob(f"{dest}/mlxtend-*.whl")[0]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--wheel")
    ap.add_argument("--per-class", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "src" / "alrao" / "data"))
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        wheel = args.wheel or fetch_wheel(tmp)
        raw = gzip.decompress(zipfile.ZipFile(wheel).read(MEMBER))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",", dtype=np.int64)
    pixels, labels = table[:, :-1], table[:, -1]

    rng = np.random.default_rng(args.seed)
    idx = np.concatenate([rng.choice(np.flatnonzero(labels == d), args.per_class, replace=False)
                          for d in range(10)])
    idx = idx[rng.permutation(len(idx))]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = len(idx)
    write_idx(out / f"digits{n}-images-idx3-ubyte.gz", out / f"digits{n}-labels-idx1-ubyte.gz",
              pixels[idx].reshape(n, 28, 28), labels[idx])
    print(f"wrote {n} images to {out}")


if __name__ == "__main__":
    main()
