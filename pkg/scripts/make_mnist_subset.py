"""Write a stratified 2000/1000 MNIST subset as gzipped IDX files.

Source: the 5000-sample MNIST csv bundled in the mlxtend wheel (500 rows
per digit, sorted by label).  Train takes the first 200 rows of each digit,
test the last 100, so the two splits never share an image.

    python scripts/make_mnist_subset.py [--wheel path/to/mlxtend.whl] [--out data/mnist-subset]
"""

from __future__ import annotations

import argparse
import gzip
import io
import zipfile
from pathlib import Path

import numpy as np

from memsnn.data import write_idx

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def read_csv_gz(raw: bytes) -> tuple[np.ndarray, np.ndarray]:
    table = np.loadtxt(io.BytesIO(gzip.decompress(raw)), delimiter=",", dtype=np.int64)
    return table[:, :784].astype(np.uint8), table[:, 784].astype(np.uint8)


def load_source(wheel: Path | None) -> tuple[np.ndarray, np.ndarray]:
    if wheel is not None:
        with zipfile.ZipFile(wheel) as zf:
            return read_csv_gz(zf.read(MEMBER))
    import mlxtend  # optional; only needed without --wheel

    return read_csv_gz((Path(mlxtend.__file__).parent / "data" / "data" / "mnist_5k.csv.gz").read_bytes())


def split(images: np.ndarray, labels: np.ndarray, n_train: int = 200, n_test: int = 100):
    train, test = [], []
    for digit in range(10):
        rows = np.flatnonzero(labels == digit)
        train.extend(rows[:n_train])
        test.extend(rows[-n_test:])
    train, test = np.array(train), np.array(test)
    if np.intersect1d(train, test).size:
        raise SystemExit("not enough samples per digit for disjoint splits")
    return (images[train], labels[train]), (images[test], labels[test])


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--wheel", type=Path)
    parser.add_argument("--out", type=Path, default=Path("data/mnist-subset"))
    args = parser.parse_args(argv)
    images, labels = load_source(args.wheel)
    args.out.mkdir(parents=True, exist_ok=True)
    for prefix, (x, y) in zip(("train", "t10k"), split(images, labels)):
        write_idx(args.out / f"{prefix}-images-idx3-ubyte.gz", x.reshape(-1, 28, 28))
        write_idx(args.out / f"{prefix}-labels-idx1-ubyte.gz", y)
        print(f"{prefix}: {len(y)} samples, counts {np.bincount(y, minlength=10).tolist()}")


if __name__ == "__main__":
    main()
