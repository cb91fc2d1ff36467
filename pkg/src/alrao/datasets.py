"""Desk-scale datasets: Gaussian blobs, IDX image files, normalization, splits."""

from __future__ import annotations

import csv
import gzip
import struct
import warnings
from dataclasses import dataclass

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    xs: np.ndarray
    ys: np.ndarray
    name: str
    n_classes: int

    def __post_init__(self):
        self.xs = np.asarray(self.xs, dtype=np.float64)
        self.ys = np.asarray(self.ys, dtype=np.int64)
        if len(self.xs) != len(self.ys):
            raise ValueError(f"{len(self.xs)} inputs but {len(self.ys)} labels")
        if len(self.ys) and (self.ys.min() < 0 or self.ys.max() >= self.n_classes):
            raise ValueError(f"labels must lie in 0..{self.n_classes - 1}")

    def __len__(self):
        return len(self.ys)

    @property
    def input_shape(self):
        return tuple(self.xs.shape[1:])

    def subset(self, idx, name=None):
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.xs[idx], self.ys[idx], name or self.name, self.n_classes)


def gen_blobs(n_classes, dim, n_per_class, spread, seed):
    """Class-balanced Gaussian clusters around random unit-norm centers."""
    if n_classes < 2 or dim < 1:
        raise ValueError("need n_classes >= 2 and dim >= 1")
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(n_classes, dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    ys = np.repeat(np.arange(n_classes), n_per_class)
    xs = centers[ys] + spread * rng.normal(size=(len(ys), dim))
    return Dataset(xs, ys, f"blobs-k{n_classes}-d{dim}", n_classes)


def _read_bytes(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_header(raw, expected_magic, ndim, path):
    need = 4 + 4 * ndim
    if len(raw) < need:
        raise IdxFormatError(f"{path}: truncated header ({len(raw)} bytes, need {need})")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x} at offset 0, expected 0x{expected_magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:need])
    size = int(np.prod(dims))
    if len(raw) - need != size:
        raise IdxFormatError(
            f"{path}: header at offset 4 declares dims {dims} ({size} bytes) "
            f"but payload from offset {need} has {len(raw) - need} bytes")
    return dims, np.frombuffer(raw, dtype=np.uint8, offset=need)


def load_idx(images_path, labels_path, n_classes=10, name="idx"):
    """Read an IDX image/label pair (optionally gzipped); pixels scaled to [0, 1].

    Images come back as (count, 1, rows, cols).
    """
    (count, rows, cols), pix = _parse_header(_read_bytes(images_path), IDX_IMAGES_MAGIC, 3, images_path)
    (n_labels,), labels = _parse_header(_read_bytes(labels_path), IDX_LABELS_MAGIC, 1, labels_path)
    if count != n_labels:
        raise IdxFormatError(f"{count} images but {n_labels} labels")
    xs = pix.reshape(count, 1, rows, cols).astype(np.float64) / 255.0
    return Dataset(xs, labels.astype(np.int64), name, n_classes)


def write_idx(images_path, labels_path, images, labels, compress=None):
    """Write uint8 images (count, rows, cols) and labels (count,) as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if images.ndim != 3 or len(images) != len(labels):
        raise ValueError("images must be (count, rows, cols) with one label each")
    img = struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape) + images.tobytes()
    lab = struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes()
    for path, raw in ((images_path, img), (labels_path, lab)):
        gz = compress if compress is not None else str(path).endswith(".gz")
        with open(path, "wb") as f:
            f.write(gzip.compress(raw, mtime=0) if gz else raw)


def mean_pool(ds, factor):
    """Downsample (n, c, h, w) images by averaging non-overlapping factor x factor blocks."""
    if factor == 1:
        return ds
    n, c, h, w = ds.xs.shape
    h2, w2 = h // factor, w // factor
    xs = ds.xs[:, :, :h2 * factor, :w2 * factor].reshape(n, c, h2, factor, w2, factor).mean(axis=(3, 5))
    return Dataset(xs, ds.ys, ds.name, ds.n_classes)


@dataclass
class ChannelNorm:
    mean: np.ndarray
    std: np.ndarray

    def __call__(self, xs):
        shape = (1, -1) + (1,) * (xs.ndim - 2)
        return (xs - self.mean.reshape(shape)) / self.std.reshape(shape)

    def apply(self, ds):
        return Dataset(self(ds.xs), ds.ys, ds.name, ds.n_classes)


def normalize_channels(train):
    """Per-channel standardization fitted on the training split only.

    Axis 1 is the channel axis; flat (n, d) inputs treat each coordinate as a channel.
    """
    xs = train.xs if isinstance(train, Dataset) else np.asarray(train, dtype=np.float64)
    if len(xs) == 0:
        raise ValueError("cannot fit normalization on an empty split")
    axes = (0,) + tuple(range(2, xs.ndim))
    mean = xs.mean(axis=axes)
    std = xs.std(axis=axes)
    flat = std == 0
    if np.any(flat):
        warnings.warn(f"{int(flat.sum())} constant channel(s); using std 1", RuntimeWarning, stacklevel=2)
        std = np.where(flat, 1.0, std)
    norm = ChannelNorm(mean, std)
    return norm, {"mean": mean, "std": std}


@dataclass
class SplitSpec:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    seed: int


def split(n_or_dataset, fractions, seed):
    """Seeded shuffle followed by contiguous cuts into train/val/test."""
    n = len(n_or_dataset) if not isinstance(n_or_dataset, (int, np.integer)) else int(n_or_dataset)
    fr = [float(f) for f in fractions]
    if len(fr) != 3 or min(fr) < 0 or abs(sum(fr) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fr[0] * n))
    n_val = min(int(round(fr[1] * n)), n - n_train)
    return SplitSpec(perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:], seed)


def minibatches(n, batch_size, rng):
    """Indices for one epoch: a fresh permutation cut into consecutive batches."""
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def export_csv(ds, path):
    """Flattened features followed by the label, one sample per row."""
    flat = ds.xs.reshape(len(ds), -1)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow([f"x{i}" for i in range(flat.shape[1])] + ["label"])
        for row, label in zip(flat, ds.ys):
            w.writerow([repr(float(v)) for v in row] + [int(label)])
