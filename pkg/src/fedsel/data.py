"""Dataset loaders: IDX (MNIST / Fashion-MNIST), CIFAR-10 binary batches,
synthetic Gaussian blobs and the desk-scale presets built on them."""

from __future__ import annotations

import gzip
import importlib.util
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049
CIFAR_RECORD = 1 + 3 * 32 * 32

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass
class Dataset:
    samples: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.samples.ndim != 2:
            raise ValueError(f"samples must be 2-D, got shape {self.samples.shape}")
        if len(self.samples) == 0:
            raise ValueError("dataset is empty")
        if len(self.labels) != len(self.samples):
            raise ValueError("samples and labels differ in length")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels outside [0, {self.num_classes})")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("samples contain non-finite values")

    def __len__(self):
        return len(self.labels)

    @property
    def n_features(self) -> int:
        return self.samples.shape[1]

    def subset(self, idx, name: str | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.samples[idx], self.labels[idx], self.num_classes,
                       self.name if name is None else name)


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise FormatError(f"corrupt gzip stream ({exc})", path=path) from None
    return raw


def _idx_header(raw: bytes, magic: int, ndims: int, path) -> tuple[int, ...]:
    need = 4 * (1 + ndims)
    if len(raw) < need:
        raise FormatError(f"truncated IDX header: need {need} bytes, have {len(raw)}",
                          offset=len(raw), path=path)
    got = struct.unpack(">i", raw[:4])[0]
    if got != magic:
        raise FormatError(f"bad IDX magic {got}, expected {magic}", offset=0, path=path)
    return struct.unpack(">" + "i" * ndims, raw[4:need])


def read_idx_images(path) -> np.ndarray:
    """uint8 array of shape (count, rows * cols)."""
    raw = _read_bytes(path)
    count, rows, cols = _idx_header(raw, IDX_IMAGES_MAGIC, 3, path)
    body = count * rows * cols
    if len(raw) - 16 < body:
        raise FormatError(f"truncated image data: header promises {count} images of "
                          f"{rows}x{cols}", offset=len(raw), path=path)
    if len(raw) - 16 > body:
        raise FormatError("trailing bytes after image data", offset=16 + body, path=path)
    return np.frombuffer(raw, dtype=np.uint8, count=body, offset=16).reshape(count, rows * cols)


def read_idx_labels(path) -> np.ndarray:
    raw = _read_bytes(path)
    (count,) = _idx_header(raw, IDX_LABELS_MAGIC, 1, path)
    if len(raw) - 8 < count:
        raise FormatError(f"truncated label data: header promises {count} labels",
                          offset=len(raw), path=path)
    if len(raw) - 8 > count:
        raise FormatError("trailing bytes after label data", offset=8 + count, path=path)
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=8)


def load_idx(images_path, labels_path, num_classes: int = 10, name: str = "idx") -> Dataset:
    """Load an IDX image/label pair. Pixels are scaled to [0, 1]; gzip input
    is detected from its magic bytes."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise FormatError(f"image count {len(images)} != label count {len(labels)}",
                          offset=4, path=labels_path)
    if len(labels) and labels.max() >= num_classes:
        raise FormatError(f"label {labels.max()} outside [0, {num_classes})",
                          offset=8 + int(np.argmax(labels >= num_classes)), path=labels_path)
    return Dataset(images / 255.0, labels.astype(np.int64), num_classes, name)


def load_cifar10(paths: Sequence, name: str = "cifar10") -> Dataset:
    """Load CIFAR-10 binary batches (1 label byte + 3072 channel-major pixel bytes)."""
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    xs, ys = [], []
    for p in paths:
        raw = _read_bytes(p)
        if len(raw) == 0 or len(raw) % CIFAR_RECORD:
            raise FormatError(f"file size {len(raw)} is not a multiple of {CIFAR_RECORD}",
                              offset=len(raw) - len(raw) % CIFAR_RECORD, path=p)
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        bad = np.nonzero(rec[:, 0] >= 10)[0]
        if bad.size:
            raise FormatError(f"label {rec[bad[0], 0]} outside [0, 10)",
                              offset=int(bad[0]) * CIFAR_RECORD, path=p)
        ys.append(rec[:, 0].astype(np.int64))
        xs.append(rec[:, 1:] / 255.0)
    return Dataset(np.concatenate(xs), np.concatenate(ys), 10, name)


def synth_blobs(n: int, k: int, d: int = 2, separation: float = 4.0, seed: int = 0,
                name: str = "blobs") -> Dataset:
    """``k`` unit-variance Gaussian blobs whose means sit ``separation`` apart
    along the first axis. Labels cycle 0..k-1 so classes are balanced.

    Coordinates are not rescaled to [0, 1]; the blob geometry is the point.
    """
    if n < k:
        raise ValueError(f"need n >= k, got n={n}, k={k}")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % k
    means = np.zeros((k, d))
    means[:, 0] = separation * np.arange(k)
    samples = means[labels] + rng.standard_normal((n, d))
    return Dataset(samples, labels, k, name)


def first_per_class(ds: Dataset, per_class: int, skip: int = 0) -> np.ndarray:
    """Indices of samples ``skip .. skip+per_class`` of each class, in file order."""
    out = []
    for c in range(ds.num_classes):
        idx = np.nonzero(ds.labels == c)[0][skip:skip + per_class]
        out.append(idx)
    return np.sort(np.concatenate(out))


# ---------------------------------------------------------------------------
# presets

def _find_idx_pair(data_dir: Path, split: str):
    img, lab = MNIST_FILES[split]
    for suffix in ("", ".gz"):
        a, b = data_dir / (img + suffix), data_dir / (lab + suffix)
        if a.exists() and b.exists():
            return a, b
    return None


def bundled_mnist_sample_path() -> Path | None:
    """Path of the 5000-sample MNIST CSV shipped with mlxtend, if installed."""
    spec = importlib.util.find_spec("mlxtend")
    if spec is None or spec.origin is None:
        return None
    p = Path(spec.origin).parent / "data" / "data" / "mnist_5k.csv.gz"
    return p if p.exists() else None


def load_bundled_mnist_sample() -> Dataset:
    p = bundled_mnist_sample_path()
    if p is None:
        raise FileNotFoundError(
            "no MNIST IDX files found and the bundled 5k MNIST sample (mlxtend) is not "
            "installed; pass data_dir or install the 'mnist-sample' extra")
    with gzip.open(p, "rt") as fh:
        arr = np.loadtxt(fh, delimiter=",")
    return Dataset(arr[:, :-1] / 255.0, arr[:, -1].astype(np.int64), 10, "mnist-5k")


def mnist_subset(data_dir=None, train_per_class: int = 1000, test_per_class: int = 200,
                 fashion: bool = False) -> tuple[Dataset, Dataset]:
    """Desk-scale MNIST: first ``train_per_class`` training and first
    ``test_per_class`` test images of every class (10k / 2k by default).

    ``data_dir`` (or ``$FEDSEL_MNIST_DIR`` / ``$FEDSEL_FASHION_DIR``) must
    hold the four standard IDX files. For plain MNIST without IDX files the
    5000-image sample bundled with mlxtend is used instead, split 400 / 100
    per class.
    """
    env = "FEDSEL_FASHION_DIR" if fashion else "FEDSEL_MNIST_DIR"
    name = "fashion-subset" if fashion else "mnist-subset"
    data_dir = data_dir or os.environ.get(env)
    if data_dir:
        d = Path(data_dir)
        tr, te = _find_idx_pair(d, "train"), _find_idx_pair(d, "test")
        if tr is None or te is None:
            raise FileNotFoundError(f"IDX files not found in {d}")
        train, test = load_idx(*tr, name=name), load_idx(*te, name=name)
        return (train.subset(first_per_class(train, train_per_class)),
                test.subset(first_per_class(test, test_per_class)))
    if fashion:
        raise FileNotFoundError(f"Fashion-MNIST needs data_dir or ${env}")
    full = load_bundled_mnist_sample()
    tr_n = min(train_per_class, 400)
    te_n = min(test_per_class, 500 - tr_n)
    return (full.subset(first_per_class(full, tr_n), name="mnist-5k"),
            full.subset(first_per_class(full, te_n, skip=tr_n), name="mnist-5k"))


def cifar_subset(data_dir=None, train_per_class: int = 1000,
                 test_per_class: int = 200) -> tuple[Dataset, Dataset]:
    data_dir = data_dir or os.environ.get("FEDSEL_CIFAR_DIR")
    if not data_dir:
        raise FileNotFoundError("CIFAR-10 needs data_dir or $FEDSEL_CIFAR_DIR")
    d = Path(data_dir)
    train = load_cifar10([d / f"data_batch_{i}.bin" for i in range(1, 6)], "cifar-subset")
    test = load_cifar10([d / "test_batch.bin"], "cifar-subset")
    return (train.subset(first_per_class(train, train_per_class)),
            test.subset(first_per_class(test, test_per_class)))


def blobs_preset(n_train: int = 2000, n_test: int = 500, k: int = 4, d: int = 8,
                 separation: float = 2.5, seed: int = 0) -> tuple[Dataset, Dataset]:
    full = synth_blobs(n_train + n_test, k, d, separation, seed)
    idx = np.arange(n_train + n_test)
    return full.subset(idx[:n_train]), full.subset(idx[n_train:])


def load_preset(name: str, data_dir=None) -> tuple[Dataset, Dataset]:
    if name == "mnist-subset":
        return mnist_subset(data_dir)
    if name == "fashion-subset":
        return mnist_subset(data_dir, fashion=True)
    if name == "cifar-subset":
        return cifar_subset(data_dir)
    if name == "blobs":
        return blobs_preset()
    raise ValueError(f"unknown dataset preset {name!r}")


PRESET_IMAGE_SHAPES = {
    "mnist-subset": (1, 28, 28),
    "fashion-subset": (1, 28, 28),
    "cifar-subset": (3, 32, 32),
}
