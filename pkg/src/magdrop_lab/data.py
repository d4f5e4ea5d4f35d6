"""Dataset loaders and the seeded batch pipeline.

IDX (MNIST) layout, all integers big-endian::

    offset 0   uint32 magic   0x00000803 images / 0x00000801 labels
    offset 4   uint32 count
    offset 8   uint32 rows, uint32 cols     (images only)
    then       count * rows * cols  unsigned bytes, row-major

Files may be gzip-compressed; compression is detected from the content.

CIFAR-10 binary layout: a flat sequence of 3073-byte records, one label
byte followed by 3072 pixel bytes (1024 red, 1024 green, 1024 blue, each
a row-major 32x32 plane).

Pixels are scaled by 1/255 into [0, 1] with no further normalization, so
a CIFAR-10 image satisfies ``|x|^2 <= 3072``.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError, DataFormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)

DATA_ROOT_ENV = "MAGDROP_DATA"

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_FILES = {
    "train": [f"data_batch_{i}.bin" for i in range(1, 6)],
    "test": ["test_batch.bin"],
}


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    name: str
    image_shape: tuple
    num_classes: int = 10
    input_norm_bound: float = 0.0

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        images = images.reshape(len(images), -1)
        images.setflags(write=False)
        labels = np.asarray(self.labels, dtype=np.int64)
        labels.setflags(write=False)
        if len(images) != len(labels):
            raise DataError(f"{self.name}: {len(images)} images but {len(labels)} labels")
        if len(labels) and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise DataError(f"{self.name}: labels outside [0, {self.num_classes})")
        norms = np.linalg.norm(images, axis=1) if len(images) else np.zeros(0)
        observed = float(norms.max()) if len(norms) else 0.0
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "image_shape", tuple(self.image_shape))
        object.__setattr__(self, "input_norm_bound", max(float(self.input_norm_bound), observed))

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices: Sequence[int], name: Optional[str] = None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], name or self.name,
                       self.image_shape, self.num_classes)


def first_k_per_class(dataset: Dataset, k: int) -> Dataset:
    """Keep the first ``k`` samples of every class, preserving file order."""
    if k < 1:
        raise ConfigError(f"subset_per_class must be >= 1, got {k}")
    keep = np.zeros(len(dataset), dtype=bool)
    for c in range(dataset.num_classes):
        keep[np.flatnonzero(dataset.labels == c)[:k]] = True
    return dataset.subset(np.flatnonzero(keep), f"{dataset.name}[{k}/class]")


# -- IDX ---------------------------------------------------------------------

def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing data file: {path}")
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, expected_magic: int, path) -> tuple:
    if len(raw) < 8:
        raise DataFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DataFormatError(
            f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) != header + size:
        raise DataFormatError(
            f"{path}: expected {header + size} bytes for dims {dims}, found {len(raw)}")
    return dims, np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, name: str = "mnist") -> Dataset:
    img_dims, pixels = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, images_path)
    _, labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, labels_path)
    if len(pixels) != len(labels):
        raise DataFormatError(
            f"{images_path} holds {len(pixels)} images but {labels_path} holds {len(labels)} labels")
    return Dataset(pixels.reshape(len(pixels), -1) / 255.0, labels.astype(np.int64), name,
                   (1,) + tuple(img_dims[1:]), num_classes=10)


def _to_bytes(images: np.ndarray) -> np.ndarray:
    b = np.rint(np.asarray(images) * 255.0)
    if b.min(initial=0) < 0 or b.max(initial=0) > 255:
        raise DataError("pixel values must lie in [0, 1]")
    return b.astype(np.uint8)


def write_idx(dataset: Dataset, images_path, labels_path) -> None:
    rows, cols = dataset.image_shape[-2:]
    n = len(dataset)
    Path(images_path).write_bytes(
        struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + _to_bytes(dataset.images).tobytes())
    Path(labels_path).write_bytes(
        struct.pack(">II", IDX_LABELS_MAGIC, n) + dataset.labels.astype(np.uint8).tobytes())


# -- CIFAR-10 ----------------------------------------------------------------

def load_cifar10_bin(paths, name: str = "cifar10") -> Dataset:
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    chunks = []
    for path in paths:
        raw = _read_bytes(path)
        if len(raw) % CIFAR_RECORD:
            raise DataFormatError(
                f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
        chunks.append(np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD))
    records = np.concatenate(chunks) if chunks else np.zeros((0, CIFAR_RECORD), np.uint8)
    if len(records) and records[:, 0].max() > 9:
        raise DataFormatError(f"label byte {records[:, 0].max()} outside 0..9")
    return Dataset(records[:, 1:] / 255.0, records[:, 0].astype(np.int64), name,
                   CIFAR_SHAPE, num_classes=10)


def write_cifar10_bin(dataset: Dataset, path) -> None:
    records = np.concatenate(
        [dataset.labels.astype(np.uint8)[:, None], _to_bytes(dataset.images)], axis=1)
    Path(path).write_bytes(records.tobytes())


# -- synthetic ---------------------------------------------------------------

def synthetic_blobs(num_classes: int, dim: int, n_per_class: int, seed: int,
                    spread: float = 0.3, radius: float = 3.0) -> Dataset:
    """Gaussian clusters around fixed, well-separated class means.

    Means sit at ``radius * e_c`` when ``dim >= num_classes``, on a circle
    in the first two coordinates when ``2 <= dim < num_classes``, and on a
    line when ``dim == 1``.
    """
    if dim < 1:
        raise ConfigError(f"dim must be >= 1, got {dim}")
    means = np.zeros((num_classes, dim))
    if dim >= num_classes:
        means[np.arange(num_classes), np.arange(num_classes)] = radius
    elif dim >= 2:
        angles = 2 * np.pi * np.arange(num_classes) / num_classes
        means[:, 0] = radius * np.cos(angles)
        means[:, 1] = radius * np.sin(angles)
    else:
        means[:, 0] = radius * np.arange(num_classes)
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(num_classes), n_per_class)
    images = means[labels] + spread * rng.standard_normal((len(labels), dim))
    return Dataset(images, labels, f"blobs{num_classes}x{dim}", (dim,), num_classes)


# -- batching ----------------------------------------------------------------

def batches(dataset: Dataset, batch_size: int, shuffle_seed: int, epoch: int,
            drop_last: bool = False) -> Iterator[tuple]:
    """Yield ``(images, labels)`` in a permutation fixed by ``(shuffle_seed, epoch)``.

    The trailing partial batch is kept unless ``drop_last``.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    order = np.random.default_rng([shuffle_seed, epoch]).permutation(len(dataset))
    stop = len(order) - len(order) % batch_size if drop_last else len(order)
    for start in range(0, stop, batch_size):
        idx = order[start:start + batch_size]
        yield dataset.images[idx], dataset.labels[idx]


# -- on-disk layout ----------------------------------------------------------

def data_root() -> Path:
    return Path(os.environ.get(DATA_ROOT_ENV, "data"))


def mnist_paths(root=None, split: str = "train") -> tuple:
    base = Path(root or data_root()) / "mnist"
    img, lab = MNIST_FILES[split]
    found = []
    for fname in (img, lab):
        plain, gz = base / fname, base / (fname + ".gz")
        found.append(gz if gz.exists() and not plain.exists() else plain)
    return tuple(found)


def cifar_paths(root=None, split: str = "train") -> list:
    base = Path(root or data_root()) / "cifar-10-batches-bin"
    return [base / f for f in CIFAR_FILES[split]]


def load_named(name: str, split: str, root=None, subset_per_class: Optional[int] = None,
               blobs: Optional[dict] = None) -> Dataset:
    """Load ``mnist`` / ``cifar10`` from the data root, or build ``blobs``."""
    if name == "mnist":
        paths = mnist_paths(root, split)
        missing = [str(p) for p in paths if not Path(p).exists()]
        if missing:
            raise DataError(
                f"MNIST {split} files not found: {', '.join(missing)}. Expected IDX files "
                f"(optionally .gz) under $MAGDROP_DATA/mnist/; run `magdrop-lab prepare-mnist` "
                f"to build a desk-scale set")
        ds = load_idx(*paths, name=f"mnist-{split}")
    elif name == "cifar10":
        paths = cifar_paths(root, split)
        missing = [str(p) for p in paths if not p.exists()]
        if missing:
            raise DataError(
                f"CIFAR-10 {split} files not found: {', '.join(missing)}. Expected the binary "
                f"release (3073-byte records) under $MAGDROP_DATA/cifar-10-batches-bin/")
        ds = load_cifar10_bin(paths, name=f"cifar10-{split}")
    elif name == "blobs":
        opts = dict(num_classes=3, dim=8, n_per_class=100, seed=0)
        opts.update(blobs or {})
        # test split uses a shifted seed so the two sets are disjoint draws
        if split == "test":
            opts["seed"] = opts["seed"] + 1
        ds = synthetic_blobs(**opts)
    else:
        raise ConfigError(f"unknown dataset {name!r}")
    if subset_per_class is not None:
        ds = first_k_per_class(ds, subset_per_class)
    return ds


def prepare_mnist_desk(root=None, test_per_class: int = 100, seed: int = 0) -> tuple:
    """Write a desk-scale MNIST split as IDX files under ``<root>/mnist``.

    The source is the 5000-image MNIST sample (500 per class) shipped with
    the ``mlxtend`` package. Each class is shuffled with ``seed``;
    ``test_per_class`` images per class go to the t10k files, the rest to
    the train files. Both files are written in shuffled order.
    """
    import importlib.util

    spec = importlib.util.find_spec("mlxtend")
    if spec is None or not spec.submodule_search_locations:
        raise DataError("prepare-mnist needs the `mlxtend` package (pip install mlxtend)")
    src = Path(list(spec.submodule_search_locations)[0]) / "data" / "data" / "mnist_5k.csv.gz"
    if not src.exists():
        raise DataError(f"mlxtend MNIST sample not found at {src}")
    table = np.loadtxt(gzip.open(src, "rt"), delimiter=",", dtype=np.int64)
    pixels, labels = table[:, :-1], table[:, -1]
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in range(10):
        idx = rng.permutation(np.flatnonzero(labels == c))
        test_idx.append(idx[:test_per_class])
        train_idx.append(idx[test_per_class:])
    base = Path(root or data_root()) / "mnist"
    base.mkdir(parents=True, exist_ok=True)
    written = []
    for split, parts in (("train", train_idx), ("test", test_idx)):
        idx = rng.permutation(np.concatenate(parts))
        ds = Dataset(pixels[idx] / 255.0, labels[idx], f"mnist-{split}", (1, 28, 28))
        img, lab = (base / f for f in MNIST_FILES[split])
        write_idx(ds, img, lab)
        written.extend([img, lab])
    return tuple(written)
