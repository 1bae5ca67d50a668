"""IDX dataset loading, batching and small synthetic fixtures."""

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "IDXFormatError",
    "Dataset",
    "load_idx",
    "load_dataset",
    "default_data_dir",
    "make_batches",
    "synthetic_fixture",
    "IMAGE_MAGIC",
    "LABEL_MAGIC",
]

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

# standard distribution file names
FILE_NAMES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IDXFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, 1, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    split: str = "train"
    source: str = ""
    num_classes: int = 10

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx, split=None):
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], split or self.split, self.source,
                       self.num_classes)

    def sample(self, n, seed=0):
        """Seeded subsample of ``n`` items (without replacement, order kept)."""
        if n is None or n >= len(self):
            return self
        if n < 1:
            raise ValueError(f"subsample size must be positive, got {n}")
        idx = np.sort(np.random.default_rng(seed).choice(len(self), size=n, replace=False))
        return self.subset(idx)


def _read_idx(path, expected_magic):
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise IDXFormatError(f"{path}: file too short for an IDX header ({len(raw)} bytes)")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise IDXFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IDXFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims))
    actual = len(raw) - header
    if actual != expected:
        raise IDXFormatError(f"{path}: payload has {actual} bytes, dimensions {dims} "
                             f"require {expected}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, split="train", source=None, num_classes=10):
    """Parse an IDX image/label file pair; pixels are scaled by 1/255."""
    images = _read_idx(images_path, IMAGE_MAGIC)
    labels = _read_idx(labels_path, LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IDXFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    x = (images.astype(np.float32) / np.float32(255.0))[:, None]
    return Dataset(x, labels.astype(np.int64), split, source or str(Path(images_path).parent),
                   num_classes)


def default_data_dir(name="mnist"):
    root = os.environ.get("CTT_DATA_DIR")
    if root is None:
        return None
    root = Path(root)
    return root / name if (root / name).is_dir() else root


def load_dataset(data_dir=None, split="train", names=None):
    """Load ``split`` from a directory holding the four standard IDX files."""
    data_dir = Path(data_dir) if data_dir is not None else default_data_dir()
    if data_dir is None:
        raise FileNotFoundError("no data directory given and CTT_DATA_DIR is not set")
    img_name, lbl_name = (names or FILE_NAMES)[split]
    img, lbl = data_dir / img_name, data_dir / lbl_name
    for p in (img, lbl):
        if not p.exists() and p.with_suffix(p.suffix + ".gz").exists():
            raise FileNotFoundError(f"{p}: found only the gzip archive; decompress it first")
        if not p.exists():
            raise FileNotFoundError(f"{p} not found (IDX files for {split!r} expected in {data_dir})")
    return load_idx(img, lbl, split=split, source=str(data_dir))


def make_batches(dataset, batch_size, seed=0, shuffle=True):
    """Yield ``(images, labels)`` covering every sample once."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if shuffle:
            yield dataset.images[idx], dataset.labels[idx]
        else:
            yield dataset.images[start:start + batch_size], dataset.labels[start:start + batch_size]


def synthetic_fixture(kind, n, seed=0, shape=(1, 28, 28)):
    """Tiny deterministic datasets for oracle tests.

    ``separable``: two classes of images drawn around two different
    prototypes; ``constant``: ``n`` identical images; ``corner``: alternating
    all-zero and all-one images.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    if kind == "separable":
        protos = rng.uniform(0.2, 0.8, size=(2,) + tuple(shape))
        labels = np.arange(n) % 2
        noise = rng.normal(0.0, 0.05, size=(n,) + tuple(shape))
        images = np.clip(protos[labels] + noise, 0, 1)
        return Dataset(images.astype(np.float32), labels.astype(np.int64), "train", kind, 2)
    if kind == "constant":
        img = rng.uniform(0, 1, size=shape).astype(np.float32)
        images = np.broadcast_to(img, (n,) + tuple(shape)).copy()
        return Dataset(images, np.zeros(n, dtype=np.int64), "train", kind, 2)
    if kind == "corner":
        labels = np.arange(n) % 2
        images = np.broadcast_to(labels.reshape((n,) + (1,) * len(shape)),
                                 (n,) + tuple(shape)).astype(np.float32)
        return Dataset(images.copy(), labels.astype(np.int64), "train", kind, 2)
    raise ValueError(f"unknown fixture kind {kind!r}")
