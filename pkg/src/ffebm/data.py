"""Dataset ingestion (MNIST IDX, CIFAR-10 binary, synthetic blobs) and
augmentation."""

import gzip
import os
import struct
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional, Tuple

import numpy as np

from .errors import ConfigError, FormatError

MNIST_MEAN, MNIST_STD = (0.1307,), (0.3081,)
CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32


@dataclass
class Augmentation:
    hflip_prob: float = 0.0
    crop_pad: int = 0


@dataclass
class DatasetSpec:
    source: str  # "mnist_idx" | "cifar10_binary" | "synthetic_blobs"
    root: Optional[str] = None  # None: the bundled MNIST subset
    split: str = "train"
    mean: Optional[Tuple[float, ...]] = None
    std: Optional[Tuple[float, ...]] = None
    augmentation: Augmentation = field(default_factory=Augmentation)
    limit: Optional[int] = None  # keep only the first n samples
    # synthetic_blobs only
    num_samples: int = 400
    dim: int = 2
    seed: int = 0

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        aug = Augmentation(**d.pop("augmentation", {}))
        for key in ("mean", "std"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        try:
            return cls(augmentation=aug, **d)
        except TypeError as e:
            raise ConfigError(f"bad dataset spec: {e}") from e


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) or (N, D), normalized float32
    labels: np.ndarray  # (N,) int64
    num_classes: int = 10

    def __len__(self):
        return len(self.labels)

    def subset(self, n):
        return Dataset(self.images[:n], self.labels[:n], self.num_classes)


def _open(path):
    if not os.path.exists(path) and os.path.exists(path + ".gz"):
        path = path + ".gz"
    if path.endswith(".gz"):
        with gzip.open(path, "rb") as fh:
            return fh.read()
    with open(path, "rb") as fh:
        return fh.read()


def parse_idx(raw, expected_magic):
    """Decode an unsigned-byte IDX payload; returns a uint8 array."""
    if len(raw) < 4:
        raise FormatError("IDX file shorter than its magic number")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise FormatError(f"bad IDX magic 0x{magic:08x} (expected 0x{expected_magic:08x})")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise FormatError("IDX header truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    n = int(np.prod(dims))
    if len(raw) - head < n:
        raise FormatError(f"IDX payload truncated: {len(raw) - head} of {n} bytes")
    if len(raw) - head > n:
        raise FormatError(f"IDX payload has {len(raw) - head - n} trailing bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=head).reshape(dims)


def _normalize(x, mean, std):
    c = x.shape[1]
    mean = np.asarray(mean, dtype=np.float32)
    std = np.asarray(std, dtype=np.float32)
    if mean.shape != (c,) or std.shape != (c,):
        raise ConfigError(f"normalization needs {c} channel statistics")
    return ((x / np.float32(255.0) - mean[:, None, None]) / std[:, None, None]).astype(np.float32)


def bundled_mnist_root():
    return str(resources.files("ffebm") / "data" / "mnist")


def load_mnist_idx(root=None, split="train", mean=MNIST_MEAN, std=MNIST_STD):
    """Read ``{split}-images-idx3-ubyte[.gz]`` and ``{split}-labels-idx1-ubyte[.gz]``
    from ``root``.  ``split`` is usually "train", "val" or "t10k"."""
    root = root or bundled_mnist_root()
    try:
        img = parse_idx(_open(os.path.join(root, f"{split}-images-idx3-ubyte")), IDX_IMAGES_MAGIC)
        lab = parse_idx(_open(os.path.join(root, f"{split}-labels-idx1-ubyte")), IDX_LABELS_MAGIC)
    except FileNotFoundError as e:
        raise FormatError(f"missing MNIST file: {e.filename}") from e
    if img.ndim != 3 or lab.ndim != 1 or len(img) != len(lab):
        raise FormatError(f"inconsistent IDX shapes {img.shape} / {lab.shape}")
    if lab.size and lab.max() > 9:
        raise FormatError("MNIST label above 9")
    x = _normalize(img[:, None].astype(np.float32), mean, std)
    return Dataset(x, lab.astype(np.int64), 10)


def parse_cifar10_records(raw):
    if len(raw) % CIFAR_RECORD:
        raise FormatError(f"CIFAR-10 file length {len(raw)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        raise FormatError("CIFAR-10 label above 9")
    return rec[:, 1:].reshape(-1, 3, 32, 32), labels


def load_cifar10_binary(root, split="train", mean=CIFAR10_MEAN, std=CIFAR10_STD):
    """Read the ``data_batch_{1..5}.bin`` (train) or ``test_batch.bin`` files."""
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
    xs, ys = [], []
    for n in names:
        path = os.path.join(root, n)
        if not os.path.exists(path):
            raise FormatError(f"missing CIFAR-10 file {path}")
        with open(path, "rb") as fh:
            x, y = parse_cifar10_records(fh.read())
        xs.append(x)
        ys.append(y)
    x = _normalize(np.concatenate(xs).astype(np.float32), mean, std)
    return Dataset(x, np.concatenate(ys), 10)


def synthetic_blobs(n=400, dim=2, seed=0, separation=8.0):
    """Two well-separated Gaussian blobs, labels 0/1, balanced."""
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    centers = np.zeros((2, dim))
    centers[0, 0], centers[1, 0] = -separation / 2, separation / 2
    x = centers[y] + rng.normal(size=(n, dim))
    return Dataset(x.astype(np.float32), y.astype(np.int64), 2)


def load_dataset(spec):
    if spec.source == "mnist_idx":
        ds = load_mnist_idx(spec.root, spec.split, spec.mean or MNIST_MEAN, spec.std or MNIST_STD)
    elif spec.source == "cifar10_binary":
        if spec.root is None:
            raise ConfigError("cifar10_binary needs a root directory")
        ds = load_cifar10_binary(spec.root, spec.split, spec.mean or CIFAR10_MEAN,
                                 spec.std or CIFAR10_STD)
    elif spec.source == "synthetic_blobs":
        seed = spec.seed + (0 if spec.split == "train" else 1)
        ds = synthetic_blobs(spec.num_samples, spec.dim, seed)
    else:
        raise ConfigError(f"unknown dataset source {spec.source!r}")
    if len(ds) == 0:
        raise ConfigError(f"dataset {spec.source}/{spec.split} is empty")
    return ds.subset(spec.limit) if spec.limit else ds


def hflip(batch):
    return batch[..., ::-1].copy()


def augment(batch, aug, rng):
    """Random horizontal flips and edge-padded random crops of an image batch
    ``(B, C, H, W)``; other shapes pass through unchanged."""
    if batch.ndim != 4 or (aug.hflip_prob <= 0 and aug.crop_pad <= 0):
        return batch
    out = batch.copy()
    B, _, H, W = batch.shape
    if aug.hflip_prob > 0:
        flip = rng.random(B) < aug.hflip_prob
        out[flip] = out[flip][..., ::-1]
    p = aug.crop_pad
    if p > 0:
        padded = np.pad(out, ((0, 0), (0, 0), (p, p), (p, p)), mode="edge")
        offs = rng.integers(0, 2 * p + 1, size=(B, 2))
        for i, (dy, dx) in enumerate(offs):
            out[i] = padded[i, :, dy:dy + H, dx:dx + W]
    return out


def crop(batch, pad, dy, dx):
    """Deterministic edge-padded crop at offset ``(dy, dx)`` of the padded image."""
    H, W = batch.shape[-2:]
    padded = np.pad(batch, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="edge")
    return padded[..., dy:dy + H, dx:dx + W]
