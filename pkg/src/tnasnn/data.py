"""IDX and CIFAR binary loaders, augmentation, batching and synthetic spike trains."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FormatError

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801

CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)


@dataclass
class DatasetHandle:
    name: str
    split: str
    samples: np.ndarray
    labels: np.ndarray
    class_count: int
    temporal: bool = False
    mean: tuple[float, ...] | None = None
    std: tuple[float, ...] | None = None
    rates: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.samples) != len(self.labels):
            raise FormatError(f"{len(self.samples)} samples but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.samples.shape[2:] if self.temporal else self.samples.shape[1:])

    def subset(self, indices) -> "DatasetHandle":
        indices = np.asarray(indices)
        return replace(self, samples=self.samples[indices], labels=self.labels[indices])

    def head(self, n: int) -> "DatasetHandle":
        return self if not n or n >= len(self) else self.subset(np.arange(n))


def _read(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, expected_magic: int, path) -> np.ndarray:
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated IDX header ({len(raw)} bytes)")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise FormatError(f"{path}: IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header != count:
        raise FormatError(f"{path}: IDX payload has {len(raw) - header} bytes, header implies {count}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, name: str = "fashion_mnist", split: str = "train",
             class_count: int = 10) -> DatasetHandle:
    """Read an IDX image/label pair (optionally gzipped); pixels are scaled to [0, 1]."""
    images = _parse_idx(_read(images_path), IDX_IMAGES, images_path)
    labels = _parse_idx(_read(labels_path), IDX_LABELS, labels_path)
    samples = (images.astype(np.float32) / 255.0)[:, None, :, :]
    return DatasetHandle(name, split, samples, labels.astype(np.int64), class_count)


def write_idx(path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = IDX_IMAGES if array.ndim == 3 else IDX_LABELS
    if array.ndim not in (1, 3):
        raise ValueError("IDX writer supports label vectors and N x H x W image stacks")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def load_cifar_binary(paths, variant: str = "cifar10", split: str = "train") -> DatasetHandle:
    """Read CIFAR-10 (3073-byte) or CIFAR-100 (3074-byte, fine label) binary records."""
    if variant not in ("cifar10", "cifar100"):
        raise ConfigurationError(f"unknown CIFAR variant {variant!r}")
    label_bytes = 1 if variant == "cifar10" else 2
    record = label_bytes + 3072
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    samples, labels = [], []
    for path in paths:
        raw = _read(path)
        if len(raw) % record:
            raise FormatError(f"{path}: {len(raw)} bytes is not a multiple of the {record}-byte record")
        rows = np.frombuffer(raw, dtype=np.uint8).reshape(-1, record)
        labels.append(rows[:, label_bytes - 1].astype(np.int64))
        samples.append(rows[:, label_bytes:].reshape(-1, 3, 32, 32))
    images = np.concatenate(samples).astype(np.float32) / 255.0
    return DatasetHandle(variant, split, images, np.concatenate(labels),
                         10 if variant == "cifar10" else 100, mean=CIFAR_MEAN, std=CIFAR_STD)


def write_cifar_binary(path, images: np.ndarray, labels, coarse_labels=None) -> None:
    images = np.ascontiguousarray(images, dtype=np.uint8).reshape(len(images), 3072)
    cols = [np.asarray(labels, dtype=np.uint8)[:, None]]
    if coarse_labels is not None:
        cols.insert(0, np.asarray(coarse_labels, dtype=np.uint8)[:, None])
    Path(path).write_bytes(np.hstack(cols + [images]).tobytes())


@dataclass
class AugmentConfig:
    pad: int = 4
    hflip_prob: float = 0.5
    normalize_mean: tuple[float, ...] = CIFAR_MEAN
    normalize_std: tuple[float, ...] = CIFAR_STD

    @classmethod
    def for_dataset(cls, handle: DatasetHandle) -> "AugmentConfig | None":
        if handle.temporal:
            return None
        mean, std = normalization(handle)
        return cls(normalize_mean=mean, normalize_std=std)


def normalization(handle: DatasetHandle) -> tuple[tuple[float, ...], tuple[float, ...]]:
    if handle.mean is not None:
        return tuple(handle.mean), tuple(handle.std)
    channels = handle.samples.shape[1]
    return (0.0,) * channels, (1.0,) * channels


def normalize(batch: np.ndarray, mean, std) -> np.ndarray:
    shape = (1, -1) + (1,) * (batch.ndim - 2)
    mean = np.asarray(mean, dtype=batch.dtype).reshape(shape)
    std = np.asarray(std, dtype=batch.dtype).reshape(shape)
    return (batch - mean) / std


def augment(sample: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator,
            offset: tuple[int, int] | None = None, flip: bool | None = None) -> np.ndarray:
    """Zero-pad, random crop back to size, random horizontal flip, then normalize one C x H x W image."""
    c, h, w = sample.shape
    p = cfg.pad
    padded = np.zeros((c, h + 2 * p, w + 2 * p), dtype=sample.dtype)
    padded[:, p:p + h, p:p + w] = sample
    if offset is None:
        offset = (int(rng.integers(0, 2 * p + 1)), int(rng.integers(0, 2 * p + 1)))
    if flip is None:
        flip = bool(rng.random() < cfg.hflip_prob)
    out = padded[:, offset[0]:offset[0] + h, offset[1]:offset[1] + w]
    if flip:
        out = out[:, :, ::-1]
    return normalize(out[None], cfg.normalize_mean, cfg.normalize_std)[0]


def augment_batch(batch: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    n, c, h, w = batch.shape
    p = cfg.pad
    padded = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=batch.dtype)
    padded[:, :, p:p + h, p:p + w] = batch
    offsets = rng.integers(0, 2 * p + 1, size=(n, 2))
    flips = rng.random(n) < cfg.hflip_prob
    out = np.empty_like(batch)
    for k in range(n):
        i, j = offsets[k]
        crop = padded[k, :, i:i + h, j:j + w]
        out[k] = crop[:, :, ::-1] if flips[k] else crop
    return normalize(out, cfg.normalize_mean, cfg.normalize_std)


def iterate_batches(handle: DatasetHandle, batch_size: int, rng: np.random.Generator | None = None,
                    augment: AugmentConfig | None = None):
    """Yield ``(x, labels)`` batches; shuffled when ``rng`` is given, augmented when ``augment`` is.

    Without augmentation static images are only normalized.
    """
    n = len(handle)
    order = rng.permutation(n) if rng is not None else np.arange(n)
    mean, std = normalization(handle)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        x = handle.samples[idx]
        if handle.temporal:
            x = x.astype(np.float32)
        elif augment is not None:
            if rng is None:
                raise ConfigurationError("augmentation needs a seeded rng")
            x = augment_batch(x, augment, rng)
        else:
            x = normalize(x, mean, std)
        yield x, handle.labels[idx]


def split_validation(handle: DatasetHandle, fraction: float, seed: int) -> tuple[DatasetHandle, DatasetHandle]:
    if not 0 < fraction < 1:
        raise ConfigurationError(f"validation fraction must lie in (0, 1), got {fraction}")
    order = np.random.default_rng([seed, 31337]).permutation(len(handle))
    n_val = max(1, int(round(len(handle) * fraction)))
    val = replace(handle.subset(np.sort(order[:n_val])), split="val")
    return handle.subset(np.sort(order[n_val:])), val


def with_dataset_stats(train: DatasetHandle, *others: DatasetHandle) -> list[DatasetHandle]:
    """Attach per-channel mean/std computed on ``train`` to every handle."""
    x = train.samples.astype(np.float64)
    axes = (0,) + tuple(range(2, x.ndim))
    mean = tuple(float(v) for v in x.mean(axis=axes))
    std = tuple(float(v) for v in x.std(axis=axes))
    return [replace(h, mean=mean, std=std) for h in (train,) + others]


def synthetic_spikes(classes: int, T: int, shape, n: int, seed: int, low: float = 0.05,
                     high: float = 0.4, split: str = "train") -> DatasetHandle:
    """Class-conditional Bernoulli spike trains, ``n`` samples of ``T x C x H x W``.

    Pixels are dealt round-robin into ``classes`` regions; a sample of class k
    fires at rate ``high`` inside region k and ``low`` elsewhere, so total
    spike count per region separates the classes.
    """
    if classes < 2:
        raise ConfigurationError("synthetic_spikes needs at least two classes")
    shape = tuple(shape)
    pixels = int(np.prod(shape))
    region = np.arange(pixels) % classes
    rates = np.where(region[None, :] == np.arange(classes)[:, None], high, low).reshape((classes,) + shape)
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, classes, size=n)
    draws = rng.random((n, T) + shape)
    samples = (draws < rates[labels][:, None]).astype(np.uint8)
    return DatasetHandle("synthetic", split, samples, labels.astype(np.int64), classes,
                         temporal=True, rates=rates)


_FMNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find(root: Path, candidates, filename: str) -> Path:
    for sub in candidates:
        for suffix in ("", ".gz"):
            path = root / sub / (filename + suffix)
            if path.is_file():
                return path
    raise FileNotFoundError(f"{filename} not found under {root}")


def load_dataset(name: str, root, split: str, timesteps: int = 5, synthetic_n: int = 2000,
                 seed: int = 0) -> tuple[DatasetHandle, DatasetHandle]:
    """Load ``(train, test)`` handles for a named dataset stored under ``root``.

    ``split`` selects which of the two is returned first; both are returned so
    that statistics measured on the training split can be shared.
    """
    if split not in ("train", "test"):
        raise ConfigurationError(f"split must be train or test, got {split!r}")
    root = Path(root) if root is not None else Path(".")
    if name == "fashion_mnist":
        subs = ["", "fashion_mnist", "fashion-mnist", "FashionMNIST/raw"]
        handles = [load_idx(_find(root, subs, img), _find(root, subs, lab), name, s)
                   for s, (img, lab) in _FMNIST_FILES.items()]
        train, test = with_dataset_stats(*handles)
    elif name == "cifar10":
        base = root / "cifar-10-batches-bin" if (root / "cifar-10-batches-bin").is_dir() else root
        train = load_cifar_binary([base / f"data_batch_{k}.bin" for k in range(1, 6)], "cifar10", "train")
        test = load_cifar_binary([base / "test_batch.bin"], "cifar10", "test")
    elif name == "cifar100":
        base = root / "cifar-100-binary" if (root / "cifar-100-binary").is_dir() else root
        train = load_cifar_binary([base / "train.bin"], "cifar100", "train")
        test = load_cifar_binary([base / "test.bin"], "cifar100", "test")
    elif name == "synthetic":
        train = synthetic_spikes(10, timesteps, (1, 8, 8), synthetic_n, seed, split="train")
        test = synthetic_spikes(10, timesteps, (1, 8, 8), max(synthetic_n // 2, 1), seed + 1, split="test")
    else:
        raise ConfigurationError(f"unknown dataset {name!r}")
    return (train, test) if split == "train" else (test, train)
