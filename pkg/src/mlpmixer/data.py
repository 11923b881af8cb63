"""Dataset readers (CIFAR-10 binary, MNIST IDX), augmentation and input permutations."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

from .model import MixerConfig
from .surgery import PermSpec

CIFAR_RECORD = 1 + 3 * 1024
CIFAR_BATCH_RECORDS = 10000
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class FormatError(ValueError):
    pass


class EmptyDatasetError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, ch) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    split: str = "train"
    num_classes: int = 10

    def __post_init__(self):
        if len(self.labels) == 0:
            raise EmptyDatasetError(f"{self.split} split is empty")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def geometry(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.split, self.num_classes)


# ---------------------------------------------------------------------------
# CIFAR-10

def read_cifar_batch(path: str, expected_records: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as f:
        raw = f.read()
    if expected_records is not None and len(raw) != expected_records * CIFAR_RECORD:
        offset = min(len(raw), expected_records * CIFAR_RECORD)
        raise FormatError(
            f"{path}: expected {expected_records * CIFAR_RECORD} bytes, got {len(raw)} "
            f"(mismatch at byte offset {offset})")
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        offset = len(raw) - len(raw) % CIFAR_RECORD
        raise FormatError(f"{path}: truncated record at byte offset {offset} "
                          f"(file length {len(raw)} is not a multiple of {CIFAR_RECORD})")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() >= 10:
        bad = int(np.argmax(labels >= 10))
        raise FormatError(f"{path}: corrupt label {labels[bad]} in record {bad} "
                          f"(byte offset {bad * CIFAR_RECORD})")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return (images.astype(np.float32) / 255.0), labels


def load_cifar10(directory: str) -> tuple[Dataset, Dataset]:
    def load(names, split):
        parts = [read_cifar_batch(os.path.join(directory, n), CIFAR_BATCH_RECORDS) for n in names]
        return Dataset(np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]), split)

    for name in CIFAR_TRAIN_FILES + (CIFAR_TEST_FILE,):
        if not os.path.exists(os.path.join(directory, name)):
            raise FileNotFoundError(f"CIFAR-10 file {name} not found in {directory}")
    return load(CIFAR_TRAIN_FILES, "train"), load((CIFAR_TEST_FILE,), "test")


# ---------------------------------------------------------------------------
# MNIST

def _open(path: str):
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def read_idx(path: str) -> np.ndarray:
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 8:
        raise FormatError(f"{path}: too short for an IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic == IDX_IMAGES_MAGIC:
        n, rows, cols = struct.unpack(">III", raw[4:16])
        dims, start = (n, rows, cols), 16
    elif magic == IDX_LABELS_MAGIC:
        (n,) = struct.unpack(">I", raw[4:8])
        dims, start = (n,), 8
    else:
        raise FormatError(f"{path}: bad magic 0x{magic:08x}")
    if n == 0:
        raise EmptyDatasetError(f"{path}: header declares 0 items")
    need = int(np.prod(dims))
    if len(raw) - start < need:
        raise FormatError(f"{path}: truncated at byte offset {len(raw)}, need {start + need} bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=start).reshape(dims)


def _find(directory: str, stem: str) -> str:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        path = os.path.join(directory, name)
        if os.path.exists(path):
            return path
    raise FileNotFoundError(f"MNIST file {stem} not found in {directory}")


def mnist_to_rgb32(images: np.ndarray) -> np.ndarray:
    """uint8 (N, 28, 28) -> float32 (N, 32, 32, 3): zero border of 2, gray copied to 3 channels."""
    x = images.astype(np.float32) / 255.0
    ph, pw = 32 - x.shape[1], 32 - x.shape[2]
    x = np.pad(x, ((0, 0), (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2)))
    return np.repeat(x[..., None], 3, axis=-1)


def load_mnist(directory: str) -> tuple[Dataset, Dataset]:
    out = []
    for prefix, split in (("train", "train"), ("t10k", "test")):
        imgs = read_idx(_find(directory, f"{prefix}-images-idx3-ubyte"))
        labels = read_idx(_find(directory, f"{prefix}-labels-idx1-ubyte")).astype(np.int64)
        out.append(Dataset(mnist_to_rgb32(imgs), labels, split))
    return out[0], out[1]


# ---------------------------------------------------------------------------
# offline stand-in

def make_synthetic(n: int, image=(32, 32, 3), num_classes: int = 10, seed: int = 0,
                   split: str = "train", noise: float = 0.15) -> Dataset:
    """Class-conditional smooth templates plus pixel noise, for runs without downloads.

    Templates depend only on ``num_classes``/``image`` (fixed seed), so train and
    test splits drawn with different ``seed`` share the same classes.
    """
    h, w, ch = image
    trng = np.random.default_rng(12345)
    coarse = trng.standard_normal((num_classes, 4, 4, ch))
    templates = coarse.repeat(-(-h // 4), axis=1).repeat(-(-w // 4), axis=2)[:, :h, :w]
    rng = np.random.default_rng([seed, 7])
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    x = 0.5 + 0.2 * templates[labels] + noise * rng.standard_normal((n, h, w, ch))
    return Dataset(np.clip(x, 0.0, 1.0).astype(np.float32), labels.astype(np.int64), split, num_classes)


def load_dataset(kind: str, directory: str | None = None, synthetic_size=(4096, 1024)) -> tuple[Dataset, Dataset]:
    if kind == "cifar10":
        return load_cifar10(directory)
    if kind == "mnist":
        return load_mnist(directory)
    if kind == "synthetic":
        n_train, n_test = synthetic_size
        return make_synthetic(n_train, seed=0), make_synthetic(n_test, seed=1, split="test")
    raise ValueError(f"unknown dataset {kind!r}")


# ---------------------------------------------------------------------------
# preprocessing

def normalize(images: np.ndarray) -> np.ndarray:
    """Fixed per-channel normalization to [-1, 1]."""
    return (images - 0.5) / 0.5


def augment(image: np.ndarray, rng: np.random.Generator | None = None, *,
            flip: bool | None = None, offset: tuple[int, int] | None = None, pad: int = 4) -> np.ndarray:
    """Random horizontal flip, then reflect-pad by ``pad`` and crop back to size.

    ``flip``/``offset`` override the random draws; offset ``(pad, pad)`` is the centered crop.
    """
    h, w = image.shape[:2]
    if flip is None:
        flip = bool(rng.random() < 0.5)
    if offset is None:
        offset = tuple(int(v) for v in rng.integers(0, 2 * pad + 1, size=2))
    x = image[:, ::-1] if flip else image
    if pad:
        x = np.pad(x, ((pad, pad), (pad, pad), (0, 0)), mode="reflect")
        x = x[offset[0]:offset[0] + h, offset[1]:offset[1] + w]
    return np.ascontiguousarray(x)


def augment_batch(images: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    n, h, w, _ = images.shape
    flips = rng.random(n) < 0.5
    offs = rng.integers(0, 2 * pad + 1, size=(n, 2))
    x = np.where(flips[:, None, None, None], images[:, :, ::-1], images)
    x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)), mode="reflect")
    rows = offs[:, 0, None] + np.arange(h)
    cols = offs[:, 1, None] + np.arange(w)
    return x[np.arange(n)[:, None, None], rows[:, :, None], cols[:, None, :]]


def build_perm_pipeline(kind: str, config: MixerConfig, seed: int = 0) -> PermSpec:
    """Fixed permutation spec shared by every image of a run."""
    rng = np.random.default_rng(seed)
    ident = PermSpec.identity(config)
    if kind == "none":
        return ident
    if kind == "patch":
        return PermSpec(rng.permutation(config.seq_len), rng.permutation(config.patch_dim))
    if kind == "global":
        h, w, ch = config.image
        return PermSpec(ident.token_perm, ident.pixel_perm, rng.permutation(h * w * ch))
    raise ValueError(f"unknown permutation kind {kind!r}; expected none, patch or global")
