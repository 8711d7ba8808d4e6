"""Datasets: seeded Gaussian mixtures, IDX and CIFAR binary loaders, augmentation."""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_SHAPE = (3, 32, 32)
DATASET_MAGIC = b"MRKD-DS"
DATASET_VERSION = 1


class DataFormatError(ValueError):
    """A binary dataset file is malformed."""


@dataclass(frozen=True)
class AugmentPolicy:
    horizontal_flip: bool = False
    pad_crop: bool = False
    pad: int = 4

    @property
    def active(self) -> bool:
        return self.horizontal_flip or self.pad_crop

    @classmethod
    def standard(cls) -> "AugmentPolicy":
        """Random horizontal flip plus 4-pixel zero-pad random crop."""
        return cls(horizontal_flip=True, pad_crop=True, pad=4)


@dataclass
class DatasetSplit:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    num_classes: int
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    image_shape: tuple[int, int, int] | None = None

    def __post_init__(self):
        for name in ("y_train", "y_test"):
            y = getattr(self, name)
            if y.size and (y.min() < 0 or y.max() >= self.num_classes):
                raise ValueError(f"{name} has labels outside [0, {self.num_classes})")
        if self.x_train.shape[0] != self.y_train.shape[0] or self.x_test.shape[0] != self.y_test.shape[0]:
            raise ValueError("feature and label counts differ")
        if self.augment.active and self.image_shape is None:
            raise ValueError("augmentation needs an image shape")

    @property
    def n_features(self) -> int:
        return self.x_train.shape[1]


def _simplex_means(num_classes: int, dims: int, separation: float, rng) -> np.ndarray:
    """Vertices of a regular simplex with edge ``separation``, randomly rotated into ``dims``."""
    centred = np.eye(num_classes) - 1.0 / num_classes
    # orthonormal basis of the sum-zero subspace; rows keep pairwise distance sqrt(2)
    u, _, _ = np.linalg.svd(centred)
    coords = centred @ u[:, : num_classes - 1]
    rotation, _ = np.linalg.qr(rng.standard_normal((dims, dims)))
    return coords @ rotation[:, : num_classes - 1].T * (separation / np.sqrt(2.0))


def _stratified_labels(n: int, num_classes: int, rng) -> np.ndarray:
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    return labels


def gen_gaussian_mixture(num_classes: int, dims: int, n_train: int, n_test: int,
                         separation: float, seed: int) -> DatasetSplit:
    """Unit-covariance Gaussian clusters whose means sit ``separation`` apart pairwise.

    At most ``dims + 1`` classes fit as a regular simplex.  Train and test
    points are drawn from independent random streams.
    """
    if num_classes < 2 or dims < 2:
        raise ValueError("need at least 2 classes and 2 dimensions")
    if not separation > 0:
        raise ValueError(f"separation must be positive, got {separation}")
    if num_classes > dims + 1:
        raise ValueError(f"cannot place {num_classes} equidistant means in {dims} dimensions")
    means = _simplex_means(num_classes, dims, separation, np.random.default_rng([seed, 2]))

    def draw(n, stream):
        rng = np.random.default_rng([seed, stream])
        y = _stratified_labels(n, num_classes, rng)
        return means[y] + rng.standard_normal((n, dims)), y

    x_train, y_train = draw(n_train, 0)
    x_test, y_test = draw(n_test, 1)
    return DatasetSplit(x_train, y_train, x_test, y_test, num_classes)


# --- IDX -------------------------------------------------------------------

def _read_idx(path, expected_magic: int, kind: str) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 8:
        raise DataFormatError(f"{path}: truncated IDX header")
    magic, count = struct.unpack(">II", blob[:8])
    if magic != expected_magic:
        raise DataFormatError(
            f"{path}: magic 0x{magic:08x} is not an IDX {kind} file (expected 0x{expected_magic:08x})")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise DataFormatError(f"{path}: truncated IDX header")
    dims = (count,) + struct.unpack(f">{ndim - 1}I", blob[8:header])
    size = int(np.prod(dims))
    if len(blob) - header != size:
        raise DataFormatError(f"{path}: expected {size} data bytes, found {len(blob) - header}")
    return np.frombuffer(blob, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Read an IDX image/label pair; pixels come back flattened and scaled to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, "images")
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, "labels")
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    x = images.reshape(images.shape[0], int(np.prod(images.shape[1:]))).astype(np.float64) / 255.0
    return x, labels.astype(np.int64)


# --- CIFAR -----------------------------------------------------------------

def load_cifar_bin(paths: Sequence, variant: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Parse CIFAR binary batches.

    CIFAR-10 records are ``<label><3072 pixels>``; CIFAR-100 records are
    ``<coarse><fine><3072 pixels>`` and the fine label is returned.
    """
    if variant not in (10, 100):
        raise ValueError(f"variant must be 10 or 100, got {variant}")
    label_bytes = 1 if variant == 10 else 2
    record = label_bytes + int(np.prod(CIFAR_SHAPE))
    xs, ys = [], []
    for path in paths:
        blob = Path(path).read_bytes()
        if len(blob) % record:
            raise DataFormatError(f"{path}: size {len(blob)} is not a multiple of the {record}-byte record")
        rows = np.frombuffer(blob, dtype=np.uint8).reshape(-1, record)
        ys.append(rows[:, label_bytes - 1].astype(np.int64))
        xs.append(rows[:, label_bytes:].astype(np.float64) / 255.0)
    if not xs:
        return np.zeros((0, record - label_bytes)), np.zeros(0, dtype=np.int64)
    return np.concatenate(xs), np.concatenate(ys)


def channel_standardize(x_train: np.ndarray, x_test: np.ndarray, shape: tuple[int, int, int]):
    """Standardise each channel with training-split mean and std."""
    c = shape[0]
    tr = x_train.reshape(x_train.shape[0], c, -1)
    mean = tr.mean(axis=(0, 2))
    std = tr.std(axis=(0, 2))
    std = np.where(std > 0, std, 1.0)

    def apply(x):
        return ((x.reshape(x.shape[0], c, -1) - mean[:, None]) / std[:, None]).reshape(x.shape)

    return apply(x_train), apply(x_test)


def load_cifar_dir(root, variant: int = 10, augment: bool = True) -> DatasetSplit:
    """Load the standard CIFAR binary distribution from ``root``."""
    root = Path(root)
    if variant == 10:
        train = [root / f"data_batch_{i}.bin" for i in range(1, 6)]
        test = [root / "test_batch.bin"]
    else:
        train, test = [root / "train.bin"], [root / "test.bin"]
    for p in train + test:
        if not p.exists():
            raise FileNotFoundError(p)
    x_train, y_train = load_cifar_bin(train, variant)
    x_test, y_test = load_cifar_bin(test, variant)
    x_train, x_test = channel_standardize(x_train, x_test, CIFAR_SHAPE)
    policy = AugmentPolicy.standard() if augment else AugmentPolicy()
    return DatasetSplit(x_train, y_train, x_test, y_test, variant, policy, CIFAR_SHAPE)


# --- augmentation ----------------------------------------------------------

def flip_horizontal(images: np.ndarray) -> np.ndarray:
    """Reverse the width axis of ``(B, C, H, W)`` images."""
    return images[..., ::-1]


def pad_crop(images: np.ndarray, offsets: np.ndarray, pad: int) -> np.ndarray:
    """Zero-pad by ``pad`` on every side, then crop back at per-image ``(dy, dx)`` offsets."""
    b, c, h, w = images.shape
    padded = np.zeros((b, c, h + 2 * pad, w + 2 * pad))
    padded[:, :, pad:pad + h, pad:pad + w] = images
    out = np.empty_like(images)
    for i, (dy, dx) in enumerate(offsets):
        out[i] = padded[i, :, dy:dy + h, dx:dx + w]
    return out


def augment_batch(batch: np.ndarray, policy: AugmentPolicy, shape: tuple[int, int, int], rng) -> np.ndarray:
    """Random flip (p = 0.5) and pad-crop per image; returns a new flattened batch."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != int(np.prod(shape)):
        raise ValueError(f"batch width {batch.shape[-1]} does not match image shape {shape}")
    if not policy.active:
        return batch
    images = batch.reshape((batch.shape[0],) + tuple(shape))
    if policy.horizontal_flip:
        flips = rng.random(batch.shape[0]) < 0.5
        images = np.where(flips[:, None, None, None], flip_horizontal(images), images)
    if policy.pad_crop:
        offsets = rng.integers(0, 2 * policy.pad + 1, size=(batch.shape[0], 2))
        images = pad_crop(images, offsets, policy.pad)
    return images.reshape(batch.shape)


# --- container -------------------------------------------------------------

def save_dataset(data: DatasetSplit, path) -> None:
    """Little-endian container: magic, version, M, D, train and test counts, then arrays."""
    header = DATASET_MAGIC + struct.pack(
        "<IIIQQ", DATASET_VERSION, data.num_classes, data.n_features,
        data.x_train.shape[0], data.x_test.shape[0])
    body = b"".join(np.ascontiguousarray(a, dtype=dt).tobytes() for a, dt in (
        (data.x_train, "<f8"), (data.y_train, "<i8"), (data.x_test, "<f8"), (data.y_test, "<i8")))
    Path(path).write_bytes(header + body)


def load_dataset(path) -> DatasetSplit:
    fh = io.BytesIO(Path(path).read_bytes())
    if fh.read(len(DATASET_MAGIC)) != DATASET_MAGIC:
        raise DataFormatError(f"{path}: not an MRKD-DS container")
    fmt = "<IIIQQ"
    raw = fh.read(struct.calcsize(fmt))
    if len(raw) != struct.calcsize(fmt):
        raise DataFormatError(f"{path}: truncated header")
    version, m, d, n_train, n_test = struct.unpack(fmt, raw)
    if version != DATASET_VERSION:
        raise DataFormatError(f"{path}: unsupported container version {version}")

    def take(count, dtype, shape):
        nbytes = 8 * count
        chunk = fh.read(nbytes)
        if len(chunk) != nbytes:
            raise DataFormatError(f"{path}: truncated body")
        return np.frombuffer(chunk, dtype=dtype).reshape(shape).copy()

    x_train = take(n_train * d, "<f8", (n_train, d))
    y_train = take(n_train, "<i8", (n_train,))
    x_test = take(n_test * d, "<f8", (n_test, d))
    y_test = take(n_test, "<i8", (n_test,))
    if fh.read(1):
        raise DataFormatError(f"{path}: trailing bytes")
    return DatasetSplit(x_train.astype(np.float64), y_train.astype(np.int64),
                        x_test.astype(np.float64), y_test.astype(np.int64), m)
