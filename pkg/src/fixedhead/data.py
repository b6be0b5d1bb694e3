"""Dataset ingestion, the synthetic corpus, augmentation, and batching.

On-disk format is IDX (big-endian magic + dims + raw uint8 payload), the
MNIST container: magic 0x00000803 for 3-d image files, 0x00000801 for 1-d
label files. Gzip-compressed files are detected by their two magic bytes and
decompressed transparently.

The synthetic corpus (synth_blobs) exists so training tests never need
downloads: each class is a Gaussian bump with a class-specific position,
width and brightness on a noisy background. Classes are linearly separable
by construction and the whole dataset is a pure function of the seed.
"""

import gzip
import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError, FormatError, LabelError, ShapeError
from .rng import Rng

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) uint8
    labels: np.ndarray  # (N,) int64
    num_classes: int
    split: str = "train"

    def __len__(self):
        return self.images.shape[0]


@dataclass
class AugmentConfig:
    pad: int = 0
    crop: int = 0  # 0 means "keep the input size"
    hflip_prob: float = 0.0


@dataclass
class Batch:
    x: Tensor  # (B, C, H, W) normalized float64
    y: np.ndarray  # (B,) int64


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        head = fh.read(2)
        fh.seek(0)
        if head == b"\x1f\x8b":
            with gzip.open(fh) as gz:
                return gz.read()
        return fh.read()


def read_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    """Load an IDX image/label file pair into a Dataset.

    When num_classes is given, labels are validated against it; otherwise the
    class count is inferred as max(label) + 1.
    """
    raw = _read_bytes(images_path)
    if len(raw) < 16:
        raise FormatError(f"{images_path}: truncated header")
    magic, n, h, w = struct.unpack(">IIII", raw[:16])
    if magic != IMAGE_MAGIC:
        raise FormatError(
            f"{images_path}: bad magic 0x{magic:08x}, expected 0x{IMAGE_MAGIC:08x}"
        )
    if len(raw) != 16 + n * h * w:
        raise FormatError(
            f"{images_path}: payload holds {len(raw) - 16} bytes, expected {n * h * w}"
        )
    images = np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(n, 1, h, w).copy()

    raw = _read_bytes(labels_path)
    if len(raw) < 8:
        raise FormatError(f"{labels_path}: truncated header")
    magic, n_lab = struct.unpack(">II", raw[:8])
    if magic != LABEL_MAGIC:
        raise FormatError(
            f"{labels_path}: bad magic 0x{magic:08x}, expected 0x{LABEL_MAGIC:08x}"
        )
    if len(raw) != 8 + n_lab:
        raise FormatError(
            f"{labels_path}: payload holds {len(raw) - 8} bytes, expected {n_lab}"
        )
    if n_lab != n:
        raise FormatError(f"{n} images but {n_lab} labels")
    labels = np.frombuffer(raw, dtype=np.uint8, offset=8).astype(np.int64)

    if num_classes is None:
        k = int(labels.max()) + 1 if labels.size else 0
    else:
        k = int(num_classes)
    if labels.size and int(labels.max()) >= k:
        raise LabelError(f"label {int(labels.max())} out of range for {k} classes")
    return Dataset(images=images, labels=labels, num_classes=k)


def write_idx(dataset: Dataset, images_path, labels_path, compress: bool = False) -> None:
    """Write a single-channel Dataset back to an IDX pair (round-trip exact)."""
    n, c, h, w = dataset.images.shape
    if c != 1:
        raise FormatError("IDX image files are single-channel")
    opener = gzip.open if compress else open
    with opener(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGE_MAGIC, n, h, w))
        fh.write(dataset.images.tobytes())
    with opener(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABEL_MAGIC, n))
        fh.write(dataset.labels.astype(np.uint8).tobytes())


def synth_blobs(
    num_classes: int, n_per_class: int, size: int, seed: int, split: str = "train"
) -> Dataset:
    """Deterministic labeled toy images: one Gaussian bump per class.

    Class c gets a fixed center on a ring plus a class-specific width and
    brightness, so classes differ in both position and scale. Per-sample
    center jitter and pixel noise come from the seeded stream.
    """
    if num_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {num_classes}")
    if size < 8:
        raise ConfigError(f"need size >= 8, got {size}")
    rng = Rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    images = np.empty((num_classes * n_per_class, 1, size, size), dtype=np.uint8)
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), n_per_class)
    radius = size / 3.2
    for c in range(num_classes):
        angle = 2.0 * np.pi * c / num_classes
        cy = size / 2.0 + radius * np.sin(angle)
        cx = size / 2.0 + radius * np.cos(angle)
        sigma = size / 12.0 + (size / 7.0 - size / 12.0) * c / max(num_classes - 1, 1)
        amp = 140.0 + 90.0 * c / max(num_classes - 1, 1)
        crng = rng.split(f"class{c}")
        jitter = crng.uniform(-1.0, 1.0, size=(n_per_class, 2))
        noise = crng.standard_normal((n_per_class, size, size)) * 10.0
        for i in range(n_per_class):
            bump = amp * np.exp(
                -(((yy - cy - jitter[i, 0]) ** 2) + ((xx - cx - jitter[i, 1]) ** 2))
                / (2.0 * sigma**2)
            )
            img = np.clip(bump + noise[i] + 16.0, 0.0, 255.0)
            images[c * n_per_class + i, 0] = img.astype(np.uint8)
    return Dataset(images=images, labels=labels, num_classes=num_classes, split=split)


def augment(images: np.ndarray, cfg: AugmentConfig, rng: Rng) -> np.ndarray:
    """Zero-pad, random horizontal flip, random crop (in that order).

    With pad=0, hflip_prob=0 and crop equal to the input size, this is the
    identity. Returns uint8 images of shape (B, C, crop, crop).
    """
    b, c, h, w = images.shape
    crop = cfg.crop or h
    ph, pw = h + 2 * cfg.pad, w + 2 * cfg.pad
    if crop > ph or crop > pw:
        raise ConfigError(f"crop {crop} exceeds padded size {ph}x{pw}")

    if cfg.pad:
        padded = np.zeros((b, c, ph, pw), dtype=images.dtype)
        padded[:, :, cfg.pad : cfg.pad + h, cfg.pad : cfg.pad + w] = images
    else:
        padded = images

    flips = rng.uniform(size=b) < cfg.hflip_prob
    oy = rng.integers(0, ph - crop + 1, size=b)
    ox = rng.integers(0, pw - crop + 1, size=b)

    out = np.empty((b, c, crop, crop), dtype=images.dtype)
    for i in range(b):
        img = padded[i, :, :, ::-1] if flips[i] else padded[i]
        out[i] = img[:, oy[i] : oy[i] + crop, ox[i] : ox[i] + crop]
    return out


def batch_iter(
    dataset: Dataset,
    batch_size: int,
    shuffle_seed: int | None = None,
    mean=None,
    std=None,
    augment_cfg: AugmentConfig | None = None,
    augment_rng: Rng | None = None,
):
    """Yield normalized Batches covering every index exactly once.

    Shuffling is a deterministic function of shuffle_seed (None keeps dataset
    order). Pixels go through (x/255 - mean)/std per channel, in float64. The
    final short batch is included.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    n, c = dataset.images.shape[:2]
    mean = np.zeros(c) if mean is None else np.asarray(mean, dtype=np.float64)
    std = np.ones(c) if std is None else np.asarray(std, dtype=np.float64)
    if mean.shape != (c,) or std.shape != (c,):
        raise ShapeError(f"mean/std must have shape ({c},)")

    order = Rng(shuffle_seed).permutation(n) if shuffle_seed is not None else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        imgs = dataset.images[idx]
        if augment_cfg is not None:
            imgs = augment(imgs, augment_cfg, augment_rng or Rng(0))
        x = (imgs.astype(np.float64) / 255.0 - mean[None, :, None, None]) / std[
            None, :, None, None
        ]
        yield Batch(x=Tensor(x), y=dataset.labels[idx])
