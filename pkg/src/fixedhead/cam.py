"""Class-map export for identity-head models.

With the identity head, the score of class c is literally the spatial mean of
channel c in the final feature map, so each channel is a class activation map
obtained for free during the forward pass. This module dumps those maps as
8-bit PGM images (one per class, min-max normalized) plus a JSON sidecar with
the raw logits and the predicted class.
"""

import json
import os

import numpy as np

from .autodiff import Tensor, global_avg_pool
from .checkpoint import load_checkpoint
from .data import Dataset
from .errors import ContractError, UnsupportedHeadError
from .heads import HeadKind


def write_pgm(path, image: np.ndarray) -> None:
    """Write a 2-d uint8 array as a binary (P5) PGM file, atomically."""
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ValueError("write_pgm expects a 2-d uint8 array")
    h, w = image.shape
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())
    os.replace(tmp, path)


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P5":
            raise ValueError(f"{path}: not a binary PGM")
        w, h = map(int, fh.readline().split())
        maxval = int(fh.readline())
        if maxval != 255:
            raise ValueError(f"{path}: expected maxval 255, got {maxval}")
        return np.frombuffer(fh.read(w * h), dtype=np.uint8).reshape(h, w)


def _normalize_map(m: np.ndarray) -> np.ndarray:
    lo, hi = float(m.min()), float(m.max())
    if hi == lo:
        return np.zeros(m.shape, dtype=np.uint8)
    return np.round((m - lo) / (hi - lo) * 255.0).astype(np.uint8)


def export_cam(checkpoint_dir, dataset: Dataset, index: int, out_dir) -> dict:
    """Export per-class activation maps for one image of a dataset.

    Only identity-head checkpoints are supported: for any other head the maps
    are not the class scores. Before normalization, each channel's mean is
    checked to equal the corresponding logit exactly.
    """
    model, cfg = load_checkpoint(checkpoint_dir)
    if model.head.kind is not HeadKind.FIXED_IDENTITY:
        raise UnsupportedHeadError(
            f"class maps are only free with the identity head, "
            f"checkpoint uses {model.head.kind.value}"
        )
    img = dataset.images[index : index + 1]
    mean = np.asarray(cfg.mean, dtype=np.float64)
    std = np.asarray(cfg.std, dtype=np.float64)
    x = (img.astype(np.float64) / 255.0 - mean[None, :, None, None]) / std[
        None, :, None, None
    ]

    fmap = model.features(Tensor(x), train=False)
    logits = global_avg_pool(fmap).data[0]
    maps = fmap.data[0]  # (K, H', W')

    k, h, w = maps.shape
    means = maps.reshape(k, h * w).mean(axis=1)
    if not np.array_equal(means, logits):
        raise ContractError("channel means diverged from logits; identity head broken")
    predicted = int(np.argmax(logits))

    os.makedirs(out_dir, exist_ok=True)
    for c in range(k):
        write_pgm(os.path.join(out_dir, f"class_{c:03d}.pgm"), _normalize_map(maps[c]))

    sidecar = {
        "image_index": int(index),
        "label": int(dataset.labels[index]),
        "predicted_class": predicted,
        "logits": [float(v) for v in logits],
        "map_shape": [int(h), int(w)],
    }
    tmp = os.path.join(out_dir, "cam.json.tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=1)
        fh.write("\n")
    os.replace(tmp, os.path.join(out_dir, "cam.json"))
    return sidecar
