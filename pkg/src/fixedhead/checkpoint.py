"""Checkpoint container: a directory of raw float64 blobs plus a JSON manifest.

Layout:
    <dir>/manifest.json   schema version, the full run config, head metadata
                          {kind, n_c, K}, and one entry per array
    <dir>/<name>.f64      little-endian float64 bytes, row-major

Files are written to a temporary name and renamed into place, so a reader
never sees a half-written blob. Reloading restores every array bit-exactly,
which makes forward passes reproducible across save/load.
"""

import dataclasses
import json
import os

import numpy as np

from .errors import ConfigError, FormatError

SCHEMA_VERSION = 1


def _atomic_write(path, payload: bytes) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def save_checkpoint(directory, model, config) -> None:
    """Persist a SmallCNN and its TrainConfig."""
    os.makedirs(directory, exist_ok=True)
    arrays = []
    blobs = []
    for name, param in model.named_parameters():
        arrays.append(
            {
                "name": name,
                "shape": list(param.value.shape),
                "role": "param",
                "trainable": param.trainable,
            }
        )
        blobs.append((name, param.value.data))
    for name, buf in model.named_buffers():
        arrays.append({"name": name, "shape": list(buf.shape), "role": "buffer", "trainable": False})
        blobs.append((name, buf))

    manifest = {
        "schema": SCHEMA_VERSION,
        "config": dataclasses.asdict(config),
        "head": {"kind": model.head.kind.value, "n_c": model.head.n_c, "K": model.head.K},
        "arrays": arrays,
    }
    for name, arr in blobs:
        _atomic_write(os.path.join(directory, f"{name}.f64"), arr.astype("<f8").tobytes())
    _atomic_write(
        os.path.join(directory, "manifest.json"),
        json.dumps(manifest, indent=1).encode("utf-8"),
    )


def load_manifest(directory) -> dict:
    path = os.path.join(directory, "manifest.json")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise FormatError(f"{directory}: not a checkpoint (no manifest.json)") from None
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON: {e}") from e
    if manifest.get("schema") != SCHEMA_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint schema {manifest.get('schema')!r}")
    return manifest


def load_checkpoint(directory):
    """Rebuild the model and config saved by save_checkpoint.

    Returns (model, config). Every stored array overwrites the freshly
    constructed one in place, so the loaded model's forward pass is
    bit-identical to the saved model's.
    """
    from .training import TrainConfig, build_model  # cycle: training builds models

    manifest = load_manifest(directory)
    config = TrainConfig(**manifest["config"])
    model = build_model(config)

    stored = {a["name"]: a for a in manifest["arrays"]}
    targets = {name: p.value.data for name, p in model.named_parameters()}
    targets.update({name: buf for name, buf in model.named_buffers()})
    if set(stored) != set(targets):
        raise FormatError(
            f"{directory}: checkpoint arrays {sorted(stored)} do not match "
            f"model arrays {sorted(targets)}"
        )
    for name, meta in stored.items():
        blob_path = os.path.join(directory, f"{name}.f64")
        raw = np.fromfile(blob_path, dtype="<f8")
        shape = tuple(meta["shape"])
        if raw.size != int(np.prod(shape, dtype=np.int64)):
            raise FormatError(f"{blob_path}: size {raw.size} does not match shape {shape}")
        target = targets[name]
        target[...] = raw.reshape(shape)
    return model, config
