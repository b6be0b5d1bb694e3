"""Training and evaluation harness for the small presets.

A run is fully described by a TrainConfig. Given one seed, everything
downstream is deterministic: parameter init, shuffle order, augmentation
draws, and therefore the metrics CSV (set wall_clock=False to zero out the
timing column and make the CSV byte-for-byte reproducible).

The learning-rate schedule is a step schedule: the base rate divided by 10
for every milestone epoch already reached.
"""

import csv
import dataclasses
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, backward, sgd_step, softmax_cross_entropy
from .checkpoint import load_checkpoint, save_checkpoint
from .data import AugmentConfig, Dataset, batch_iter, read_idx, synth_blobs
from .errors import ConfigError, ContractError, TrainingAborted
from .heads import HeadKind
from .model import SmallCNN, build_small_cnn
from .rng import Rng

METRICS_HEADER = ("epoch", "train_loss", "train_acc", "test_acc", "lr", "wall_ms")


@dataclass
class TrainConfig:
    head: str = "Learned"
    preset: str = "tiny3"
    in_channels: int = 1
    classes: int = 10
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_milestones: list = field(default_factory=list)
    seed: int = 0
    # dataset: IDX file paths take precedence; otherwise the synthetic corpus
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    synth_per_class: int = 200
    synth_size: int = 32
    synth_test_per_class: int = 50
    # augmentation (all-zero config disables it)
    pad: int = 0
    crop: int = 0
    hflip_prob: float = 0.0
    # normalization
    mean: list = field(default_factory=lambda: [0.5])
    std: list = field(default_factory=lambda: [0.5])
    wall_clock: bool = True


@dataclass
class MetricsRow:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float
    lr: float
    wall_ms: int


def validate_config(cfg: TrainConfig) -> None:
    # lr == 0 is allowed as the degenerate "touch nothing" run
    if cfg.lr < 0:
        raise ConfigError(f"lr must be >= 0, got {cfg.lr}")
    if cfg.epochs < 1 or cfg.batch_size < 1:
        raise ConfigError("epochs and batch_size must be >= 1")
    ms = list(cfg.lr_milestones)
    if any(b <= a for a, b in zip(ms, ms[1:])):
        raise ConfigError(f"lr_milestones must be strictly increasing, got {ms}")
    if ms and ms[-1] >= cfg.epochs:
        raise ConfigError(f"lr_milestones must all be < epochs={cfg.epochs}")
    HeadKind(cfg.head)


def step_lr(epoch: int, cfg: TrainConfig) -> float:
    """Base lr divided by 10 for every milestone at or before this epoch."""
    drops = sum(1 for m in cfg.lr_milestones if m <= epoch)
    return cfg.lr * 10.0 ** (-drops)


def load_datasets(cfg: TrainConfig) -> tuple[Dataset, Dataset]:
    if cfg.train_images:
        if not (cfg.train_labels and cfg.test_images and cfg.test_labels):
            raise ConfigError("IDX mode needs all four image/label paths")
        train = read_idx(cfg.train_images, cfg.train_labels, cfg.classes)
        test = read_idx(cfg.test_images, cfg.test_labels, cfg.classes)
        test.split = "test"
        return train, test
    train = synth_blobs(cfg.classes, cfg.synth_per_class, cfg.synth_size, cfg.seed)
    test = synth_blobs(
        cfg.classes, cfg.synth_test_per_class, cfg.synth_size, cfg.seed + 1, split="test"
    )
    return train, test


def build_model(cfg: TrainConfig) -> SmallCNN:
    return build_small_cnn(
        cfg.preset, cfg.in_channels, cfg.classes, HeadKind(cfg.head), cfg.seed
    )


def _augment_cfg(cfg: TrainConfig) -> AugmentConfig | None:
    if cfg.pad == 0 and cfg.crop == 0 and cfg.hflip_prob == 0.0:
        return None
    return AugmentConfig(pad=cfg.pad, crop=cfg.crop, hflip_prob=cfg.hflip_prob)


def evaluate_model(model: SmallCNN, dataset: Dataset, cfg: TrainConfig) -> float:
    """Top-1 accuracy with batchnorm in inference mode and no augmentation."""
    correct = 0
    for batch in batch_iter(dataset, cfg.batch_size, mean=cfg.mean, std=cfg.std):
        logits = model.forward(batch.x, train=False)
        correct += int((logits.data.argmax(axis=1) == batch.y).sum())
    return correct / len(dataset)


def evaluate(checkpoint_dir, dataset: Dataset) -> float:
    """Evaluate a saved checkpoint on a dataset."""
    model, cfg = load_checkpoint(checkpoint_dir)
    if dataset.num_classes != cfg.classes:
        raise ConfigError(
            f"checkpoint was trained for {cfg.classes} classes, "
            f"dataset has {dataset.num_classes}"
        )
    return evaluate_model(model, dataset, cfg)


def _write_metrics(path, rows) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        for r in rows:
            writer.writerow(
                [r.epoch, repr(r.train_loss), repr(r.train_acc), repr(r.test_acc),
                 repr(r.lr), r.wall_ms]
            )
    os.replace(tmp, path)


def train(cfg: TrainConfig, out_dir, resume_from=None) -> tuple[str, list[MetricsRow]]:
    """Run the full training loop; returns (checkpoint dir, metric rows).

    Writes <out_dir>/metrics.csv and <out_dir>/checkpoint/. Aborts loudly on a
    non-finite loss. At the end, asserts that every fixed parameter is
    bit-identical to its value at construction (resume included).
    """
    validate_config(cfg)
    os.makedirs(out_dir, exist_ok=True)
    train_ds, test_ds = load_datasets(cfg)
    if train_ds.num_classes != cfg.classes:
        raise ConfigError(
            f"dataset has {train_ds.num_classes} classes, config says {cfg.classes}"
        )

    if resume_from is not None:
        model, saved_cfg = load_checkpoint(resume_from)
        if HeadKind(saved_cfg.head) is not HeadKind(cfg.head):
            raise ConfigError("resume checkpoint was trained with a different head")
    else:
        model = build_model(cfg)

    fixed_at_start = {n: p.value.data.copy() for n, p in model.fixed_parameters()}
    params = model.parameters()
    run_rng = Rng(cfg.seed).split("train-loop")
    aug_cfg = _augment_cfg(cfg)

    rows: list[MetricsRow] = []
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = step_lr(epoch, cfg)
        epoch_rng = run_rng.split(f"epoch{epoch}")
        shuffle_seed = epoch_rng.split("shuffle").seed
        aug_rng = epoch_rng.split("augment")

        loss_sum = 0.0
        seen = 0
        correct = 0
        for bi, batch in enumerate(
            batch_iter(
                train_ds, cfg.batch_size, shuffle_seed=shuffle_seed,
                mean=cfg.mean, std=cfg.std,
                augment_cfg=aug_cfg, augment_rng=aug_rng,
            )
        ):
            with Tape() as tape:
                logits = model.forward(batch.x, train=True)
                loss = softmax_cross_entropy(logits, batch.y)
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                raise TrainingAborted(
                    f"non-finite loss at epoch {epoch}, batch {bi}: {loss_val}"
                )
            backward(loss, tape)
            sgd_step(params, lr=lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)

            b = len(batch.y)
            loss_sum += loss_val * b
            seen += b
            correct += int((logits.data.argmax(axis=1) == batch.y).sum())

        test_acc = evaluate_model(model, test_ds, cfg)
        wall_ms = int(round((time.perf_counter() - t0) * 1000)) if cfg.wall_clock else 0
        rows.append(
            MetricsRow(
                epoch=epoch,
                train_loss=loss_sum / seen,
                train_acc=correct / seen,
                test_acc=test_acc,
                lr=lr,
                wall_ms=wall_ms,
            )
        )
        _write_metrics(os.path.join(out_dir, "metrics.csv"), rows)

    for name, p in model.fixed_parameters():
        if name in fixed_at_start and not np.array_equal(
            fixed_at_start[name], p.value.data
        ):
            raise ContractError(f"fixed parameter {name} changed during training")

    ckpt_dir = os.path.join(out_dir, "checkpoint")
    save_checkpoint(ckpt_dir, model, cfg)
    return ckpt_dir, rows


def compare_heads(cfg: TrainConfig, kinds, out_dir) -> list[tuple[str, float, float]]:
    """Train each head with the same seed and data order; CSV columns head,top1,gap.

    Gap is head accuracy minus the learned baseline's accuracy (positive means
    the fixed head did better). The Learned baseline is always trained, even
    if absent from kinds.
    """
    kinds = [HeadKind(k) for k in kinds]
    ordered = [HeadKind.LEARNED] + [k for k in kinds if k is not HeadKind.LEARNED]
    accs: dict[HeadKind, float] = {}
    for kind in ordered:
        run_cfg = dataclasses.replace(cfg, head=kind.value)
        _, rows = train(run_cfg, os.path.join(out_dir, kind.value))
        accs[kind] = rows[-1].test_acc

    baseline = accs[HeadKind.LEARNED]
    results = [(k.value, accs[k], accs[k] - baseline) for k in kinds]

    path = os.path.join(out_dir, "compare.csv")
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(("head", "top1", "gap"))
        for name, top1, gap in results:
            writer.writerow([name, repr(top1), repr(gap)])
    os.replace(tmp, path)
    return results
