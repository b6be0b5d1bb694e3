"""Command-line entry point.

Subcommands:
    train     train one model, writing metrics.csv and a checkpoint directory
    eval      top-1 accuracy of a checkpoint on a dataset
    audit     parameter audit of an architecture JSON (optionally headless)
    cam       export per-class activation maps for an identity-head checkpoint
    compare   train every head variant with one seed and report accuracy gaps

Flags mirror TrainConfig fields; --config may point to a JSON file supplying
defaults that explicit flags override. Exit code is 0 on success, 1 on any
fixedhead error (diagnostic on stderr).
"""

import argparse
import dataclasses
import json
import sys

from . import audit as audit_mod
from .data import read_idx, synth_blobs
from .errors import ConfigError, FixedheadError
from .heads import HeadKind
from .training import TrainConfig, compare_heads, evaluate, train


def _add_dataset_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--train-images", help="IDX image file (train split)")
    p.add_argument("--train-labels", help="IDX label file (train split)")
    p.add_argument("--test-images", help="IDX image file (test split)")
    p.add_argument("--test-labels", help="IDX label file (test split)")
    p.add_argument("--synth-per-class", type=int, help="synthetic train images per class")
    p.add_argument("--synth-test-per-class", type=int, help="synthetic test images per class")
    p.add_argument("--synth-size", type=int, help="synthetic image side length")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with TrainConfig defaults")
    p.add_argument("--head", choices=[k.value for k in HeadKind])
    p.add_argument("--preset", help="model preset (tiny3)")
    p.add_argument("--classes", type=int)
    p.add_argument("--in-channels", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--lr-milestones", help="comma-separated epoch indices, e.g. 81,122")
    p.add_argument("--seed", type=int)
    p.add_argument("--pad", type=int, help="augmentation padding (pixels per side)")
    p.add_argument("--crop", type=int, help="augmentation crop size")
    p.add_argument("--hflip-prob", type=float)
    p.add_argument("--mean", help="comma-separated per-channel mean")
    p.add_argument("--std", help="comma-separated per-channel std")
    p.add_argument(
        "--no-wall-clock", action="store_true",
        help="write wall_ms as 0 for byte-reproducible metrics",
    )
    _add_dataset_flags(p)


_LIST_FIELDS = {"lr_milestones": int, "mean": float, "std": float}


def _build_config(args) -> TrainConfig:
    values = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            values.update(json.load(fh))
    field_names = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(values) - field_names
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")

    for name in field_names:
        flag = getattr(args, name, None)
        if flag is None:
            continue
        if name in _LIST_FIELDS and isinstance(flag, str):
            conv = _LIST_FIELDS[name]
            flag = [conv(v) for v in flag.split(",") if v]
        values[name] = flag
    if getattr(args, "no_wall_clock", False):
        values["wall_clock"] = False
    return TrainConfig(**values)


def _load_eval_dataset(args, cfg: TrainConfig):
    if args.test_images:
        if not args.test_labels:
            raise ConfigError("--test-images needs --test-labels")
        ds = read_idx(args.test_images, args.test_labels, cfg.classes)
        ds.split = "test"
        return ds
    return synth_blobs(
        cfg.classes, cfg.synth_test_per_class, cfg.synth_size, cfg.seed + 1, split="test"
    )


def _cmd_train(args) -> int:
    cfg = _build_config(args)
    ckpt, rows = train(cfg, args.out, resume_from=args.resume)
    last = rows[-1]
    print(f"checkpoint: {ckpt}")
    print(f"final epoch {last.epoch}: train_acc={last.train_acc:.4f} test_acc={last.test_acc:.4f}")
    return 0


def _cmd_eval(args) -> int:
    from .checkpoint import load_manifest

    manifest = load_manifest(args.checkpoint)
    cfg = TrainConfig(**manifest["config"])
    dataset = _load_eval_dataset(args, cfg)
    acc = evaluate(args.checkpoint, dataset)
    print(f"top1 {acc!r}")
    return 0


def _cmd_audit(args) -> int:
    spec = audit_mod.load_spec(args.spec)
    baseline = audit_mod.with_classes(spec, args.classes) if args.classes else spec
    report = audit_mod.count_total(baseline)
    print(f"arch: {baseline.name} (classes={baseline.num_classes})")
    print(f"total_params: {report.total_params}")
    print(f"classifier_params: {report.classifier_params}")
    print(f"feature_params: {report.feature_params}")
    print(f"classifier_fraction: {report.classifier_fraction:.4f}")
    rows = [("baseline", report, None)]
    if args.headless:
        transformed = audit_mod.headless_transform(baseline, baseline.num_classes)
        t_report = audit_mod.count_total(transformed)
        saved = audit_mod.savings(report, t_report)
        t_report.savings_vs_baseline = saved
        print(f"headless_total_params: {t_report.total_params}")
        print(f"savings: {saved * 100.0:.2f}%")
        rows.append(("headless", t_report, saved))
    if args.csv:
        import csv as _csv

        with open(args.csv, "w", newline="", encoding="utf-8") as fh:
            w = _csv.writer(fh)
            w.writerow(("variant", "total_params", "classifier_params",
                        "classifier_fraction", "savings"))
            for name, rep, saved in rows:
                w.writerow([name, rep.total_params, rep.classifier_params,
                            repr(rep.classifier_fraction),
                            "" if saved is None else repr(saved)])
    return 0


def _cmd_cam(args) -> int:
    from .cam import export_cam
    from .checkpoint import load_manifest

    manifest = load_manifest(args.checkpoint)
    cfg = TrainConfig(**manifest["config"])
    dataset = _load_eval_dataset(args, cfg)
    sidecar = export_cam(args.checkpoint, dataset, args.index, args.out)
    print(f"predicted class {sidecar['predicted_class']} (label {sidecar['label']})")
    print(f"maps written to {args.out}")
    return 0


def _cmd_compare(args) -> int:
    cfg = _build_config(args)
    kinds = [k for k in args.heads.split(",") if k]
    results = compare_heads(cfg, kinds, args.out)
    for name, top1, gap in results:
        print(f"{name}: top1={top1:.4f} gap={gap:+.4f}")
    print(f"csv: {args.out}/compare.csv")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fixedhead", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model")
    _add_train_flags(p)
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    _add_dataset_flags(p)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("audit", help="parameter audit of an architecture JSON")
    p.add_argument("--spec", required=True, help="architecture JSON path")
    p.add_argument("--classes", type=int, help="retarget the classifier to K classes")
    p.add_argument("--headless", action="store_true", help="also audit the headless transform")
    p.add_argument("--csv", help="write the report as CSV")
    p.set_defaults(fn=_cmd_audit)

    p = sub.add_parser("cam", help="export class activation maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", type=int, default=0, help="dataset image index")
    p.add_argument("--out", required=True, help="output directory")
    _add_dataset_flags(p)
    p.set_defaults(fn=_cmd_cam)

    p = sub.add_parser("compare", help="train several heads and report gaps")
    _add_train_flags(p)
    p.add_argument(
        "--heads",
        default=",".join(k.value for k in HeadKind),
        help="comma-separated head kinds",
    )
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=_cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except FixedheadError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
