"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 config error, 3 runtime failure.
All artifacts (checkpoints, CSV metrics, JSON reports) land under --out.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .core import ConfigError, Modality, TrainConfig, load_config, set_config_value, validate_config
from . import baseline, data, evaluation, losses, models, training


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="codistill",
        description="Joint RGB/Depth segmentation training with cross-modal "
                    "feature disentanglement, plus teacher/student baselines.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_args(p):
        p.add_argument("--config", type=Path, help="flat key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")

    def add_train_args(p):
        add_config_args(p)
        p.add_argument("--data", type=Path, required=True, help="training manifest (.jsonl)")
        p.add_argument("--eval-data", type=Path, help="evaluation manifest")
        p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("gen-synthetic", help="generate a synthetic RGBD dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, required=True, help="number of scenes")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--split", default="train", choices=["train", "test"])
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train", help="joint two-branch training")
    add_train_args(p)
    p.add_argument("--resume", type=Path, help="checkpoint to resume from")

    p = sub.add_parser("train-teacher", help="train the fusion teacher")
    add_train_args(p)

    p = sub.add_parser("train-single", help="train one single-modality baseline")
    add_train_args(p)
    p.add_argument("--modality", choices=["rgb", "depth"], required=True)

    p = sub.add_parser("train-kd-baseline", help="distill a frozen teacher into one modality")
    add_train_args(p)
    p.add_argument("--modality", choices=["rgb", "depth"], required=True)
    p.add_argument("--teacher", type=Path, required=True, help="teacher checkpoint")
    p.add_argument("--alpha", type=float, required=True,
                   help="task-CE weight; 0 learns from soft labels only, 0.5 mixes equally")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    sub.add_parser("losscheck", help="run the loss identity and gradient suite")
    return parser


def _load_cfg(args) -> TrainConfig:
    if args.config is not None:
        return load_config(args.config, args.set)
    cfg = TrainConfig()
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        key, raw = item.split("=", 1)
        set_config_value(cfg, key.strip(), raw)
    return validate_config(cfg)


def _modality(name: str) -> Modality:
    return Modality.RGB if name == "rgb" else Modality.DEPTH


def _cmd_gen_synthetic(args) -> int:
    samples = data.generate_synthetic(args.seed, args.n, args.height, args.width, args.classes)
    manifest = data.write_dataset(samples, args.out, args.classes, split=args.split)
    print(f"wrote {len(samples)} scenes to {manifest}")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_cfg(args)
    train_m = data.load_manifest(args.data)
    eval_m = data.load_manifest(args.eval_data) if args.eval_data else None
    result = training.train(cfg, train_m, eval_m, args.out, resume=args.resume)
    print(f"done: checkpoint {result.checkpoint_path}, metrics {result.metrics_path}")
    return 0


def _cmd_train_teacher(args) -> int:
    cfg = _load_cfg(args)
    train_m = data.load_manifest(args.data)
    eval_m = data.load_manifest(args.eval_data) if args.eval_data else None
    result = baseline.train_teacher(cfg, train_m, eval_m, args.out)
    print(f"done: checkpoint {result.checkpoint_path}")
    return 0


def _cmd_train_single(args) -> int:
    cfg = _load_cfg(args)
    train_m = data.load_manifest(args.data)
    eval_m = data.load_manifest(args.eval_data) if args.eval_data else None
    result = baseline.train_single_modality(cfg, train_m, _modality(args.modality), eval_m, args.out)
    print(f"done: checkpoint {result.checkpoint_path}")
    return 0


def _cmd_train_kd(args) -> int:
    cfg = _load_cfg(args)
    train_m = data.load_manifest(args.data)
    eval_m = data.load_manifest(args.eval_data) if args.eval_data else None
    result = training.train_baseline_kd(
        cfg, args.teacher, _modality(args.modality), args.alpha, train_m, eval_m, args.out)
    print(f"done: checkpoint {result.checkpoint_path}")
    return 0


def _cmd_eval(args) -> int:
    payload = models.load_checkpoint(args.checkpoint)
    cfg = payload["config"]
    manifest = data.load_manifest(args.data)
    samples = data.load_samples(manifest)
    nets = baseline.restore_models(payload)

    report = {}
    for branch, net in nets.items():
        if branch == "teacher":
            def forward(batch, net=net):
                x_rgb, x_d, _ = data.stack_batch(batch)
                net.eval()
                return baseline.teacher_forward(net, x_rgb, x_d)
        else:
            forward = training._branch_forward(net)
        mean, per_class, cm = evaluation.evaluate_forward(
            forward, samples, cfg.num_classes, cfg.batch_size, cfg.ignore_index)
        report[branch] = {"miou": mean, "per_class": per_class,
                          "pixels": cm.total()}
        print(f"branch {branch}")
        for cls, iou in enumerate(per_class):
            print(f"  class {cls:3d}  iou {iou:.4f}")
        print(f"  mIoU {mean:.4f}")

    args.out.mkdir(parents=True, exist_ok=True)
    report_path = args.out / "report.json"
    report_path.write_text(json.dumps(report, indent=2))
    print(f"wrote {report_path}")
    return 0


def _cmd_losscheck(_args) -> int:
    return 0 if losses.losscheck() else 3


_COMMANDS = {
    "gen-synthetic": _cmd_gen_synthetic,
    "train": _cmd_train,
    "train-teacher": _cmd_train_teacher,
    "train-single": _cmd_train_single,
    "train-kd-baseline": _cmd_train_kd,
    "eval": _cmd_eval,
    "losscheck": _cmd_losscheck,
}


def run(argv: list[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
