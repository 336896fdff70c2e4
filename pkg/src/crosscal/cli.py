"""Command-line entry point: synth / render / train / eval / ablate / latency."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import cv2

from . import __version__
from .dataio import CalibrationDataset, depth_overlay, make_sample, write_synth_dataset
from .dataio.synth import SynthSceneParams
from .geometry import DeviationRange, SE3Transform, compose_calibration, quat_to_rotmat
from .trainer import (
    ABLATION_VARIANTS,
    TrainConfig,
    ablation_config,
    append_metrics_record,
    evaluate,
    load_checkpoint,
    measure_latency,
    model_from_checkpoint,
    run_ablation,
    run_record,
    train,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(Exception):
    """Bad invocation (missing files, inconsistent flags): exit code 1."""


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage problems; this tool reserves 2 for runtime
    # failures, so remap
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _resolve_manifest(path: str) -> Path:
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    if not p.exists():
        raise UsageError(f"dataset manifest not found: {p}")
    return p


def write_run_manifest(out_dir: Path, command: str, config: dict, outputs: list[str]) -> Path:
    """Record the resolved invocation before doing any long-running work."""
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": config,
        "argv": sys.argv[1:],
        "version": __version__,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "outputs": outputs,
    }
    path = out_dir / "run_manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    out = Path(args.out)
    seed = args.seed if args.seed is not None else 0
    width, height = args.resolution
    config = {
        "out": str(out),
        "n_scenes": args.n_scenes,
        "n_points": args.n_points,
        "seed": seed,
        "resolution": [width, height],
        "deviation": {"max_translation": args.deviation_t, "max_rotation": args.deviation_r},
        "target": list(args.target or (width, height)),
    }
    write_run_manifest(out, "synth", config, [str(out / "manifest.json")])
    manifest = write_synth_dataset(
        out,
        n_scenes=args.n_scenes,
        n_points=args.n_points,
        seed=seed,
        deviation=DeviationRange(args.deviation_t, args.deviation_r),
        params=SynthSceneParams(width=width, height=height),
        target_wh=tuple(args.target) if args.target else None,
    )
    print(f"wrote {args.n_scenes} scenes to {manifest.parent}")
    return EXIT_OK


def cmd_render(args) -> int:
    manifest_path = _resolve_manifest(args.dataset)
    dataset = CalibrationDataset.from_file(manifest_path)
    if not 0 <= args.frame < len(dataset):
        raise UsageError(f"frame {args.frame} out of range (dataset has {len(dataset)})")
    checkpoint = None
    if args.checkpoint is not None:
        if not Path(args.checkpoint).exists():
            raise UsageError(f"checkpoint not found: {args.checkpoint}")
        checkpoint = load_checkpoint(args.checkpoint)

    out = Path(args.out)
    seed = args.seed if args.seed is not None else 0
    frame = dataset.frame(args.frame)
    deviation = DeviationRange(args.deviation_t, args.deviation_r)
    sample = make_sample(frame, deviation, seed, dataset.manifest.prep)

    stem = f"frame_{args.frame:04d}"
    outputs = [str(out / f"{stem}_miscalibrated.png"), str(out / f"{stem}_groundtruth.png")]
    if checkpoint is not None:
        outputs.append(str(out / f"{stem}_predicted.png"))
    write_run_manifest(
        out,
        "render",
        {
            "dataset": str(manifest_path),
            "frame": args.frame,
            "deviation": {"max_translation": args.deviation_t, "max_rotation": args.deviation_r},
            "seed": seed,
            "checkpoint": args.checkpoint,
        },
        outputs,
    )

    def save(name: str, transform) -> None:
        overlay = depth_overlay(frame.image, frame.cloud, frame.intrinsics, transform)
        cv2.imwrite(str(out / name), overlay[:, :, ::-1])

    save(f"{stem}_miscalibrated.png", sample.t_init)
    save(f"{stem}_groundtruth.png", frame.t_lc)
    if checkpoint is not None:
        pred = model_from_checkpoint(checkpoint).predict(sample)
        t_pred = SE3Transform(quat_to_rotmat(pred.rotation), pred.translation)
        save(f"{stem}_predicted.png", compose_calibration(t_pred, sample.t_init))
    print(f"wrote {len(outputs)} overlays to {out}")
    return EXIT_OK


def _merged_train_config(args) -> TrainConfig:
    # precedence: CLI flag > config file > built-in default
    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    if args.dataset is not None:
        cfg.train_manifest = str(_resolve_manifest(args.dataset))
    if args.val_dataset is not None:
        cfg.val_manifest = str(_resolve_manifest(args.val_dataset))
    if args.out is not None:
        cfg.checkpoint_dir = str(args.out)
    for flag in ("lr", "epochs", "batch_size", "max_steps", "seed"):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg, flag, value)
    if not cfg.train_manifest:
        raise UsageError("a training dataset is required (--dataset or config file)")
    if not Path(cfg.train_manifest).exists():
        raise UsageError(f"dataset manifest not found: {cfg.train_manifest}")
    return cfg


def cmd_train(args) -> int:
    cfg = _merged_train_config(args)
    out = Path(cfg.checkpoint_dir)
    write_run_manifest(out, "train", cfg.to_dict(), [str(out / "latest.pt")])
    result = train(cfg)
    eval_manifest = cfg.val_manifest or cfg.train_manifest
    metrics = evaluate(result.checkpoint_path, eval_manifest)
    append_metrics_record(
        out / "metrics.jsonl",
        run_record("train", cfg, metrics, steps=result.steps, final_loss=result.loss_history[-1]),
    )
    print(metrics.to_table("train"))
    print(f"checkpoint: {result.checkpoint_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if not Path(args.checkpoint).exists():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    manifest = _resolve_manifest(args.dataset)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    write_run_manifest(
        out, "eval", {"checkpoint": str(args.checkpoint), "dataset": str(manifest)}, []
    )
    metrics = evaluate(args.checkpoint, manifest)
    ckpt = load_checkpoint(args.checkpoint)
    cfg = (
        TrainConfig.from_dict(ckpt["train_config"])
        if "train_config" in ckpt
        else TrainConfig(train_manifest=str(manifest))
    )
    append_metrics_record(out / "metrics.jsonl", run_record("eval", cfg, metrics))
    print(metrics.to_table("eval"))
    return EXIT_OK


def cmd_ablate(args) -> int:
    base = _merged_train_config(args)
    ablation_config(args.variant, base)  # validate before writing anything
    out = Path(base.checkpoint_dir)
    write_run_manifest(out, "ablate", {"variant": args.variant, **base.to_dict()}, [])
    report = run_ablation(args.variant, base)
    append_metrics_record(
        out / "metrics.jsonl",
        run_record(
            "ablate",
            base,
            report.metrics,
            variant=args.variant,
            val_loss=report.val_loss,
            latency_mean_ms=report.latency.mean_ms,
        ),
    )
    print(report.metrics.to_table(args.variant))
    print(f"validation loss: {report.val_loss:.6f}  latency: {report.latency.mean_ms:.2f} ms")
    return EXIT_OK


def cmd_latency(args) -> int:
    if not Path(args.checkpoint).exists():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    stats = measure_latency(args.checkpoint, n_warmup=args.n_warmup, n_runs=args.n_runs)
    print(
        f"forward latency: mean {stats.mean_ms:.2f} ms, p95 {stats.p95_ms:.2f} ms "
        f"over {stats.n_runs} runs on {stats.device}"
    )
    return EXIT_OK


# ------------------------------------------------------------------ parser


def _wh(value: str) -> tuple[int, int]:
    try:
        w, h = value.lower().split("x")
        return int(w), int(h)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected WxH, got {value!r}") from exc


def _global_flags(p: argparse.ArgumentParser) -> None:
    # accepted both before and after the subcommand
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the run seed")
    p.add_argument("--config", type=str, default=argparse.SUPPRESS, help="YAML run configuration")
    p.add_argument("--verbose", action="store_true", default=argparse.SUPPRESS, help="debug logging")


def build_parser() -> _Parser:
    parser = _Parser(prog="crosscal", description=__doc__)
    parser.add_argument("--seed", type=int, default=None, help="override the run seed")
    parser.add_argument("--config", type=str, default=None, help="YAML run configuration")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-scenes", type=int, default=8)
    p.add_argument("--n-points", type=int, default=4096)
    p.add_argument("--resolution", type=_wh, default=(256, 128))
    p.add_argument("--target", type=_wh, default=None, help="model input WxH (default: resolution)")
    p.add_argument("--deviation-t", type=float, default=0.1, help="max |translation| in meters")
    p.add_argument("--deviation-r", type=float, default=2.0, help="max |rotation| in degrees")
    _global_flags(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("render", help="write projection overlays for one frame")
    p.add_argument("--dataset", required=True)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--deviation-t", type=float, default=0.0)
    p.add_argument("--deviation-r", type=float, default=0.0)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--out", required=True)
    _global_flags(p)
    p.set_defaults(func=cmd_render)

    for name, fn in (("train", cmd_train), ("ablate", cmd_ablate)):
        p = sub.add_parser(name, help=f"{name} the network")
        p.add_argument("--dataset", default=None)
        p.add_argument("--val-dataset", default=None)
        p.add_argument("--out", default=None)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--batch-size", type=int, default=None)
        p.add_argument("--max-steps", type=int, default=None)
        if name == "ablate":
            p.add_argument("--variant", required=True, choices=sorted(ABLATION_VARIANTS))
        _global_flags(p)
        p.set_defaults(func=fn)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", default=None)
    _global_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("latency", help="measure forward latency")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n-warmup", type=int, default=3)
    p.add_argument("--n-runs", type=int, default=20)
    _global_flags(p)
    p.set_defaults(func=cmd_latency)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 130
    except Exception as exc:  # runtime failure
        logger.exception("command failed: %s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
