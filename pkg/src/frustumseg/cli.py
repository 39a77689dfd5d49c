"""Command-line pipeline: generate | train | infer | eval | gradcheck.

Options resolve in the order CLI flag > config file > built-in default
(the seed additionally falls back to the SFR_SEED environment variable).
The config file is flat JSON keyed by the snake_case option names; every
option is also a --kebab-case flag.  Exit codes: 0 success, 1 usage or
config error, 2 runtime failure.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import infer as infer_mod
from . import metrics as metrics_mod
from . import raster, report, synth
from .geometry import FrustumConfig, scale_ratios
from .loss import LossWeights
from .model import ModelConfig, audit_shapes, gradient_check, load_checkpoint
from .train import TrainConfig, train_loop


class UsageError(Exception):
    """Bad flags or config values; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parse_int_list(text):
    if isinstance(text, (list, tuple)):
        return [float(x) for x in text]
    return [float(tok) for tok in str(text).split(",") if tok.strip()]


_SCHEMA = {
    # name: (converter, default)
    "seed": (int, 0),
    "workers": (int, 1),
    "distances": (_parse_int_list, [1.0, 3.0, 14.0]),
    "unified_size": (int, 128),
    "lambda": (_parse_int_list, [5.0, 1.0, 1.0]),
    "iterations": (int, 1000),
    "batch_size": (int, 1),
    "learning_rate": (float, 6e-5),
    "warmup_iterations": (int, 1500),
    "weight_decay": (float, 0.01),
    "checkpoint_every": (int, 500),
    "base_width": (int, 16),
    "main_depth": (int, 4),
    "sub_depth": (int, 2),
    "attn_dim": (int, 32),
    "classes": (int, 5),
    "stride": (int, None),
    "manifest": (str, None),
    "out": (str, None),
    "checkpoint": (str, None),
    "image": (str, None),
}


class RunConfig:
    """Resolved option values for one command invocation."""

    def __init__(self, args: argparse.Namespace):
        file_values = {}
        config_path = getattr(args, "config", None)
        if config_path:
            try:
                with open(config_path, "r", encoding="utf-8") as f:
                    file_values = json.load(f)
            except (OSError, json.JSONDecodeError) as exc:
                raise UsageError(f"cannot read config file {config_path}: {exc}") from exc
            if not isinstance(file_values, dict):
                raise UsageError(f"config file {config_path} must hold a flat JSON object")
            for key in file_values:
                if key not in _SCHEMA:
                    raise UsageError(f"unknown config field '{key}' in {config_path}")
        self._values = {}
        for name, (convert, default) in _SCHEMA.items():
            cli_value = getattr(args, name, None)
            if cli_value is not None:
                self._values[name] = cli_value
            elif name in file_values:
                try:
                    self._values[name] = convert(file_values[name])
                except (TypeError, ValueError) as exc:
                    raise UsageError(f"config field '{name}': {exc}") from exc
            elif name == "seed" and os.environ.get("SFR_SEED"):
                self._values[name] = int(os.environ["SFR_SEED"])
            else:
                self._values[name] = default

    def __getattr__(self, name):
        try:
            return self._values[name]
        except KeyError:
            raise AttributeError(name) from None

    def require(self, name: str):
        value = self._values.get(name)
        if value is None:
            raise UsageError(f"missing required option --{name.replace('_', '-')}")
        return value

    def frustum(self) -> FrustumConfig:
        size = self._values["unified_size"]
        try:
            return FrustumConfig(
                distances=tuple(self._values["distances"]), unified_size=(size, size)
            )
        except ValueError as exc:
            raise UsageError(f"bad frustum settings: {exc}") from exc

    def model(self) -> ModelConfig:
        try:
            return ModelConfig(
                n_scales=len(self._values["distances"]),
                n_classes=self._values["classes"],
                base_width=self._values["base_width"],
                main_depth=self._values["main_depth"],
                sub_depth=self._values["sub_depth"],
                attn_dim=self._values["attn_dim"],
            )
        except ValueError as exc:
            raise UsageError(f"bad model settings: {exc}") from exc

    def loss_weights(self) -> LossWeights:
        lam = self._values["lambda"]
        if len(lam) != 3:
            raise UsageError(f"lambda needs exactly three weights, got {lam}")
        try:
            return LossWeights(*lam)
        except ValueError as exc:
            raise UsageError(f"bad lambda weights: {exc}") from exc


def _add_common(parser):
    parser.add_argument("--config", help="flat JSON config file")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--workers", type=int)


def build_parser() -> _Parser:
    parser = _Parser(prog="frustumseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset plus manifest")
    _add_common(p)
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--size", type=int, default=512, help="square scene size in pixels")
    p.add_argument("--val-scenes", type=int, default=0)
    p.add_argument("--out", help="output directory (default: dataset)")
    for role in ("croplands", "roads", "rivers", "ponds", "buildings"):
        p.add_argument(f"--{role}", type=int)

    p = sub.add_parser("train", help="train a model from a dataset manifest")
    _add_common(p)
    p.add_argument("--manifest")
    p.add_argument("--out")
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--distances", type=_parse_int_list)
    p.add_argument("--unified-size", type=int)
    p.add_argument("--lambda", dest="lambda", type=_parse_int_list)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--warmup-iterations", type=int)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--base-width", type=int)
    p.add_argument("--main-depth", type=int)
    p.add_argument("--sub-depth", type=int)
    p.add_argument("--attn-dim", type=int)
    p.add_argument("--classes", type=int)

    p = sub.add_parser("infer", help="predict a full image from a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--image")
    p.add_argument("--stride", type=int)
    p.add_argument("--out", help="output label map path (.pgm)")
    p.add_argument("--viz", action="store_true", help="also write a color PPM")

    p = sub.add_parser("eval", help="evaluate a checkpoint or stored predictions")
    _add_common(p)
    p.add_argument("--manifest")
    p.add_argument("--split", default="val", choices=("train", "val"))
    p.add_argument("--checkpoint")
    p.add_argument("--pred-dir", help="directory of <image-stem>_pred.pgm files")
    p.add_argument("--stride", type=int)
    p.add_argument("--overlap-delta", help="stride pair 'a,b' with a > b")
    p.add_argument("--per-class", action="store_true")
    p.add_argument("--classes", type=int)
    p.add_argument("--out")

    p = sub.add_parser("gradcheck", help="finite-difference check of the backward pass")
    _add_common(p)
    p.add_argument("--n-params", type=int, default=200)
    p.add_argument("--step", type=float, default=1e-4)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--unified-size", type=int, default=8)
    p.add_argument("--attn-dim", type=int, default=4)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--base-width", type=int, default=6)
    p.add_argument("--main-depth", type=int, default=2)
    p.add_argument("--sub-depth", type=int, default=1)
    p.add_argument("--distances", type=_parse_int_list)
    p.add_argument("--perturb", action="store_true",
                   help="negative control: corrupt the analytic gradient")
    return parser


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    cfg = RunConfig(args)
    size = args.size
    area = (size * size) / (1024.0 * 1024.0)
    counts = {
        "croplands": args.croplands if args.croplands is not None else 5,
        "roads": args.roads if args.roads is not None else 2,
        "rivers": args.rivers if args.rivers is not None else 2,
        "ponds": args.ponds if args.ponds is not None else max(2, int(6 * area)),
        "buildings": args.buildings if args.buildings is not None else max(4, int(20 * area)),
    }
    try:
        template = synth.SceneSpec(width=size, height=size, seed=cfg.seed, **counts)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out_dir = cfg.out or "dataset"
    manifest = synth.generate_dataset(template, args.scenes, out_dir, args.val_scenes)
    print(manifest)
    return 0


def cmd_train(args) -> int:
    cfg = RunConfig(args)
    out_dir = cfg.out or "runs/train"
    try:
        train_cfg = TrainConfig(
            manifest=cfg.require("manifest"),
            out_dir=out_dir,
            iterations=cfg.iterations,
            frustum=cfg.frustum(),
            model=cfg.model(),
            batch_size=cfg.batch_size,
            learning_rate=cfg.learning_rate,
            warmup_iterations=min(cfg.warmup_iterations, cfg.iterations),
            weight_decay=cfg.weight_decay,
            weights=cfg.loss_weights(),
            seed=cfg.seed,
            checkpoint_every=cfg.checkpoint_every,
            workers=cfg.workers,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    result = train_loop(train_cfg)
    report.save_loss_curves(result.rows, os.path.join(out_dir, "loss_curves.png"))
    print(result.log_path)
    print(result.checkpoint_path)
    return 0


def _default_stride(frustum, image) -> int:
    """A quarter of the local window's native size (non-degenerate scales)."""
    t0 = scale_ratios(frustum)[0]
    if t0 >= 1.0:
        return max(image.width, image.height)
    native = int(round(t0 * min(image.width, image.height)))
    return max(1, native // 4)


def cmd_infer(args) -> int:
    cfg = RunConfig(args)
    params, frustum = load_checkpoint(cfg.require("checkpoint"))
    audit_shapes(params, frustum.unified_size)
    image = raster.load_raster(cfg.require("image"))
    stride = cfg.stride or _default_stride(frustum, image)
    plan = infer_mod.plan_prps(image.dims, scale_ratios(frustum)[0], stride)
    print(
        f"plan: {len(plan.prps)} windows, native {plan.native_size[0]}x{plan.native_size[1]}, "
        f"stride {plan.stride}, local scale ratio {plan.t0:.4f}"
    )
    pred = infer_mod.infer_image(params, image, frustum, stride, workers=cfg.workers)
    stem = os.path.splitext(os.path.basename(cfg.require("image")))[0]
    out_path = cfg.out or f"{stem}_pred.pgm"
    raster.save_labels(pred, out_path)
    print(out_path)
    if args.viz:
        viz_path = os.path.splitext(out_path)[0] + ".ppm"
        raster.save_raster(infer_mod.colorize(pred), viz_path)
        print(viz_path)
    return 0


def _pred_path(pred_dir: str, image_path: str) -> str:
    stem = os.path.splitext(os.path.basename(image_path))[0]
    return os.path.join(pred_dir, f"{stem}_pred.pgm")


def cmd_eval(args) -> int:
    cfg = RunConfig(args)
    entries = [e for e in raster.load_manifest(cfg.require("manifest")) if e.split == args.split]
    if not entries:
        raise UsageError(f"manifest has no '{args.split}' entries")
    out_dir = cfg.out or "runs/eval"
    os.makedirs(out_dir, exist_ok=True)
    class_names = synth.CLASS_NAMES

    if args.pred_dir and cfg.checkpoint:
        raise UsageError("pass either --pred-dir or --checkpoint, not both")

    if args.pred_dir:
        n_classes = cfg.classes
        cm = metrics_mod.ConfusionMatrix(n_classes)
        for entry in entries:
            pred = raster.load_labels(_pred_path(args.pred_dir, entry.image_path), n_classes)
            truth = raster.load_labels(entry.label_path, n_classes)
            cm.update(pred, truth)
    else:
        params, frustum = load_checkpoint(cfg.require("checkpoint"))
        audit_shapes(params, frustum.unified_size)
        n_classes = params.config.n_classes
        if args.overlap_delta:
            try:
                stride_a, stride_b = (int(s) for s in args.overlap_delta.split(","))
            except ValueError as exc:
                raise UsageError(f"--overlap-delta wants 'a,b' integers: {exc}") from exc
            delta_report = metrics_mod.overlap_delta(
                params, entries, frustum, stride_a, stride_b, workers=cfg.workers
            )
            print(delta_report.to_text())
            metrics_mod.write_report_csv(
                delta_report.rows(), os.path.join(out_dir, "overlap_delta.csv")
            )
            with open(os.path.join(out_dir, "overlap_delta.txt"), "w") as f:
                f.write(delta_report.to_text() + "\n")
            report.save_overlap_bars(
                delta_report.miou_no_overlap, delta_report.miou_overlap,
                os.path.join(out_dir, "overlap_delta.png"),
            )
            return 0
        cm = metrics_mod.ConfusionMatrix(n_classes)
        for entry in entries:
            image = raster.load_raster(entry.image_path)
            truth = raster.load_labels(entry.label_path, n_classes)
            stride = cfg.stride or _default_stride(frustum, image)
            pred = infer_mod.infer_image(params, image, frustum, stride, workers=cfg.workers)
            cm.update(pred, truth)

    names = class_names if n_classes == len(class_names) else None
    rows = metrics_mod.summary_rows(cm, per_class=args.per_class, class_names=names)
    print(metrics_mod.format_report(rows))
    metrics_mod.write_report_csv(rows, os.path.join(out_dir, "metrics.csv"))
    with open(os.path.join(out_dir, "metrics.txt"), "w") as f:
        f.write(metrics_mod.format_report(rows) + "\n")
    iou = cm.per_class_iou()
    bars = {
        (names[k] if names else f"class_{k}"): float(iou[k])
        for k in range(n_classes)
        if not np.isnan(iou[k])
    }
    report.save_iou_bars(bars, os.path.join(out_dir, "per_class_iou.png"))
    report.save_confusion_heatmap(cm.counts, os.path.join(out_dir, "confusion_matrix.png"), names)
    return 0


def cmd_gradcheck(args) -> int:
    cfg = RunConfig(args)
    distances = args.distances if args.distances is not None else [1.0, 3.0, 14.0]
    try:
        model_cfg = ModelConfig(
            n_scales=len(distances),
            n_classes=args.classes,
            base_width=args.base_width,
            main_depth=args.main_depth,
            sub_depth=args.sub_depth,
            attn_dim=args.attn_dim,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    size = args.unified_size
    if args.n_params <= 0:
        print("warning: --n-params 0 checks nothing; vacuous pass")
        return 0
    result = gradient_check(
        model_cfg, (size, size),
        n_params=args.n_params, step=args.step, tolerance=args.tolerance,
        seed=cfg.seed, perturb_gradients=args.perturb,
    )
    verdict = "PASS" if result.passed else "FAIL"
    print(
        f"{verdict}: max relative error {result.max_rel_err:.3e} over "
        f"{result.n_checked} sampled parameters (worst: {result.worst_param})"
    )
    return 0 if result.passed else 2


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    handlers = {
        "generate": cmd_generate,
        "train": cmd_train,
        "infer": cmd_infer,
        "eval": cmd_eval,
        "gradcheck": cmd_gradcheck,
    }
    try:
        return handlers[args.command](args)
    except UsageError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - boundary of the process
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
