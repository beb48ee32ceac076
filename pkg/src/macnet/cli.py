"""Command-line entry point: ``macnet synth|split|train|eval|report``.

Exit codes: 0 success, 1 usage error, 2 input error, 3 numeric fault.

Settings resolve as profile defaults < ``--config`` file < explicit flags.
Relative output locations live under ``$MACNET_OUT`` (default ``./runs``).
A training run directory holds::

    config.txt        resolved settings (reusable as --config)
    manifest.csv      copy of the input manifest (absolute image paths)
    history.csv
    checkpoints/      last.ckpt, best.ckpt, epoch_NNNN.ckpt
    reports/<split>/  per_class.csv, confusion.csv, summary.txt, SVG charts
"""

import argparse
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from .data.augment import AugmentationPolicy
from .data.imageio import load_image
from .data.manifest import (
    DEFAULT_RATIOS,
    SPLITS,
    event_split,
    format_stats,
    merge_manifests,
    read_manifest,
    write_manifest,
    write_stats,
)
from .data.synth import generate_synthetic_dataset
from .errors import ConfigurationError, MacNetError, NumericFault
from .metrics import read_report, write_report
from .model import MacNetConfig, init_parameters
from .report import write_report_charts
from .tensor import precision
from .train import LrSchedule, TrainRunConfig, evaluate, load_checkpoint, read_history, train

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3
OUT_ENV = "MACNET_OUT"

log = logging.getLogger("macnet")


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def out_root():
    return Path(os.environ.get(OUT_ENV) or "runs")


def _under_root(path, default):
    if path is None:
        return out_root() / default
    return Path(path)


# settings

# key -> (parser, desk default, paper-faithful default)
TRAIN_KEYS = {
    "seed": (int, 0, 0),
    "epochs": (int, 200, 100),
    "batch_size": (int, 16, 32),
    "base_lr": (float, 0.001, 0.001),
    "step_size_epochs": (int, 20, 20),
    "gamma": (float, 0.1, 0.1),
    "momentum": (float, 0.9, 0.9),
    "weight_decay": (float, 0.0005, 0.0005),
    "augment": (bool, False, True),
    "checkpoint_every": (int, 0, 0),
    "stop_at_train_accuracy": (float, None, None),
    "dtype": (str, "float32", "float32"),
    "workers": (int, 0, 0),
}
_DESK_MODEL = MacNetConfig()
_PAPER_MODEL = MacNetConfig.paper_faithful()
MODEL_KEYS = {
    name: (tuple if isinstance(getattr(_DESK_MODEL, name), tuple) else type(getattr(_DESK_MODEL, name)),
           getattr(_DESK_MODEL, name), getattr(_PAPER_MODEL, name))
    for name in ("width_multiplier", "atrous_branch_width", "atrous_rates", "stage_channels", "stage_depths",
                 "stem_channels", "fc_widths", "dropout_p", "bn_enabled", "input_size")
}
SETTING_KEYS = {"profile": (str, "desk", "paper"), **TRAIN_KEYS, **MODEL_KEYS}


def _parse_value(key, kind, raw):
    raw = raw.strip()
    try:
        if raw.lower() in ("", "none") and key == "stop_at_train_accuracy":
            return None
        if kind is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is tuple:
            return tuple(int(v) for v in raw.replace("x", ",").split(",") if v.strip())
        return kind(raw)
    except ValueError:
        raise UsageError(f"bad value {raw!r} for {key}") from None


def read_config_file(path):
    """Flat ``key = value`` lines; ``#`` starts a comment; unknown keys are rejected."""
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc.strerror}") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, raw = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in SETTING_KEYS:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, SETTING_KEYS[key][0], raw)
    return values


def resolve_settings(file_values, flag_values, paper_faithful=False):
    profile = "paper" if paper_faithful else file_values.get("profile", "desk")
    if profile not in ("desk", "paper"):
        raise UsageError(f"profile must be desk or paper, got {profile!r}")
    column = 2 if profile == "paper" else 1
    settings = {key: spec[column] for key, spec in SETTING_KEYS.items()}
    settings.update(file_values)
    settings.update(flag_values)
    settings["profile"] = profile
    if settings["dtype"] not in ("float32", "float64"):
        raise UsageError(f"dtype must be float32 or float64, got {settings['dtype']!r}")
    return settings


def format_settings(settings):
    lines = []
    for key in SETTING_KEYS:
        v = settings[key]
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{key} = {'none' if v is None else v}")
    return "\n".join(lines) + "\n"


def run_config_from(settings):
    try:
        return TrainRunConfig(
            epochs=settings["epochs"], batch_size=settings["batch_size"], seed=settings["seed"],
            schedule=LrSchedule(settings["base_lr"], settings["step_size_epochs"], settings["gamma"]),
            momentum=settings["momentum"], weight_decay=settings["weight_decay"],
            augmentation=AugmentationPolicy() if settings["augment"] else AugmentationPolicy.disabled(),
            checkpoint_every=settings["checkpoint_every"],
            stop_at_train_accuracy=settings["stop_at_train_accuracy"], workers=settings["workers"])
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from None


def model_config_from(settings, num_classes):
    try:
        return MacNetConfig(num_classes=num_classes, **{k: settings[k] for k in MODEL_KEYS})
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from None


def _dtype_context(name):
    return precision(np.float64) if name == "float64" else nullcontext()


def _load_manifest(path):
    if path is None:
        raise UsageError("--manifest is required")
    path = Path(path)
    if not path.is_file():
        raise InputError(f"manifest not found: {path}")
    return read_manifest(path)


# subcommands


def cmd_synth(args):
    out = _under_root(args.out, "synth")
    split = args.split
    if split == "none":
        split = None
    elif split not in SPLITS:
        split = _ratios(split)
    try:
        manifest = generate_synthetic_dataset(
            out, num_classes=args.classes, events_per_class=args.events_per_class,
            images_per_event=tuple(args.images_per_event), image_size=(args.size, args.size), seed=args.seed,
            family_seed=args.family_seed, split=split, split_seed=args.split_seed)
    except MacNetError:
        raise
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print(format_stats(manifest))
    print(f"wrote {manifest.num_images()} images and {out / 'manifest.csv'}")
    return EXIT_OK


def _ratios(text):
    try:
        values = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"split ratios must be three numbers, got {text!r}") from None
    if len(values) != 3:
        raise UsageError(f"split ratios must be three numbers, got {text!r}")
    return values


def cmd_split(args):
    manifests = [_load_manifest(p) for p in args.manifest]
    merged = manifests[0] if len(manifests) == 1 else merge_manifests(*manifests)
    if args.keep:
        result = merged
    else:
        result = event_split(merged, _ratios(args.ratios), args.seed)
    out = Path(args.out) if args.out else Path(args.manifest[0])
    out.parent.mkdir(parents=True, exist_ok=True)
    write_manifest(result, out)
    write_stats(result, out.with_name(out.stem + "_stats.csv"))
    print(format_stats(result))
    print(f"wrote {out}")
    return EXIT_OK


def _train_flags(args):
    flags = {
        "seed": args.seed, "epochs": args.epochs, "batch_size": args.batch_size, "base_lr": args.lr,
        "width_multiplier": args.width_multiplier, "checkpoint_every": args.checkpoint_every,
        "stop_at_train_accuracy": args.stop_at_train_accuracy, "augment": args.augment,
        "dtype": "float64" if args.float64 else None, "workers": args.workers,
    }
    flags = {k: v for k, v in flags.items() if v is not None}
    explicit = {}
    if args.set:
        for item in args.set:
            if "=" not in item:
                raise UsageError(f"--set expects key=value, got {item!r}")
            key, raw = (p.strip() for p in item.split("=", 1))
            key = key.replace("-", "_")
            if key not in SETTING_KEYS or key == "profile":
                raise UsageError(f"unknown key {key!r}")
            explicit[key] = _parse_value(key, SETTING_KEYS[key][0], raw)
    return flags, explicit


def cmd_train(args):
    file_values = read_config_file(args.config) if args.config else {}
    flags, explicit = _train_flags(args)
    flags.update(explicit)
    settings = resolve_settings(file_values, flags, args.paper_faithful)
    size_given = "input_size" in file_values or "input_size" in flags
    run = run_config_from(settings)
    if args.resume:
        ckpt = Path(args.resume)
        if not ckpt.is_file():
            raise InputError(f"checkpoint not found: {ckpt}")
        run_dir = Path(args.out) if args.out else ckpt.parent.parent
    else:
        run_dir = _under_root(args.out, f"train-seed{settings['seed']}")
    manifest_path = args.manifest or (run_dir / "manifest.csv" if args.resume else None)
    manifest = _load_manifest(manifest_path)
    if manifest.num_images("train") == 0:
        raise InputError(f"{manifest_path}: train split is empty")

    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(format_settings(settings), encoding="utf-8")
    if Path(manifest_path).resolve() != (run_dir / "manifest.csv").resolve():
        write_manifest(merge_manifests(manifest), run_dir / "manifest.csv")

    if args.resume:
        settings["dtype"] = load_checkpoint(args.resume)[3].get("dtype", settings["dtype"])
    with _dtype_context(settings["dtype"]):
        if args.resume:
            model, state, epoch, _ = load_checkpoint(args.resume)
            history = []
            if (run_dir / "history.csv").exists():
                history = [r for r in read_history(run_dir / "history.csv") if r["epoch"] <= epoch]
            print(f"resuming from epoch {epoch + 1}")
            result = train(model, manifest, run, run_dir, state=state, start_epoch=epoch + 1, history=history)
        else:
            first = manifest.samples("train")[0][0]
            if not size_given:
                # follow the data unless a size was asked for explicitly
                settings["input_size"] = tuple(load_image(first).shape[1:])
                (run_dir / "config.txt").write_text(format_settings(settings), encoding="utf-8")
            config = model_config_from(settings, len(manifest.class_names))
            model = init_parameters(config, seed=settings["seed"])
            result = train(model, manifest, run, run_dir)
        reports = {}
        for split in ("val", "test"):
            if manifest.num_images(split):
                reports[split] = evaluate(model, manifest, split)
                _write_eval(reports[split], run_dir / "reports" / split)
    last = result.history[-1] if result.history else {}
    print(f"epochs run: {len(result.history)}  final train_top1: {last.get('train_top1')}")
    if result.best_epoch is not None:
        print(f"best val macro-F1: {result.best_val_f1:.4f} at epoch {result.best_epoch}")
    for split, rep in reports.items():
        print(f"{split}: top1 {rep.top1_accuracy:.4f}  top5 {rep.top5_accuracy:.4f}  macro-F1 {rep.macro_f1:.4f}")
    print(f"wall time: {result.wall_time:.1f}s  run dir: {run_dir}")
    return EXIT_OK


def _write_eval(report, directory):
    write_report(report, directory)
    write_report_charts(report, directory)


def cmd_eval(args):
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise InputError(f"checkpoint not found: {ckpt}")
    manifest = _load_manifest(args.manifest)
    if manifest.num_images(args.split) == 0:
        raise InputError(f"split {args.split!r} has no images")
    model, _, _, meta = load_checkpoint(ckpt)
    if len(manifest.class_names) != model.config.num_classes:
        raise InputError(f"manifest has {len(manifest.class_names)} classes, checkpoint expects "
                         f"{model.config.num_classes}")
    with _dtype_context(meta.get("dtype", "float32")):
        report = evaluate(model, manifest, args.split)
    out = Path(args.out) if args.out else ckpt.parent.parent / "reports" / args.split
    write_report(report, out)
    print(report.summary_text(), end="")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_report(args):
    src = Path(args.report)
    for name in ("per_class.csv", "confusion.csv"):
        if not (src / name).is_file():
            raise InputError(f"missing {src / name}")
    report = read_report(src)
    paths = write_report_charts(report, Path(args.out) if args.out else src)
    print(report.summary_text(), end="")
    for p in paths.values():
        print(f"wrote {p}")
    return EXIT_OK


# parser


def build_parser():
    parser = _Parser(prog="macnet", description="Multi-scale atrous CNN: data, training and reports.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", help=f"dataset directory (default ${OUT_ENV}/synth)")
    p.add_argument("--classes", type=int, default=4, help="number of classes (default 4)")
    p.add_argument("--events-per-class", type=int, default=5, help="events per class (default 5)")
    p.add_argument("--images-per-event", type=int, nargs=2, default=(4, 4), metavar=("MIN", "MAX"),
                   help="frames per event, inclusive range (default 4 4)")
    p.add_argument("--size", type=int, default=64, help="square image extent in pixels (default 64)")
    p.add_argument("--seed", type=int, default=0, help="sampling seed (default 0)")
    p.add_argument("--family-seed", type=int, default=0, help="seed of the class appearance families (default 0)")
    p.add_argument("--split", default="none",
                   help="none, a split name for every event, or train,val,test ratios (default none)")
    p.add_argument("--split-seed", type=int, default=0, help="tie-shuffle seed when ratios are given")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="assign events to train/val/test")
    p.add_argument("--manifest", action="append", required=True,
                   help="input manifest; repeat to merge several")
    p.add_argument("--ratios", default=",".join(str(r) for r in DEFAULT_RATIOS),
                   help="train,val,test image fractions (default %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="tie-shuffle seed (default 0)")
    p.add_argument("--keep", action="store_true", help="merge only; keep the existing split column")
    p.add_argument("--out", help="output manifest (default: overwrite the first input)")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--manifest", help="manifest with a non-empty train split")
    p.add_argument("--config", help="key = value settings file")
    p.add_argument("--paper-faithful", action="store_true",
                   help="full widths and depths, batch 32, 100 epochs, augmentation on")
    p.add_argument("--out", help=f"run directory (default ${OUT_ENV}/train-seed<seed>)")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int, help="must be >= 1")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float, help="base learning rate")
    p.add_argument("--width-multiplier", type=float)
    p.add_argument("--checkpoint-every", type=int, help="extra checkpoint every N epochs (0 = off)")
    p.add_argument("--stop-at-train-accuracy", type=float, help="end the run once train top-1 reaches this")
    p.add_argument("--augment", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--float64", action="store_true", help="64-bit arithmetic")
    p.add_argument("--workers", type=int, help="threads for batch preparation")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any settings key")
    p.add_argument("--resume", metavar="CHECKPOINT", help="continue from a checkpoint at its epoch + 1")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--out", help="report directory (default <run>/reports/<split>)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="render SVG charts from an evaluation report")
    p.add_argument("--report", required=True, help="directory holding per_class.csv and confusion.csv")
    p.add_argument("--out", help="output directory (default: the report directory)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"macnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericFault as exc:
        where = f" (last good checkpoint: {exc.last_good_checkpoint})" if exc.last_good_checkpoint else ""
        print(f"macnet {args.command}: numeric fault: {exc}{where}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, MacNetError, OSError) as exc:
        print(f"macnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
