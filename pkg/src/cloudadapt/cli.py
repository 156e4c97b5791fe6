"""Command line surface: dataset generation, training, evaluation, gradient
checking, and report/plot emission.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric failure
(divergence or a failed gradient check).
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import fields as dataclass_fields
from pathlib import Path

import numpy as np

from . import datasets as D
from . import trainer as T
from . import verification
from .trainer import TrainConfig, TrainDivergedError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

PROFILES = {
    "clean": D.CLEAN_PROFILE,
    "shifted": D.SHIFTED_PROFILE,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad flags; we reserve 2 for data
    errors, so route usage problems through UsageError instead."""

    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------

_TRAIN_FIELDS = {f.name: f for f in dataclass_fields(TrainConfig)}
# tuple-valued architecture fields are fixed per run, not CLI-tunable
_CLI_EXCLUDED = {"edgeconv_widths", "decoder_widths"}


def _field_type(name):
    t = _TRAIN_FIELDS[name].type
    return {"int": int, "float": float, "str": str, "bool": bool}[t]


def add_train_flags(parser: argparse.ArgumentParser) -> None:
    """One flag per TrainConfig field, defaults taken from the dataclass."""
    for name, f in _TRAIN_FIELDS.items():
        if name in _CLI_EXCLUDED:
            continue
        flag = "--" + name.replace("_", "-")
        kind = _field_type(name)
        if kind is bool:
            parser.add_argument(flag, default=None, type=_parse_bool,
                                metavar="BOOL",
                                help=f"{name} (default: {f.default})")
        else:
            parser.add_argument(flag, default=None, type=kind,
                                help=f"{name} (default: {f.default})")


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def read_config_file(path) -> dict:
    """Flat key=value lines; blank lines and # comments ignored."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in _TRAIN_FIELDS or key in _CLI_EXCLUDED:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        kind = _field_type(key)
        try:
            values[key] = _parse_bool(raw) if kind is bool else kind(raw)
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise UsageError(f"{path}:{lineno}: {exc}") from exc
    return values


def build_train_config(args) -> TrainConfig:
    """Dataclass defaults, overridden by the config file, overridden by any
    flag the user passed explicitly."""
    values = {}
    if args.config is not None:
        values.update(read_config_file(args.config))
    for name in _TRAIN_FIELDS:
        if name in _CLI_EXCLUDED:
            continue
        given = getattr(args, name)
        if given is not None:
            values[name] = given
    try:
        return TrainConfig(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    profile = D.DomainProfile(
        noise_sigma=args.noise_sigma, occlusion_fraction=args.occlusion_fraction,
        density_bias=args.density_bias, dropout_fraction=args.dropout_fraction,
    ) if args.profile == "custom" else PROFILES[args.profile]
    classes = D.default_class_specs(args.mode)
    paths = D.build_dataset(classes, args.per_class, profile, args.points,
                            seed=args.seed, out_dir=args.out, mode=args.mode)
    for name, path in paths.items():
        print(f"wrote {path}")
        if args.export_csv:
            csv_path = Path(path).with_suffix(".csv")
            D.export_csv(D.load_pcds(path), csv_path)
            print(f"wrote {csv_path}")
    return EXIT_OK


def _load_splits(root) -> T.Splits:
    root = Path(root)
    parts = []
    for name in ("train", "val", "test"):
        path = root / f"{name}.pcds"
        if not path.exists():
            raise D.DatasetFormatError(f"missing split file {path}")
        parts.append(D.load_pcds(path))
    return T.Splits(*parts)


def cmd_train(args) -> int:
    cfg = build_train_config(args)
    source = _load_splits(args.source)
    target = _load_splits(args.target)
    for name, splits in (("source", source), ("target", target)):
        for ds in splits:
            if ds.mode != cfg.mode:
                raise D.DatasetFormatError(
                    f"{name} data is {ds.mode} but config mode is {cfg.mode}")
            if ds.points != cfg.points:
                raise D.DatasetFormatError(
                    f"{name} data has {ds.points} points, config expects {cfg.points}")
    log = print if args.verbose else None
    report = T.train(cfg, source, target, run_dir=args.out, log=log)
    metric = report.metric_name()
    last = report.rows[-1]
    print(f"final student_{metric} {last[f'student_{metric}']:.4f}  "
          f"teacher_{metric} {last[f'teacher_{metric}']:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = T.load_checkpoint(args.checkpoint)
    dataset = D.load_pcds(args.data)
    score = T.evaluate(ckpt.model, dataset)
    name = "acc" if dataset.mode == "classification" else "miou"
    print(f"{name} {score:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    ok = verification.run_gradcheck(cases_per_op=args.cases, seed=args.seed)
    return EXIT_OK if ok else EXIT_NUMERIC


def _read_metrics_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise D.DatasetFormatError(f"{path}: empty metrics file")
    metric = next((c[len("student_"):] for c in rows[0]
                   if c.startswith("student_")), None)
    if metric is None or "epoch" not in rows[0]:
        raise D.DatasetFormatError(f"{path}: not a metrics CSV")
    epochs = [int(r["epoch"]) for r in rows]
    series = [float(r[f"student_{metric}"]) for r in rows]
    return metric, epochs, series


def write_svg_curves(series, path, ylabel: str) -> None:
    """Hand-rolled SVG line plot: one polyline per (label, xs, ys) series."""
    width, height = 640, 400
    left, right, top, bottom = 60, 150, 20, 40
    pw, ph = width - left - right, height - top - bottom
    xmax = max(max(xs) for _, xs, _ in series) or 1
    ymin = min(min(ys) for _, _, ys in series)
    ymax = max(max(ys) for _, _, ys in series)
    if ymax - ymin < 1e-12:
        ymax = ymin + 1.0

    def px(x):
        return left + pw * x / xmax

    def py(y):
        return top + ph * (1.0 - (y - ymin) / (ymax - ymin))

    colors = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b", "#e377c2")
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" '
        'fill="none" stroke="#333"/>',
    ]
    for i in range(5):
        y = ymin + (ymax - ymin) * i / 4
        x = xmax * i / 4
        parts.append(f'<line x1="{left}" y1="{py(y):.1f}" x2="{left + pw}" '
                     f'y2="{py(y):.1f}" stroke="#ddd"/>')
        parts.append(f'<text x="{left - 6}" y="{py(y) + 4:.1f}" font-size="11" '
                     f'text-anchor="end">{y:.3g}</text>')
        parts.append(f'<text x="{px(x):.1f}" y="{height - bottom + 16}" '
                     f'font-size="11" text-anchor="middle">{x:.3g}</text>')
    parts.append(f'<text x="{left + pw / 2:.1f}" y="{height - 6}" font-size="12" '
                 'text-anchor="middle">epoch</text>')
    parts.append(f'<text x="14" y="{top + ph / 2:.1f}" font-size="12" '
                 f'text-anchor="middle" transform="rotate(-90 14 {top + ph / 2:.1f})"'
                 f'>{ylabel}</text>')
    for i, (label, xs, ys) in enumerate(series):
        color = colors[i % len(colors)]
        pts = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in zip(xs, ys))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                     'stroke-width="1.5"/>')
        ly = top + 14 + 16 * i
        parts.append(f'<line x1="{left + pw + 8}" y1="{ly - 4}" '
                     f'x2="{left + pw + 28}" y2="{ly - 4}" stroke="{color}" '
                     'stroke-width="1.5"/>')
        parts.append(f'<text x="{left + pw + 32}" y="{ly}" font-size="11">'
                     f'{label}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")


def cmd_report(args) -> int:
    series = []
    finals = []
    metric = None
    for path in args.csv:
        m, epochs, values = _read_metrics_csv(path)
        if metric is None:
            metric = m
        elif m != metric:
            raise D.DatasetFormatError(
                f"{path}: metric {m!r} differs from {metric!r}")
        series.append((Path(path).stem if len(args.csv) > 1 else Path(path).name,
                       epochs, values))
        finals.append(values[-1])
    write_svg_curves(series, args.out, f"student {metric}")
    print(f"wrote {args.out}")
    mean = float(np.mean(finals))
    if len(finals) > 1:
        sem = float(np.std(finals, ddof=1) / np.sqrt(len(finals)))
    else:
        sem = 0.0
    print(f"runs {len(finals)}  final student_{metric} "
          f"mean {mean:.4f} +/- SEM {sem:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cloudadapt",
                     description="Self-ensembling domain adaptation for point clouds")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("gen-data", help="generate a PCDS dataset",
                       description="Generate train/val/test PCDS files.")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--mode", choices=("classification", "segmentation"),
                   default="classification", help="label mode (default: classification)")
    p.add_argument("--profile", choices=("clean", "shifted", "custom"),
                   default="clean", help="domain profile (default: clean)")
    p.add_argument("--per-class", type=int, default=50,
                   help="samples per class (default: 50)")
    p.add_argument("--points", type=int, default=64,
                   help="points per cloud (default: 64)")
    p.add_argument("--seed", type=int, default=0, help="seed (default: 0)")
    p.add_argument("--noise-sigma", type=float, default=0.0,
                   help="custom profile: noise sigma (default: 0.0)")
    p.add_argument("--occlusion-fraction", type=float, default=0.0,
                   help="custom profile: occluded fraction (default: 0.0)")
    p.add_argument("--density-bias", type=float, default=0.0,
                   help="custom profile: density bias exponent (default: 0.0)")
    p.add_argument("--dropout-fraction", type=float, default=0.0,
                   help="custom profile: dropout fraction (default: 0.0)")
    p.add_argument("--export-csv", action="store_true",
                   help="also dump each split as CSV")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train on a source/target pair",
                       description="Joint student/teacher training over PCDS splits.")
    p.add_argument("--source", required=True, help="source dataset directory")
    p.add_argument("--target", required=True, help="target dataset directory")
    p.add_argument("--out", required=True, help="run directory for CSV/checkpoints")
    p.add_argument("--config", default=None,
                   help="key=value config file; explicit flags override it")
    p.add_argument("--verbose", action="store_true", help="log every epoch")
    add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint",
                       description="Print accuracy/mIoU of a checkpoint on a PCDS file.")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="PCDS dataset file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="run the finite-difference suite",
                       description="Finite-difference check of every primitive "
                                   "and the full loss; nonzero exit on failure.")
    p.add_argument("--cases", type=int, default=50,
                   help="random cases per primitive (default: 50)")
    p.add_argument("--seed", type=int, default=0, help="seed (default: 0)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="render metrics CSVs to SVG + summary",
                       description="Learning-curve SVG plus mean +/- SEM of the "
                                   "final student metric over the given runs.")
    p.add_argument("--out", required=True, help="output SVG path")
    p.add_argument("csv", nargs="+", help="metrics.csv files (one per seed run)")
    p.set_defaults(func=cmd_report)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "func", None) is None:
            parser.print_help()
            return EXIT_USAGE
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (D.DatasetFormatError, T.CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
