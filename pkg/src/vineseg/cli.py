"""Command-line entry point: ``vineseg <command> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import re
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .arch import DESK_FILTERS
from .checkpoint import CheckpointError, load_checkpoint
from .config import CONFIG_KEYS, ConfigError, load_config
from .kvfile import dump_kv
from .metrics import class_names
from .synth import DEFAULT_NOISE, InfeasibleGeometry, generate_dataset
from .train import Segmenter, TrainingError, evaluate, train

SIZE_MULTIPLE = 2 ** (len(DESK_FILTERS) - 1)


class CommandError(RuntimeError):
    pass


def _size(text: str) -> tuple[int, int]:
    m = re.fullmatch(r"(\d+)[xX](\d+)", text.strip())
    if not m:
        raise argparse.ArgumentTypeError(f"invalid size {text!r}; expected HxW, e.g. 64x64")
    return int(m.group(1)), int(m.group(2))


def _positive(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _non_negative(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {v}")
    return v


def _override(text: str) -> tuple[str, str]:
    key, sep, value = text.partition("=")
    if not sep or not key.strip():
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    return key.strip(), value.strip()


def _prepare_out_dir(path: Path, force: bool) -> None:
    if path.exists() and not path.is_dir():
        raise CommandError(f"{path} exists and is not a directory")
    if path.is_dir() and any(path.iterdir()) and not force:
        raise CommandError(f"{path} is not empty; pass --force to write into it")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, parser) -> int:
    h, w = args.size
    if h % SIZE_MULTIPLE or w % SIZE_MULTIPLE:
        parser.error(f"--size {h}x{w}: extents must divide by {SIZE_MULTIPLE} "
                     f"for the default {len(DESK_FILTERS)}-level architecture")
    if args.noise < 0:
        parser.error("--noise must be non-negative")
    out = Path(args.out)
    _prepare_out_dir(out, args.force)
    generate_dataset(out, args.count, h, w, args.contrast, args.seed, args.noise)
    print(f"wrote {args.count} image/trimap pairs of {h}x{w} to {out}")
    return 0


def cmd_train(args, parser, mode: str) -> int:
    cfg = load_config(args.config, dict(args.set or []))
    if cfg.mode != mode:
        raise CommandError(f"{args.config}: mode = {cfg.mode}, use the "
                           f"{'train' if cfg.mode == 'supervised' else 'train-unsup'} command")

    def log(group):
        print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in group.items()),
              flush=True)

    result = train(cfg, log)
    where = cfg.resolve(cfg.checkpoint)
    print(f"checkpoint: {where if where else '(not written; no checkpoint path configured)'}")
    return 0


def cmd_eval(args, parser) -> int:
    seg = Segmenter.from_checkpoint(args.model)
    data_dir = Path(args.data)
    if not (data_dir / "trimaps").is_dir():
        raise CommandError(f"{data_dir}: missing trimaps/ directory; evaluation needs ground truth")
    samples = D.load_dataset(data_dir, require_trimaps=True)
    metrics = evaluate(seg, samples, args.sigmoid_correct)
    text = dump_kv(metrics)
    print(text, end="")
    if args.report:
        Path(args.report).write_text(text, encoding="utf-8")
    return 0


def cmd_segment(args, parser) -> int:
    seg = Segmenter.from_checkpoint(args.model)
    img = D.load_image(args.image)
    mask = seg.predict([img], args.sigmoid_correct)[0]
    out = Path(args.out)
    D.save_colorized(mask, out)
    trimap_path = out.with_name(f"{out.stem}_trimap.png")
    D.save_trimap(mask, trimap_path)
    print(f"wrote {out} and {trimap_path}")
    if args.probs:
        probs = seg.probabilities([img], args.sigmoid_correct)[0]
        pdir = Path(args.probs)
        pdir.mkdir(parents=True, exist_ok=True)
        names = class_names(seg.cfg.num_classes) if seg.cfg.mode == "supervised" else \
            tuple(f"cluster{c}" for c in range(seg.channels))
        for name, p in zip(names, probs):
            D.save_image(p[None], pdir / f"{Path(args.image).stem}_prob_{name}.png")
        print(f"wrote {len(names)} probability maps to {pdir}")
    return 0


def cmd_augment(args, parser) -> int:
    try:
        params = D.AugmentParams(args.max_rotation, (args.zoom_min, args.zoom_max))
    except ValueError as exc:
        parser.error(str(exc))
    out = Path(args.out)
    if out.resolve() == Path(args.data).resolve():
        raise CommandError("--out must differ from --data; inputs are never modified")
    samples = D.load_dataset(args.data, require_trimaps=False)
    _prepare_out_dir(out, args.force)
    result = D.augment_samples(samples, args.copies, args.seed, params)
    D.write_dataset(out, result)
    print(f"wrote {len(result)} images ({len(samples)} originals, {len(result) - len(samples)} augmented) to {out}")
    return 0


def cmd_inspect(args, parser) -> int:
    ckpt = load_checkpoint(args.model)
    total = sum(int(np.prod(t.shape)) for t in ckpt.tensors.values())
    print(f"format version: {ckpt.version}")
    print(f"tensors: {len(ckpt.tensors)}  parameters: {total:,}")
    width = max((len(n) for n in ckpt.tensors), default=0)
    for name, t in ckpt.tensors.items():
        print(f"  {name:<{width}}  {'x'.join(map(str, t.shape))}")
    print("config:")
    for k, v in ckpt.config.items():
        print(f"  {k} = {v}")
    print("metrics:")
    for k, v in ckpt.metrics.items():
        print(f"  {k} = {v!r}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vineseg", description="Leaf blade and vein segmentation toolkit.")
    sub = p.add_subparsers(dest="command", metavar="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic leaf dataset")
    s.add_argument("--count", type=_positive, required=True, help="number of image/trimap pairs")
    s.add_argument("--size", type=_size, default=(64, 64), help="image size HxW (default 64x64)")
    s.add_argument("--contrast", choices=("high", "low", "none"), default="high", help="vein/blade contrast")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noise", type=float, default=DEFAULT_NOISE, help="Gaussian pixel noise sigma")
    s.add_argument("--out", required=True, help="output dataset directory")
    s.add_argument("--force", action="store_true", help="write into a non-empty directory")
    s.set_defaults(func=cmd_synth)

    for name, mode, helptext in (("train", "supervised", "supervised training from a config file"),
                                 ("train-unsup", "unsupervised", "fuzzy c-means training from a config file")):
        t = sub.add_parser(name, help=helptext,
                           epilog="config keys: " + ", ".join(CONFIG_KEYS))
        t.add_argument("--config", required=True, help="key = value run configuration")
        t.add_argument("--set", type=_override, action="append", metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        t.set_defaults(func=lambda a, pr, m=mode: cmd_train(a, pr, m))

    e = sub.add_parser("eval", help="score a checkpoint on a dataset with trimaps")
    e.add_argument("--model", required=True, help="checkpoint file")
    e.add_argument("--data", required=True, help="dataset directory with images/ and trimaps/")
    e.add_argument("--report", help="also write the metrics as key = value to this file")
    e.add_argument("--sigmoid-correct", action=argparse.BooleanOptionalAction, default=None,
                   help="override the checkpoint's sigmoid correction setting")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("segment", help="segment one image")
    g.add_argument("--model", required=True, help="checkpoint file")
    g.add_argument("--image", required=True, help="input PNG")
    g.add_argument("--out", required=True, help="colorized mask PNG; the raw trimap goes to <stem>_trimap.png")
    g.add_argument("--probs", help="directory for per-class probability PNGs")
    g.add_argument("--sigmoid-correct", action=argparse.BooleanOptionalAction, default=None,
                   help="override the checkpoint's sigmoid correction setting")
    g.set_defaults(func=cmd_segment)

    a = sub.add_parser("augment", help="write a dataset extended by rotated/zoomed copies")
    a.add_argument("--data", required=True, help="input dataset directory")
    a.add_argument("--copies", type=_non_negative, required=True, help="augmented copies per image")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--max-rotation", type=float, default=D.DEFAULT_MAX_ROTATION_DEG, help="degrees")
    a.add_argument("--zoom-min", type=float, default=D.DEFAULT_ZOOM_RANGE[0])
    a.add_argument("--zoom-max", type=float, default=D.DEFAULT_ZOOM_RANGE[1])
    a.add_argument("--out", required=True, help="output dataset directory")
    a.add_argument("--force", action="store_true", help="write into a non-empty directory")
    a.set_defaults(func=cmd_augment)

    i = sub.add_parser("inspect-ckpt", help="print a checkpoint's tensors, config and metrics")
    i.add_argument("--model", required=True, help="checkpoint file")
    i.set_defaults(func=cmd_inspect)
    return p


RUNTIME_ERRORS = (CommandError, ConfigError, CheckpointError, TrainingError, InfeasibleGeometry,
                  D.DatasetError, D.ImageFormatError, D.TrimapError, ValueError, OSError, FloatingPointError)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, parser)
    except RUNTIME_ERRORS as exc:
        print(f"vineseg {args.command}: error: {exc}", file=sys.stderr)
        return 1
