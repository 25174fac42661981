"""``lqseg`` command line: synth, train, eval, infer.

Exit codes: 0 success, 2 usage or validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError
from .config import KEYS, ConfigError, TrainConfig, load_config, parse_value
from .metrics import detections_from_prediction, evaluate
from .synthdata import DatasetFormatError, GenerationError, generate_dataset, load_dataset, serialize_dataset
from .tensor import no_grad
from .trainer import CheckpointPathError, NonFiniteLossError, load_model, run_training

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
STRIDE = 32

log = logging.getLogger("lqseg")


class UsageError(Exception):
    pass


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def _unit_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"expected a value in [0, 1], got {value}")
    return value


def _override(text: str) -> tuple[str, object]:
    key, sep, value = text.partition("=")
    key = key.strip()
    if not sep or key not in KEYS:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE with a known key, got {text!r}")
    try:
        return key, parse_value(value.strip(), "--set")
    except ConfigError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


# --------------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    if args.image_size % STRIDE:
        raise UsageError(f"--image-size must be a multiple of {STRIDE}, got {args.image_size}")
    if args.min_instances > args.max_instances:
        raise UsageError("--min-instances exceeds --max-instances")
    scenes = generate_dataset(args.scenes, image_size=args.image_size, seed=args.seed,
                              scale_mix=args.scale_mix, min_instances=args.min_instances,
                              max_instances=args.max_instances)
    serialize_dataset(scenes, args.out)
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    overrides = dict(args.set or [])
    for flag, key in (("iterations", "train.iterations"), ("seed", "train.seed"),
                      ("out_dir", "train.out_dir"), ("dataset", "data.train")):
        value = getattr(args, flag)
        if value is not None:
            overrides[key] = value
    if args.config is None and args.resume is not None:
        from .checkpoint import load_checkpoint

        header, _ = load_checkpoint(args.resume)
        base = TrainConfig.from_dict(header["config"])
        values = {k: getattr(base, f) for k, (sec, f) in KEYS.items() if sec == "train"}
        values.update(overrides)
        return load_config(None, values).train
    return load_config(args.config, overrides).train


def cmd_train(args) -> int:
    cfg = _train_config(args)
    if not cfg.dataset:
        raise UsageError("no training dataset given (data.train or --dataset)")
    if not Path(cfg.dataset).is_file():
        raise UsageError(f"training dataset {cfg.dataset} does not exist")
    scenes = load_dataset(cfg.dataset)
    if not scenes:
        raise UsageError(f"training dataset {cfg.dataset} is empty")
    if scenes[0].image.shape[-1] != cfg.image_size:
        raise UsageError(f"dataset image size {scenes[0].image.shape[-1]} != "
                         f"data.image_size {cfg.image_size}")
    _, final = run_training(cfg, scenes, resume=args.resume)
    print(f"final checkpoint {final}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _, _, _ = load_model(args.checkpoint)
    scenes = load_dataset(args.dataset, k_cls=model.cfg.k_cls, k_attr=model.cfg.k_attr)
    if not scenes:
        raise UsageError(f"dataset {args.dataset} is empty")
    if scenes[0].image.shape[-1] % STRIDE:
        raise UsageError(f"dataset image size {scenes[0].image.shape[-1]} is not a multiple of {STRIDE}")
    report = evaluate(model, scenes, workers=args.workers, f1_threshold=args.f1_threshold)
    text = json.dumps(report.to_json(), indent=2)
    Path(args.out).write_text(text + "\n")
    print(f"ap_iou={report.ap_iou:.4f} ap_iou_f1={report.ap_iou_f1:.4f} -> {args.out}")
    return EXIT_OK


def read_image(path: str | Path) -> np.ndarray:
    """Load a PNG/JPEG (scaled to [0,1]) or a .npy array as a (3, H, W) float32 image."""
    path = Path(path)
    try:
        if path.suffix == ".npy":
            arr = np.load(path).astype(np.float32)
            if arr.ndim == 3 and arr.shape[0] != 3 and arr.shape[-1] == 3:
                arr = arr.transpose(2, 0, 1)
        else:
            from PIL import Image

            with Image.open(path) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float32).transpose(2, 0, 1) / 255.0
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read image {path}: {exc}") from exc
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise UsageError(f"image {path} has shape {arr.shape}, expected 3 channels")
    return np.ascontiguousarray(arr)


def cmd_infer(args) -> int:
    from PIL import Image

    image = read_image(args.image)
    _, h, w = image.shape
    if h % STRIDE or w % STRIDE:
        if not args.auto_pad:
            raise UsageError(f"image is {h}x{w}; dimensions must be multiples of {STRIDE} "
                             "(pass --auto-pad to pad)")
        ph, pw = -h % STRIDE, -w % STRIDE
        image = np.pad(image, ((0, 0), (0, ph), (0, pw)))
    model, _, _, _ = load_model(args.checkpoint)
    with no_grad():
        out = model(image)
    dets = detections_from_prediction(out.stages[-1], image.shape[1], image.shape[2])
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for i, det in enumerate(sorted(dets, key=lambda d: -d.score)):
        name = f"mask_{i:03d}.png"
        Image.fromarray((det.mask[:h, :w] * 255).astype(np.uint8), mode="L").save(out_dir / name)
        records.append({"class_id": det.class_id, "score": det.score,
                        "attributes": sorted(det.attributes), "mask_file": name})
    (out_dir / "detections.json").write_text(json.dumps({"detections": records}, indent=2) + "\n")
    print(f"{len(records)} detections -> {out_dir}")
    return EXIT_OK


# ----------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lqseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic layered-shapes dataset")
    p.add_argument("--out", required=True, help="dataset file to write")
    p.add_argument("--scenes", type=_positive_int, required=True)
    p.add_argument("--image-size", type=_positive_int, default=128, help="square size, multiple of 32")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale-mix", type=_unit_float, default=0.5,
                   help="fraction of instances forced below 10%% of the image area")
    p.add_argument("--min-instances", type=_positive_int, default=1)
    p.add_argument("--max-instances", type=_positive_int, default=4)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="KEY = VALUE config file")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--set", action="append", type=_override, metavar="KEY=VALUE",
                   help="override a config key, e.g. train.iterations=100")
    p.add_argument("--iterations", type=_positive_int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", help="log and checkpoint directory")
    p.add_argument("--dataset", help="training dataset (overrides data.train)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", default="report.json", help="JSON report path")
    p.add_argument("--workers", type=_positive_int, default=1, help="images evaluated in parallel")
    p.add_argument("--f1-threshold", type=_unit_float,
                   help="fixed attribute F1 threshold instead of sweeping it with IoU")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="export masks and attributes for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help=".png or .npy (3xHxW in [0,1])")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--auto-pad", action="store_true",
                   help="zero-pad to a multiple of 32 instead of failing")
    p.set_defaults(func=cmd_infer)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, CheckpointError, CheckpointPathError, DatasetFormatError,
            GenerationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
