"""Command-line front door.

Subcommands: synth, train, eval, predict, weights, difficult.
Exit codes: 0 success, 1 validation error (bad flags or bad inputs),
2 runtime failure.  Every run prints the seed it resolved to, output
files are written via temp + atomic rename, and identical invocations
over identical inputs produce byte-identical outputs.

GLASSFUSE_THREADS caps evaluation worker threads (0 = sequential).
"""

from __future__ import annotations

import argparse
import io
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .data import (
    DEFAULT_MIX,
    DEFAULT_SPLITS,
    DatasetError,
    atomic_write_bytes,
    build_manifest,
    load_depth,
    load_rgb,
    make_corpus,
)
from .segnet import Checkpoint, classify, predict
from .tensor import Tensor, no_grad
from .trainer import TrainConfig, TrainingDiverged, evaluate, load_train_config, select_difficult, train

OVERLAY_COLOR = (64, 220, 255)  # fixed highlight for predicted glass
OVERLAY_ALPHA = 0.5

_FUSION_FLAGS = {"wff": "wff", "concat": "concat", "rgb-only": "rgb_only"}
_ABLATION_FLAGS = {"none": "none", "f-af": "f_af_only", "f-af-aw": "f_af_and_f_aw"}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); the contract wants 1
        raise _UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _size(value: str) -> tuple[int, int]:
    try:
        h, _, w = value.partition("x")
        return int(h), int(w)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {value!r}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="glassfuse", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic RGB-D glass corpus")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--count", type=int, required=True, help="number of samples")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=_size, default=(64, 64), metavar="HxW")
    p.add_argument("--difficulty-mix", default=DEFAULT_MIX, help="e.g. easy:0.5,bright:0.5")
    p.add_argument("--split", default=DEFAULT_SPLITS, help="e.g. train:0.8,test:0.2")
    p.set_defaults(func=run_synth)

    p = sub.add_parser("train", help="train a segmentation network")
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--config", help="flat key=value train config file")
    p.add_argument("--fusion", choices=sorted(_FUSION_FLAGS), help="override fusion mode")
    p.add_argument("--ablation", choices=sorted(_ABLATION_FLAGS), help="override ablation switch")
    p.add_argument("--seed", type=int, help="override training seed")
    p.add_argument("--epochs", type=int, help="override epoch count")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--log", help="JSON-lines log path (default: <out>.log.jsonl)")
    p.set_defaults(func=run_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", help="split name, e.g. test or difficult")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--json", required=True, help="metrics report output path")
    p.set_defaults(func=run_eval)

    p = sub.add_parser("predict", help="segment one RGB-D image pair")
    p.add_argument("--rgb", required=True)
    p.add_argument("--depth", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="binary mask PNG output")
    p.add_argument("--overlay", help="optional blended visualization PNG")
    p.set_defaults(func=run_predict)

    p = sub.add_parser("weights", help="dump the fusion weights for one input pair")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--rgb", required=True)
    p.add_argument("--depth", required=True)
    p.add_argument("--json", required=True)
    p.set_defaults(func=run_weights)

    p = sub.add_parser("difficult", help="rank the hardest images from eval reports")
    p.add_argument("--data", required=True)
    p.add_argument("--reports", nargs="+", required=True, help="one or more eval report JSONs")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--out", required=True, help="split file to write (one id per line)")
    p.set_defaults(func=run_difficult)
    return parser


def _print_seed(seed) -> None:
    print(f"seed: {seed}")


def _encode_png(arr: np.ndarray, mode: str) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(arr, mode=mode).save(buf, format="PNG")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def run_synth(args) -> int:
    _print_seed(args.seed)
    manifest = make_corpus(
        args.out,
        count=args.count,
        seed=args.seed,
        size=args.size,
        mix=args.difficulty_mix,
        split_spec=args.split,
    )
    sizes = {name: len(ids) for name, ids in manifest.splits.items()}
    print(f"wrote {sum(sizes.values())} samples to {args.out} {sizes}")
    return 0


def run_train(args) -> int:
    overrides = {}
    if args.fusion:
        overrides["fusion_mode"] = _FUSION_FLAGS[args.fusion]
    if args.ablation:
        overrides["ablation"] = _ABLATION_FLAGS[args.ablation]
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    config = load_train_config(args.config, overrides) if args.config else TrainConfig(**overrides)
    _print_seed(config.seed)

    manifest = build_manifest(args.data)
    train_set = manifest.load_split("train")
    val_split = "val" if manifest.splits.get("val") else "test"
    val_set = manifest.load_split(val_split)

    depth_state = "disabled" if config.fusion_mode == "rgb_only" else "enabled"
    print(f"fusion mode {config.fusion_mode}: depth stream {depth_state}")
    checkpoint, log = train(config, train_set, val_set)
    checkpoint.save(args.out)

    header = {
        "event": "start",
        "config": config.to_dict(),
        "depth_stream": depth_state,
        "val_split": val_split,
        "train_size": len(train_set),
    }
    footer = {
        "event": "done",
        "checkpoint": str(args.out),
        "final_val_miou": log.entries[-1]["val_miou"],
    }
    log_lines = json.dumps(header, sort_keys=True) + "\n" + log.to_jsonl() + json.dumps(footer, sort_keys=True) + "\n"
    log_path = args.log or f"{args.out}.log.jsonl"
    atomic_write_bytes(log_path, log_lines.encode())
    print(f"final val mIoU: {log.entries[-1]['val_miou']:.4f} (checkpoint: {args.out}, log: {log_path})")
    return 0


def run_eval(args) -> int:
    checkpoint = Checkpoint.load(args.ckpt)
    _print_seed(checkpoint.meta.get("seed", "unknown"))
    manifest = build_manifest(args.data)
    dataset = manifest.load_split(args.split)
    if not dataset:
        raise DatasetError(f"{args.data}: split {args.split!r} is empty")
    report = evaluate(checkpoint, dataset)
    atomic_write_bytes(args.json, json.dumps(report.to_dict(), sort_keys=True, indent=1).encode())
    print(
        f"{args.split}: iou {report.iou_glass:.4f}  miou {report.miou:.4f}  biou {report.biou:.4f}"
        f"  ({report.image_count} images) -> {args.json}"
    )
    return 0


def _load_pair_for(checkpoint: Checkpoint, rgb_path, depth_path):
    rgb = load_rgb(rgb_path)
    depth = load_depth(depth_path)
    if rgb.shape[1:] != depth.shape[1:]:
        raise DatasetError(
            f"resolution mismatch: rgb {rgb.shape[1:]} vs depth {depth.shape[1:]}"
        )
    cfg = checkpoint.config
    if rgb.shape[1:] != (cfg.input_h, cfg.input_w):
        raise DatasetError(
            f"resolution mismatch: input is {rgb.shape[1]}x{rgb.shape[2]}, "
            f"checkpoint expects {cfg.input_h}x{cfg.input_w}"
        )
    return rgb, depth


def run_predict(args) -> int:
    checkpoint = Checkpoint.load(args.ckpt)
    _print_seed(checkpoint.meta.get("seed", "unknown"))
    rgb, depth = _load_pair_for(checkpoint, args.rgb, args.depth)
    net = checkpoint.build()
    with no_grad():
        logits = net.forward(
            Tensor(rgb[None]), None if net.config.fusion_mode == "rgb_only" else Tensor(depth[None])
        )
        mask = predict(classify(logits))[0]
    atomic_write_bytes(args.out, _encode_png(mask * np.uint8(255), "L"))
    if args.overlay:
        base = np.rint(rgb.transpose(1, 2, 0) * 255).astype(np.float64)
        color = np.asarray(OVERLAY_COLOR, dtype=np.float64)
        blended = base.copy()
        blended[mask == 1] = (1 - OVERLAY_ALPHA) * base[mask == 1] + OVERLAY_ALPHA * color
        atomic_write_bytes(args.overlay, _encode_png(np.rint(blended).astype(np.uint8), "RGB"))
    print(f"glass pixels: {int(mask.sum())} / {mask.size} -> {args.out}")
    return 0


def run_weights(args) -> int:
    checkpoint = Checkpoint.load(args.ckpt)
    _print_seed(checkpoint.meta.get("seed", "unknown"))
    if checkpoint.config.fusion_mode != "wff":
        raise DatasetError(
            f"checkpoint fusion mode is {checkpoint.config.fusion_mode!r}: "
            "fusion weights only exist for weighted-fusion checkpoints"
        )
    rgb, depth = _load_pair_for(checkpoint, args.rgb, args.depth)
    net = checkpoint.build()
    with no_grad():
        _, weights = net.forward_with_weights(Tensor(rgb[None]), Tensor(depth[None]))
    payload = {site: w.to_jsonable() for site, w in weights.items()}
    atomic_write_bytes(args.json, json.dumps(payload, sort_keys=True, indent=1).encode())
    means = {site: float(np.mean(v["psi_rgb"])) for site, v in payload.items()}
    print(f"mean rgb weight per site: {means} -> {args.json}")
    return 0


def run_difficult(args) -> int:
    manifest = build_manifest(args.data)
    _print_seed("n/a (rank-only operation)")
    report_lists = []
    for path in args.reports:
        report = json.loads(Path(path).read_text())
        per_image = report.get("per_image")
        if not per_image:
            raise DatasetError(f"{path}: report has no per_image records")
        unknown = [r["id"] for r in per_image if r["id"] not in manifest.entries]
        if unknown:
            raise DatasetError(f"{path}: report ids not in dataset: {unknown[:8]}")
        report_lists.append(per_image)
    ids = select_difficult(report_lists, args.k)
    atomic_write_bytes(args.out, ("".join(i + "\n" for i in ids)).encode())
    print(f"wrote {len(ids)} ids to {args.out}")
    return 0


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except (DatasetError, ValueError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TrainingDiverged as exc:
        print(f"training failure: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
