"""Command-line interface: dataset generation, training, evaluation, detection.

Exit codes: 0 success, 1 usage or I/O error, 2 numerical failure during
training.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .anchors import Box, generate_anchors, match_histogram, match_histogram_csv
from .config import PipelineConfig
from .data import Dataset, generate_dataset, load_image_png, resize_bilinear
from .evaluation import box_to_ellipse, pr_curve_csv
from .exceptions import PyradetError, TrainingDiverged
from .inference import postprocess
from .model import load_checkpoint, model_tensors
from .trainer import evaluate_detector, inference_mode, load_train_state, train

SIZE_BUCKETS = (8, 16, 32, 64, 128, 256)


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; this artifact reserves 2 for
    numerical failures, so remap usage errors to 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pyradet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-dataset", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--count", type=int, required=True, help="number of scenes")
    p.add_argument("--seed", type=int, default=0, help="dataset seed (default 0)")
    p.add_argument("--config", default=None, help="pipeline config JSON (defaults used if omitted)")

    p = sub.add_parser("train", help="train a detector")
    p.add_argument("--data", required=True, help="training dataset directory")
    p.add_argument("--out", required=True, help="output directory for checkpoints and logs")
    p.add_argument("--config", default=None, help="pipeline config JSON")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--log-every", type=int, default=100, help="progress print interval")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="validation dataset directory")
    p.add_argument("--config", default=None)
    p.add_argument("--pr-out", default="pr_curve.csv", help="where to write the PR CSV")

    p = sub.add_parser("detect", help="run detection on one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--ellipses", action="store_true", help="emit ellipse tuples instead of boxes")

    p = sub.add_parser("anchor-stats", help="face-size/position anchor match counts")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True, help="output CSV path")

    return parser


def _load_detector(config_path, checkpoint_path):
    cfg = PipelineConfig.load(config_path)
    detector = cfg.build_detector()
    arrays = model_tensors(load_checkpoint(checkpoint_path))
    detector.load_state_arrays(arrays)
    return cfg, detector


def cmd_gen_dataset(args) -> int:
    cfg = PipelineConfig.load(args.config)
    out = Path(args.out)
    stats = generate_dataset(out, args.count, args.seed, cfg.generator)
    print(f"wrote {stats['scenes']} scenes ({stats['faces']} faces) to {out}")
    if stats["faces"]:
        print(
            "face short sides: min {size_min:.1f}  median {size_median:.1f}  "
            "mean {size_mean:.1f}  max {size_max:.1f}".format(**stats)
        )
        ds = Dataset.open(out)
        sizes = [min(b.width, b.height) for i in range(len(ds)) for b in ds.boxes(i)]
        lo = 0
        for hi in SIZE_BUCKETS:
            count = sum(lo <= s < hi for s in sizes)
            if count:
                print(f"  [{lo:3d}, {hi:3d}) px: {count}")
            lo = hi
    return 0


def cmd_train(args) -> int:
    cfg = PipelineConfig.load(args.config)
    dataset = Dataset.open(args.data)
    detector = cfg.build_detector()
    resume = None
    if args.resume:
        resume = load_train_state(args.resume, detector)
        print(f"resuming from {args.resume} at iteration {resume.iteration}")
    state = train(
        detector,
        dataset,
        cfg.train,
        loss_cfg=cfg.loss,
        augment_cfg=cfg.augment,
        out_dir=args.out,
        resume=resume,
        log_every=args.log_every,
    )
    final = Path(args.out) / "final.ckpt"
    print(f"trained to iteration {state.iteration}; checkpoint at {final}")
    return 0


def cmd_eval(args) -> int:
    cfg, detector = _load_detector(args.config, args.checkpoint)
    dataset = Dataset.open(args.data)
    result = evaluate_detector(detector, dataset, cfg.inference)
    if result.no_detections:
        print("AP@0.5 = 0.0000 (no detections above threshold)")
    else:
        print(f"AP@0.5 = {result.ap:.4f}")
    pr_path = Path(args.pr_out)
    pr_path.write_text(pr_curve_csv(result))
    print(f"PR curve written to {pr_path}")
    return 0


def cmd_detect(args) -> int:
    cfg, detector = _load_detector(args.config, args.checkpoint)
    path = Path(args.image)
    try:
        image = load_image_png(path)
    except (FileNotFoundError, UnidentifiedImageError, OSError) as err:
        print(f"cannot read image {path}: {err}", file=sys.stderr)
        return 1
    size = detector.input_size
    orig_h, orig_w = image.shape[1], image.shape[2]
    if (orig_h, orig_w) != (size, size):
        image = np.clip(resize_bilinear(image, size, size), 0.0, 1.0)
    sx, sy = orig_w / size, orig_h / size
    with inference_mode(detector):
        outputs = detector.forward(image)
    detections = postprocess(outputs, detector.anchors, cfg.inference, (float(size), float(size)))
    for det in detections:
        box = [det.box.x1 * sx, det.box.y1 * sy, det.box.x2 * sx, det.box.y2 * sy]
        record: dict = {"image": str(path), "score": round(det.score, 6)}
        if args.ellipses:
            cx, cy, major, minor, angle = box_to_ellipse(Box(*box))
            record["ellipse"] = [round(cx, 3), round(cy, 3), round(major, 3),
                                 round(minor, 3), round(angle, 6)]
        else:
            record["box"] = [round(v, 3) for v in box]
        print(json.dumps(record))
    return 0


def cmd_anchor_stats(args) -> int:
    cfg = PipelineConfig.load(args.config)
    anchors = generate_anchors(cfg.backbone.grid_sizes, cfg.backbone.strides, cfg.assignment)
    scales = list(anchors.scales)
    sizes = sorted(
        set(scales)
        | {math.sqrt(a * b) for a, b in zip(scales, scales[1:])}
    )
    center = cfg.backbone.input_size / 2.0
    positions = [(center, center)] + [(float(d), center) for d in (32, 16, 8, 4)]
    rows = match_histogram(anchors, sizes, positions, cfg.assignment)
    out = Path(args.out)
    out.write_text(match_histogram_csv(rows))
    print(f"anchor match counts written to {out}")
    return 0


_COMMANDS = {
    "gen-dataset": cmd_gen_dataset,
    "train": cmd_train,
    "eval": cmd_eval,
    "detect": cmd_detect,
    "anchor-stats": cmd_anchor_stats,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse --help or usage error
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except TrainingDiverged as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 2
    except PyradetError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except OSError as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
