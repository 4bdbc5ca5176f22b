"""Detection evaluation: ranked matching, AP, PR curves, ellipse export.

AP follows the area-under-staircase convention: detections rank globally
by score, each matches at most one unmatched ground truth with IoU at or
above the threshold (highest IoU first), and the precision envelope is
the running maximum from the high-recall end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Hashable, Mapping, Sequence

import numpy as np

from .anchors import Box, iou
from .exceptions import EvaluationError
from .inference import Detection

MATCH_IOU = 0.5


@dataclass
class EvalResult:
    ap: float
    pr_points: list[tuple[float, float]] = field(default_factory=list)  # (precision, recall)
    scores: list[float] = field(default_factory=list)  # score at each ranked point

    @property
    def no_detections(self) -> bool:
        return not self.pr_points


def average_precision(
    detections_by_image: Mapping[Hashable, Sequence[Detection]],
    gts_by_image: Mapping[Hashable, Sequence[Box]],
    iou_thresh: float = MATCH_IOU,
) -> EvalResult:
    """AP over a set of images; the recall denominator is the total gt count.

    Raises if there is no ground truth at all (recall undefined).  Ties in
    score break by the images' iteration order, then detection order.
    """
    total_gts = sum(len(v) for v in gts_by_image.values())
    if total_gts == 0:
        raise EvaluationError(
            "average precision is undefined with zero ground-truth boxes"
        )

    image_order = {img: i for i, img in enumerate(gts_by_image)}
    ranked: list[tuple[float, int, int, Hashable, Detection]] = []
    for img, dets in detections_by_image.items():
        if img not in image_order:
            image_order[img] = len(image_order)
        for di, det in enumerate(dets):
            ranked.append((det.score, image_order[img], di, img, det))
    ranked.sort(key=lambda item: (-item[0], item[1], item[2]))

    matched: dict[Hashable, list[bool]] = {
        img: [False] * len(gts) for img, gts in gts_by_image.items()
    }
    tp = 0
    pr_points: list[tuple[float, float]] = []
    scores: list[float] = []
    for rank, (score, _, _, img, det) in enumerate(ranked, start=1):
        gts = gts_by_image.get(img, ())
        best_iou, best_gi = 0.0, -1
        for gi, gt in enumerate(gts):
            if matched[img][gi]:
                continue
            value = iou(det.box, gt)
            if value >= iou_thresh and value > best_iou:
                best_iou, best_gi = value, gi
        if best_gi >= 0:
            matched[img][best_gi] = True
            tp += 1
        pr_points.append((tp / rank, tp / total_gts))
        scores.append(score)

    return EvalResult(ap=_staircase_area(pr_points), pr_points=pr_points, scores=scores)


def _staircase_area(pr_points: Sequence[tuple[float, float]]) -> float:
    """Area under the monotone (right-hand max) interpolated PR curve."""
    if not pr_points:
        return 0.0
    precisions = np.array([p for p, _ in pr_points])
    recalls = np.array([r for _, r in pr_points])
    envelope = np.maximum.accumulate(precisions[::-1])[::-1]
    area = 0.0
    prev_recall = 0.0
    for p, r in zip(envelope, recalls):
        if r > prev_recall:
            area += (r - prev_recall) * p
            prev_recall = r
    return float(area)


def pr_curve_csv(result: EvalResult) -> str:
    lines = ["score,precision,recall"]
    for score, (precision, recall) in zip(result.scores, result.pr_points):
        lines.append(f"{score:.6f},{precision:.6f},{recall:.6f}")
    return "\n".join(lines) + "\n"


def box_to_ellipse(box: Box) -> tuple[float, float, float, float, float]:
    """Inscribed ellipse of a box: center, semi-axes, vertical major axis."""
    cx, cy = box.center
    major = 0.5 * box.height
    minor = 0.5 * box.width
    return (cx, cy, major, minor, math.pi / 2.0)
