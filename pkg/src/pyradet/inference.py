"""Score filtering, greedy NMS, and decoding of raw head outputs.

Pipeline order: sigmoid scores, drop below the score threshold, decode
the survivors, keep the top-K by score, greedy NMS, keep the final top-K,
then clip to the image.  Ties sort by the lower original index, so the
whole pipeline is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .anchors import AnchorSet, Box, decode_deltas
from .exceptions import ConfigError, ContractError
from .heads import HeadOutputs
from .losses import sigmoid


@dataclass(frozen=True)
class InferenceConfig:
    score_threshold: float = 0.05
    pre_nms_topk: int = 300
    nms_iou: float = 0.3
    post_nms_topk: int = 200

    def __post_init__(self):
        if not 0.0 < self.score_threshold < 1.0:
            raise ConfigError(f"score_threshold must be in (0,1), got {self.score_threshold}")
        if not 0.0 < self.nms_iou < 1.0:
            raise ConfigError(f"nms_iou must be in (0,1), got {self.nms_iou}")
        if self.pre_nms_topk < 1 or self.post_nms_topk < 1:
            raise ConfigError("top-k limits must be positive")


@dataclass(frozen=True)
class Detection:
    box: Box
    score: float


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> list[int]:
    """Greedy suppression on corner-form arrays; returns kept indices in pick order.

    Picks descending by score (ties: lower index) and suppresses boxes whose
    IoU with a kept box exceeds the threshold.
    """
    n = boxes.shape[0]
    if n == 0:
        return []
    boxes = np.asarray(boxes, dtype=np.float64)
    order = np.argsort(-np.asarray(scores), kind="stable")
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    alive = np.ones(n, dtype=bool)
    kept: list[int] = []
    for idx in order:
        if not alive[idx]:
            continue
        kept.append(int(idx))
        ix = np.minimum(boxes[idx, 2], boxes[:, 2]) - np.maximum(boxes[idx, 0], boxes[:, 0])
        iy = np.minimum(boxes[idx, 3], boxes[:, 3]) - np.maximum(boxes[idx, 1], boxes[:, 1])
        inter = np.clip(ix, 0.0, None) * np.clip(iy, 0.0, None)
        overlap = inter / (areas[idx] + areas - inter)
        alive &= ~(overlap > iou_thresh)
    return kept


def nms(dets: Sequence[Detection], iou_thresh: float) -> list[Detection]:
    """Greedy NMS over detections; output preserves pick order."""
    if not dets:
        return []
    boxes = np.array([d.box.as_array() for d in dets])
    scores = np.array([d.score for d in dets])
    return [dets[i] for i in nms_indices(boxes, scores, iou_thresh)]


def postprocess(
    outputs: HeadOutputs,
    anchors: AnchorSet,
    cfg: InferenceConfig,
    image_size: tuple[float, float],
) -> list[Detection]:
    """Turn one image's head outputs into final scored detections."""
    scores = sigmoid(outputs.flat_logits().astype(np.float64))
    if scores.shape[0] != len(anchors):
        raise ContractError(
            f"postprocess: {scores.shape[0]} predictions vs {len(anchors)} anchors"
        )
    keep = scores >= cfg.score_threshold
    if not keep.any():
        return []
    survivor_idx = np.nonzero(keep)[0]
    deltas = outputs.flat_deltas()[survivor_idx]
    boxes = decode_deltas(anchors.boxes[survivor_idx], deltas)
    survivor_scores = scores[survivor_idx]

    if survivor_scores.shape[0] > cfg.pre_nms_topk:
        top = np.argsort(-survivor_scores, kind="stable")[: cfg.pre_nms_topk]
        top.sort()  # keep anchor order as the tie-break order
        boxes, survivor_scores = boxes[top], survivor_scores[top]

    kept = nms_indices(boxes, survivor_scores, cfg.nms_iou)[: cfg.post_nms_topk]

    detections: list[Detection] = []
    width, height = image_size
    for i in kept:
        x1 = min(max(boxes[i, 0], 0.0), width)
        y1 = min(max(boxes[i, 1], 0.0), height)
        x2 = min(max(boxes[i, 2], 0.0), width)
        y2 = min(max(boxes[i, 3], 0.0), height)
        if x2 <= x1 or y2 <= y1:
            continue  # clipped away entirely; cannot form a valid box
        detections.append(Detection(box=Box(x1, y1, x2, y2), score=float(survivor_scores[i])))
    return detections
