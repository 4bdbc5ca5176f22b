"""Anchor generation, IoU geometry, assignment, and box delta coding.

Anchors tile every cell of every pyramid level: centers at
``((x + 0.5) * stride, (y + 0.5) * stride)``, one box per aspect ratio,
with per-level area ``(4 * stride)^2``.  They are kept unclipped so faces
near the border can still match.  Flattened ordering is level-major, then
cell row-major, then ratio index: ``((cell_y * S + cell_x) * A + a)`` —
the same contract the detection heads use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .exceptions import ConfigError, ShapeError

LABEL_NEGATIVE = -1
LABEL_IGNORED = -2
SCALE_PER_STRIDE = 4.0
MAX_DELTA_LOG = math.log(1000.0)


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in corner form; degenerate extents are rejected."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(
                f"degenerate box: ({self.x1}, {self.y1}, {self.x2}, {self.y2})"
            )

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    @staticmethod
    def from_array(arr) -> "Box":
        x1, y1, x2, y2 = (float(v) for v in arr)
        return Box(x1, y1, x2, y2)


@dataclass(frozen=True)
class AssignmentConfig:
    pos_iou: float = 0.5
    neg_iou: float = 0.4
    aspect_ratios: tuple[float, ...] = (1.0, 1.5)  # ratio = height / width

    def __post_init__(self):
        if not 0.0 <= self.neg_iou < self.pos_iou <= 1.0:
            raise ConfigError(
                f"need 0 <= neg_iou < pos_iou <= 1, got {self.neg_iou}, {self.pos_iou}"
            )
        if not self.aspect_ratios or any(r <= 0 for r in self.aspect_ratios):
            raise ConfigError(f"aspect ratios must be positive: {self.aspect_ratios}")


@dataclass
class AnchorSet:
    """Flat anchor list with per-anchor provenance.

    ``boxes`` is float64 ``[n, 4]`` so that area and IoU identities hold to
    full double precision.
    """

    boxes: np.ndarray
    level: np.ndarray
    cell_x: np.ndarray
    cell_y: np.ndarray
    ratio_index: np.ndarray
    scales: tuple[float, ...]
    strides: tuple[int, ...]
    grid_sizes: tuple[int, ...]
    ratios: tuple[float, ...]

    def __len__(self) -> int:
        return self.boxes.shape[0]

    @property
    def anchors_per_loc(self) -> int:
        return len(self.ratios)

    def box(self, i: int) -> Box:
        return Box.from_array(self.boxes[i])


def generate_anchors(
    grid_sizes: Sequence[int],
    strides: Sequence[int],
    cfg: AssignmentConfig = AssignmentConfig(),
) -> AnchorSet:
    """Tile anchors over each level's grid; area ``(4 * stride)^2`` per level."""
    if len(grid_sizes) != len(strides):
        raise ShapeError(
            f"generate_anchors: {len(grid_sizes)} grid sizes vs {len(strides)} strides"
        )
    ratios = tuple(float(r) for r in cfg.aspect_ratios)
    a = len(ratios)
    boxes, levels, cxs, cys, ris = [], [], [], [], []
    scales = tuple(SCALE_PER_STRIDE * s for s in strides)
    for li, (size, stride) in enumerate(zip(grid_sizes, strides)):
        scale = scales[li]
        ys, xs = np.mgrid[0:size, 0:size]
        centers_x = (xs + 0.5) * stride
        centers_y = (ys + 0.5) * stride
        level_boxes = np.empty((size, size, a, 4), dtype=np.float64)
        for ai, r in enumerate(ratios):
            w = scale / math.sqrt(r)
            h = scale * math.sqrt(r)
            level_boxes[:, :, ai, 0] = centers_x - 0.5 * w
            level_boxes[:, :, ai, 1] = centers_y - 0.5 * h
            level_boxes[:, :, ai, 2] = centers_x + 0.5 * w
            level_boxes[:, :, ai, 3] = centers_y + 0.5 * h
        boxes.append(level_boxes.reshape(-1, 4))
        levels.append(np.full(size * size * a, li, dtype=np.int32))
        cxs.append(np.repeat(xs.reshape(-1), a).astype(np.int32))
        cys.append(np.repeat(ys.reshape(-1), a).astype(np.int32))
        ris.append(np.tile(np.arange(a, dtype=np.int32), size * size))
    return AnchorSet(
        boxes=np.concatenate(boxes, axis=0),
        level=np.concatenate(levels),
        cell_x=np.concatenate(cxs),
        cell_y=np.concatenate(cys),
        ratio_index=np.concatenate(ris),
        scales=scales,
        strides=tuple(int(s) for s in strides),
        grid_sizes=tuple(int(s) for s in grid_sizes),
        ratios=ratios,
    )


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 for disjoint boxes."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of ``[n, 4]`` and ``[m, 4]`` corner-form arrays."""
    a = np.asarray(boxes_a, dtype=np.float64)
    b = np.asarray(boxes_b, dtype=np.float64)
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0.0, None) * np.clip(iy, 0.0, None)
    inter[(ix <= 0.0) | (iy <= 0.0)] = 0.0
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


@dataclass
class AssignmentResult:
    """Per-anchor labels plus regression targets for the positives.

    ``labels[i]`` is the matched ground-truth index for positives,
    ``LABEL_NEGATIVE`` (-1) for background, ``LABEL_IGNORED`` (-2) for the
    IoU band between the thresholds.  ``target_deltas`` rows are only
    meaningful where ``labels >= 0``.
    """

    labels: np.ndarray
    target_deltas: np.ndarray

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def positive_mask(self) -> np.ndarray:
        return self.labels >= 0

    @property
    def negative_mask(self) -> np.ndarray:
        return self.labels == LABEL_NEGATIVE

    @property
    def ignored_mask(self) -> np.ndarray:
        return self.labels == LABEL_IGNORED

    @property
    def n_pos(self) -> int:
        return int(self.positive_mask.sum())


def assign(
    anchors: AnchorSet, gts: Sequence[Box], cfg: AssignmentConfig = AssignmentConfig()
) -> AssignmentResult:
    """Label every anchor by its max IoU over the ground truth.

    positive (argmax gt) if max IoU >= pos_iou, negative if < neg_iou,
    ignored in between; argmax ties resolve to the lowest gt index.  No
    per-gt best-anchor rescue is applied.
    """
    n = len(anchors)
    labels = np.full(n, LABEL_NEGATIVE, dtype=np.int32)
    deltas = np.zeros((n, 4), dtype=np.float64)
    if gts:
        gt_arr = np.stack([g.as_array() for g in gts])
        overlaps = iou_matrix(anchors.boxes, gt_arr)
        best = overlaps.max(axis=1)
        best_gt = overlaps.argmax(axis=1)  # first max = lowest gt index
        positive = best >= cfg.pos_iou
        ignored = ~positive & (best >= cfg.neg_iou)
        labels[positive] = best_gt[positive].astype(np.int32)
        labels[ignored] = LABEL_IGNORED
        if positive.any():
            deltas[positive] = encode_deltas(
                anchors.boxes[positive], gt_arr[best_gt[positive]]
            )
    return AssignmentResult(labels=labels, target_deltas=deltas)


def _to_center_form(boxes: np.ndarray):
    w = boxes[..., 2] - boxes[..., 0]
    h = boxes[..., 3] - boxes[..., 1]
    cx = boxes[..., 0] + 0.5 * w
    cy = boxes[..., 1] + 0.5 * h
    return cx, cy, w, h


def encode_deltas(anchor_boxes: np.ndarray, gt_boxes: np.ndarray) -> np.ndarray:
    """Offsets (tx, ty, tw, th) that map each anchor onto its ground truth."""
    ax, ay, aw, ah = _to_center_form(np.asarray(anchor_boxes, dtype=np.float64))
    gx, gy, gw, gh = _to_center_form(np.asarray(gt_boxes, dtype=np.float64))
    return np.stack(
        [(gx - ax) / aw, (gy - ay) / ah, np.log(gw / aw), np.log(gh / ah)], axis=-1
    )


def decode_deltas(
    anchor_boxes: np.ndarray,
    deltas: np.ndarray,
    clip_size: tuple[float, float] | None = None,
) -> np.ndarray:
    """Inverse of ``encode_deltas``; log-extents clamped before exponentiation.

    ``clip_size = (width, height)`` clips the result to the image (inference
    only).
    """
    ax, ay, aw, ah = _to_center_form(np.asarray(anchor_boxes, dtype=np.float64))
    d = np.asarray(deltas, dtype=np.float64)
    tw = np.minimum(d[..., 2], MAX_DELTA_LOG)
    th = np.minimum(d[..., 3], MAX_DELTA_LOG)
    cx = ax + d[..., 0] * aw
    cy = ay + d[..., 1] * ah
    w = aw * np.exp(tw)
    h = ah * np.exp(th)
    out = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)
    if clip_size is not None:
        out[..., 0] = np.clip(out[..., 0], 0.0, clip_size[0])
        out[..., 1] = np.clip(out[..., 1], 0.0, clip_size[1])
        out[..., 2] = np.clip(out[..., 2], 0.0, clip_size[0])
        out[..., 3] = np.clip(out[..., 3], 0.0, clip_size[1])
    return out


def encode(anchor: Box, gt: Box) -> tuple[float, float, float, float]:
    tx, ty, tw, th = encode_deltas(anchor.as_array(), gt.as_array())
    return float(tx), float(ty), float(tw), float(th)


def decode(anchor: Box, deltas, clip_size: tuple[float, float] | None = None) -> Box:
    arr = decode_deltas(anchor.as_array(), np.asarray(deltas, dtype=np.float64), clip_size)
    return Box.from_array(arr)


@dataclass
class MatchCount:
    size: float
    pos_x: float
    pos_y: float
    matched: int


def match_histogram(
    anchors: AnchorSet,
    face_sizes: Iterable[float],
    positions: Iterable[tuple[float, float]],
    cfg: AssignmentConfig = AssignmentConfig(),
) -> list[MatchCount]:
    """Positive-anchor counts for square test faces at given centers.

    Probes how many anchors a face of each size matches at each position;
    faces near the border may extend beyond the image, mirroring real
    outer faces.
    """
    rows = []
    positions = list(positions)
    for size in face_sizes:
        half = 0.5 * float(size)
        for px, py in positions:
            gt = Box(px - half, py - half, px + half, py + half)
            result = assign(anchors, [gt], cfg)
            rows.append(MatchCount(float(size), float(px), float(py), result.n_pos))
    return rows


def match_histogram_csv(rows: Sequence[MatchCount]) -> str:
    lines = ["size,pos_x,pos_y,matched_count"]
    for r in rows:
        lines.append(f"{r.size:g},{r.pos_x:g},{r.pos_y:g},{r.matched}")
    return "\n".join(lines) + "\n"
