"""Synthetic face-proxy scenes, augmentation, and dataset files.

A scene is a textured noise background with 0-6 rendered face proxies
(filled rotated ellipse, two eye dots, a mouth arc, sometimes a partial
occlusion bar).  Ground truth is the tight bounding box of each rotated
ellipse, always inside the image at generation time.  Short sides are
drawn log-uniformly, so the size histogram is long-tailed toward small
faces.

Pixel values are quantized to the 8-bit grid before a scene is returned,
which makes the PNG round trip exact.

Datasets on disk: ``images/*.png`` plus ``manifest.jsonl`` with one
``{"image": ..., "boxes": [[x1,y1,x2,y2], ...]}`` record per line.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .anchors import Box, iou as box_iou
from .exceptions import ConfigError, DatasetError

FACE_COUNT_WEIGHTS = (0.06, 0.12, 0.16, 0.18, 0.18, 0.15, 0.15)  # P(0)..P(6)
MAX_FACE_OVERLAP_IOU = 0.3
MAX_PLACEMENT_TRIES = 20
ROTATION_LIMIT_DEG = 25.0


@dataclass(frozen=True)
class GeneratorConfig:
    image_size: int = 128
    max_faces: int = 6
    face_min_side: float = 8.0
    face_max_side_frac: float = 0.7
    occlusion_prob: float = 0.25

    def __post_init__(self):
        if self.image_size < 16:
            raise ConfigError(f"image_size must be >= 16, got {self.image_size}")
        if not 0 <= self.max_faces <= 6:
            raise ConfigError(f"max_faces must be in 0..6, got {self.max_faces}")
        if self.face_min_side < 4.0:
            raise ConfigError(f"face_min_side must be >= 4, got {self.face_min_side}")
        if not 0.0 < self.face_max_side_frac <= 1.0:
            raise ConfigError(
                f"face_max_side_frac must be in (0,1], got {self.face_max_side_frac}"
            )
        if self.face_min_side >= self.face_max_side_frac * self.image_size:
            raise ConfigError("face_min_side leaves no room below the maximum size")
        if not 0.0 <= self.occlusion_prob <= 1.0:
            raise ConfigError(f"occlusion_prob must be in [0,1], got {self.occlusion_prob}")


@dataclass
class SyntheticScene:
    image: np.ndarray  # [3, S, S] float32 in [0, 1]
    boxes: list[Box]
    seed: int

    @property
    def size(self) -> int:
        return self.image.shape[1]


def quantize(image: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid (the representable set of the PNG files)."""
    return (np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def snap_coord(value: float, limit: float) -> float:
    """Clamp to [0, limit] and snap to the 1/256-pixel grid.

    Dyadic coordinates make mirror maps like ``width - x`` exact in float
    arithmetic, so a double horizontal flip restores boxes bit for bit.
    """
    return min(max(round(value * 256.0) / 256.0, 0.0), limit)


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Channel-wise bilinear resize with half-pixel centers, edge clamped."""

    def axis_matrix(n_out: int, n_in: int) -> np.ndarray:
        mat = np.zeros((n_out, n_in), dtype=np.float32)
        ratio = n_in / n_out
        for d in range(n_out):
            s = min(max((d + 0.5) * ratio - 0.5, 0.0), n_in - 1.0)
            i0 = int(math.floor(s))
            i1 = min(i0 + 1, n_in - 1)
            frac = s - i0
            mat[d, i0] += 1.0 - frac
            mat[d, i1] += frac
        return mat

    wh = axis_matrix(out_h, image.shape[1])
    ww = axis_matrix(out_w, image.shape[2])
    return np.matmul(wh, image.astype(np.float32) @ ww.T)


def _render_background(rng: np.random.Generator, size: int) -> np.ndarray:
    lattice = rng.uniform(0.1, 0.9, size=(3, 5, 5)).astype(np.float32)
    base = resize_bilinear(lattice, size, size)
    noise = rng.normal(0.0, 0.02, size=(3, size, size)).astype(np.float32)
    return np.clip(base + noise, 0.0, 1.0)


def _face_color(rng: np.random.Generator) -> np.ndarray:
    r = rng.uniform(0.55, 0.95)
    g = r * rng.uniform(0.6, 0.8)
    b = g * rng.uniform(0.55, 0.85)
    return np.array([r, g, b], dtype=np.float32)


def _render_face(
    image: np.ndarray, rng: np.random.Generator, cx, cy, axis_a, axis_b, theta, occlude: bool
) -> None:
    """Paint one proxy into ``image`` (in place, 2x supersampled window)."""
    size = image.shape[1]
    hx = math.sqrt((axis_a * math.cos(theta)) ** 2 + (axis_b * math.sin(theta)) ** 2)
    hy = math.sqrt((axis_a * math.sin(theta)) ** 2 + (axis_b * math.cos(theta)) ** 2)
    x_lo = max(int(math.floor(cx - hx)) - 1, 0)
    x_hi = min(int(math.ceil(cx + hx)) + 1, size)
    y_lo = max(int(math.floor(cy - hy)) - 1, 0)
    y_hi = min(int(math.ceil(cy + hy)) + 1, size)
    if x_hi <= x_lo or y_hi <= y_lo:
        return

    # 2x supersampled pixel-center grid of the window, in ellipse coordinates.
    xs = np.arange(x_lo * 2, x_hi * 2, dtype=np.float32) / 2.0 + 0.25
    ys = np.arange(y_lo * 2, y_hi * 2, dtype=np.float32) / 2.0 + 0.25
    gx, gy = np.meshgrid(xs - cx, ys - cy)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    u = (gx * cos_t + gy * sin_t) / axis_a
    v = (-gx * sin_t + gy * cos_t) / axis_b

    face_color = _face_color(rng)
    eye_color = np.float32(rng.uniform(0.02, 0.15))
    mouth_color = np.array([rng.uniform(0.15, 0.4), 0.06, 0.06], dtype=np.float32)
    eye_dx = rng.uniform(0.32, 0.44)
    eye_dy = rng.uniform(-0.38, -0.26)
    eye_r = rng.uniform(0.13, 0.19)
    mouth_v = rng.uniform(0.38, 0.52)

    sup = np.empty((3, u.shape[0], u.shape[1]), dtype=np.float32)
    inside = (u * u + v * v) <= 1.0
    sup[:] = face_color[:, None, None]
    for ex in (-eye_dx, eye_dx):
        eye = ((u - ex) ** 2 + (v - eye_dy) ** 2) <= eye_r * eye_r
        sup[0][eye] = eye_color
        sup[1][eye] = eye_color
        sup[2][eye] = eye_color
    mouth = ((u / 0.52) ** 2 + ((v - mouth_v) / 0.16) ** 2) <= 1.0
    for c in range(3):
        sup[c][mouth] = mouth_color[c]

    alpha_sup = inside.astype(np.float32)
    if occlude:
        # Bar in front of the face: replaces face pixels under the strip.
        bar_color = rng.uniform(0.1, 0.9, size=3).astype(np.float32)
        frac = rng.uniform(0.12, 0.3)
        offset = rng.uniform(-0.5, 0.5)
        coord = u if rng.random() < 0.5 else v
        bar = np.abs(coord - offset) <= frac
        for c in range(3):
            sup[c][bar & inside] = bar_color[c]

    # Average the 2x2 supersamples down to pixel resolution.
    def pool(arr):
        h2, w2 = arr.shape
        return arr.reshape(h2 // 2, 2, w2 // 2, 2).mean(axis=(1, 3))

    alpha = pool(alpha_sup)
    window = image[:, y_lo:y_hi, x_lo:x_hi]
    for c in range(3):
        window[c] = (1.0 - alpha) * window[c] + pool(alpha_sup * sup[c])


def generate_scene(seed: int, cfg: GeneratorConfig = GeneratorConfig()) -> SyntheticScene:
    """Deterministic scene for ``seed``: background plus rendered proxies."""
    rng = np.random.default_rng(seed)
    size = cfg.image_size
    image = _render_background(rng, size)

    weights = np.array(FACE_COUNT_WEIGHTS[: cfg.max_faces + 1])
    n_faces = int(rng.choice(cfg.max_faces + 1, p=weights / weights.sum()))

    boxes: list[Box] = []
    max_side = cfg.face_max_side_frac * size
    for _ in range(n_faces):
        short = math.exp(rng.uniform(math.log(cfg.face_min_side), math.log(max_side)))
        aspect = rng.uniform(1.05, 1.45)
        theta = math.radians(rng.uniform(-ROTATION_LIMIT_DEG, ROTATION_LIMIT_DEG))
        cos_t, sin_t = math.cos(theta), math.sin(theta)
        hx_unit = math.sqrt(cos_t ** 2 + (aspect * sin_t) ** 2)
        hy_unit = math.sqrt(sin_t ** 2 + (aspect * cos_t) ** 2)
        axis_a = short / (2.0 * min(hx_unit, hy_unit))
        # Shrink oversized faces so the whole box stays inside the image.
        limit = 0.48 * size / max(hx_unit, hy_unit)
        axis_a = min(axis_a, limit)
        axis_b = axis_a * aspect
        hx = axis_a * hx_unit
        hy = axis_a * hy_unit

        placed = None
        for _ in range(MAX_PLACEMENT_TRIES):
            cx = rng.uniform(hx, size - hx)
            cy = rng.uniform(hy, size - hy)
            candidate = Box(cx - hx, cy - hy, cx + hx, cy + hy)
            if all(box_iou(candidate, other) <= MAX_FACE_OVERLAP_IOU for other in boxes):
                placed = (cx, cy, candidate)
                break
        if placed is None:
            continue
        cx, cy, gt = placed
        occlude = bool(rng.random() < cfg.occlusion_prob)
        _render_face(image, rng, cx, cy, axis_a, axis_b, theta, occlude)
        boxes.append(
            Box(
                snap_coord(gt.x1, size), snap_coord(gt.y1, size),
                snap_coord(gt.x2, size), snap_coord(gt.y2, size),
            )
        )

    return SyntheticScene(image=quantize(image), boxes=boxes, seed=seed)


@dataclass(frozen=True)
class AugmentConfig:
    crop_scale_range: tuple[float, float] = (0.3, 1.0)
    flip_prob: float = 0.5
    output_size: int = 128
    brightness_delta: float = 0.125
    contrast_range: tuple[float, float] = (0.5, 1.5)
    saturation_range: tuple[float, float] = (0.5, 1.5)
    color_prob: float = 0.5

    def __post_init__(self):
        lo, hi = self.crop_scale_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ConfigError(f"crop_scale_range must satisfy 0 < lo <= hi <= 1, got {lo}, {hi}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError(f"flip_prob must be in [0,1], got {self.flip_prob}")
        if self.output_size < 8:
            raise ConfigError(f"output_size must be >= 8, got {self.output_size}")
        if self.brightness_delta < 0:
            raise ConfigError("brightness_delta must be >= 0")
        for name, (a, b) in (("contrast", self.contrast_range), ("saturation", self.saturation_range)):
            if not 0.0 < a <= b:
                raise ConfigError(f"{name}_range must satisfy 0 < lo <= hi, got {a}, {b}")
        if not 0.0 <= self.color_prob <= 1.0:
            raise ConfigError(f"color_prob must be in [0,1], got {self.color_prob}")


def crop_keeps_box(box: Box, x0: float, y0: float, side: float) -> bool:
    """Center rule: a box survives iff its center lies within the crop."""
    cx, cy = box.center
    return x0 <= cx <= x0 + side and y0 <= cy <= y0 + side


def hflip_scene(scene: SyntheticScene) -> SyntheticScene:
    """Mirror horizontally; an exact involution."""
    width = scene.image.shape[2]
    flipped = np.ascontiguousarray(scene.image[:, :, ::-1])
    boxes = [Box(width - b.x2, b.y1, width - b.x1, b.y2) for b in scene.boxes]
    return SyntheticScene(image=flipped, boxes=boxes, seed=scene.seed)


def _apply_color(image: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    out = image
    if rng.random() < cfg.color_prob:
        out = out + np.float32(rng.uniform(-cfg.brightness_delta, cfg.brightness_delta))
    if rng.random() < cfg.color_prob:
        k = np.float32(rng.uniform(*cfg.contrast_range))
        mean = np.float32(out.mean())
        out = (out - mean) * k + mean
    if rng.random() < cfg.color_prob:
        k = np.float32(rng.uniform(*cfg.saturation_range))
        gray = (0.299 * out[0] + 0.587 * out[1] + 0.114 * out[2]).astype(np.float32)
        out = gray[None, :, :] + k * (out - gray[None, :, :])
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def sample_crop(
    rng: np.random.Generator, cfg: AugmentConfig, size: int
) -> tuple[int, int, int]:
    """Draw (side, x0, y0): side = ceil(u * size) with u uniform in the range.

    Rounding up keeps the realized scale ``side / size`` within the
    configured range.
    """
    lo, hi = cfg.crop_scale_range
    u = rng.uniform(lo, hi)
    side = min(max(int(math.ceil(u * size)), 1), size)
    x0 = int(rng.integers(0, size - side + 1))
    y0 = int(rng.integers(0, size - side + 1))
    return side, x0, y0


def crop_surviving_boxes(
    boxes: Sequence[Box], x0: float, y0: float, side: float
) -> list[Box]:
    """Boxes whose centers lie in the crop, clipped and shifted to crop coords."""
    kept: list[Box] = []
    for box in boxes:
        if not crop_keeps_box(box, x0, y0, side):
            continue
        kept.append(
            Box(
                max(box.x1, x0) - x0,
                max(box.y1, y0) - y0,
                min(box.x2, x0 + side) - x0,
                min(box.y2, y0 + side) - y0,
            )
        )
    return kept


def crop_and_resize(
    scene: SyntheticScene, x0: int, y0: int, side: int, output_size: int
) -> SyntheticScene:
    """Deterministic crop + resize step of the augmentation (no color, no flip)."""
    boxes = crop_surviving_boxes(scene.boxes, x0, y0, side)
    patch = scene.image[:, y0 : y0 + side, x0 : x0 + side]
    resized = np.clip(resize_bilinear(patch, output_size, output_size), 0.0, 1.0)
    factor = output_size / side
    scaled = [Box(b.x1 * factor, b.y1 * factor, b.x2 * factor, b.y2 * factor) for b in boxes]
    return SyntheticScene(image=resized.astype(np.float32), boxes=scaled, seed=scene.seed)


def augment(
    scene: SyntheticScene, cfg: AugmentConfig, rng: np.random.Generator
) -> SyntheticScene:
    """Random square crop + color distortion + resize + horizontal flip.

    A ground-truth box survives iff its center lies inside the crop; the
    survivors are clipped to the crop before rescaling.
    """
    size = min(scene.image.shape[1], scene.image.shape[2])
    side, x0, y0 = sample_crop(rng, cfg, size)
    boxes = crop_surviving_boxes(scene.boxes, x0, y0, side)
    patch = scene.image[:, y0 : y0 + side, x0 : x0 + side]
    patch = _apply_color(patch, rng, cfg)
    out_size = cfg.output_size
    resized = np.clip(resize_bilinear(patch, out_size, out_size), 0.0, 1.0)
    factor = out_size / side
    scaled = [Box(b.x1 * factor, b.y1 * factor, b.x2 * factor, b.y2 * factor) for b in boxes]
    result = SyntheticScene(image=resized.astype(np.float32), boxes=scaled, seed=scene.seed)

    if rng.random() < cfg.flip_prob:
        result = hflip_scene(result)
    return result


# --------------------------------------------------------------------------
# Dataset files


def scene_to_png(scene: SyntheticScene, path: Path) -> None:
    arr = np.round(scene.image * 255.0).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr, mode="RGB").save(path)


def load_image_png(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32)
    return (arr / 255.0).transpose(2, 0, 1).copy()


def write_dataset(out_dir, scenes: Iterable[SyntheticScene]) -> Path:
    """Write PNGs plus the JSON-lines manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.jsonl"
    with open(manifest, "w", encoding="utf-8") as fh:
        for i, scene in enumerate(scenes):
            rel = f"images/scene_{i:06d}.png"
            scene_to_png(scene, out_dir / rel)
            record = {
                "image": rel,
                "boxes": [[b.x1, b.y1, b.x2, b.y2] for b in scene.boxes],
            }
            fh.write(json.dumps(record) + "\n")
    return manifest


def scene_seed(base_seed: int, index: int) -> int:
    """Stable per-scene seed derived from the dataset seed."""
    return int(np.random.SeedSequence(entropy=base_seed, spawn_key=(index,)).generate_state(1)[0])


def generate_dataset(
    out_dir, count: int, seed: int, cfg: GeneratorConfig = GeneratorConfig()
) -> dict:
    """Generate ``count`` scenes deterministically and write them to disk."""
    scenes = (generate_scene(scene_seed(seed, i), cfg) for i in range(count))
    sizes: list[float] = []
    faces = 0

    def tap(iterable):
        nonlocal faces
        for scene in iterable:
            for b in scene.boxes:
                sizes.append(min(b.width, b.height))
            faces += len(scene.boxes)
            yield scene

    write_dataset(out_dir, tap(scenes))
    stats = {
        "scenes": count,
        "faces": faces,
        "size_min": float(np.min(sizes)) if sizes else 0.0,
        "size_median": float(np.median(sizes)) if sizes else 0.0,
        "size_mean": float(np.mean(sizes)) if sizes else 0.0,
        "size_max": float(np.max(sizes)) if sizes else 0.0,
    }
    return stats


class Dataset:
    """Manifest-backed dataset with cached 8-bit images."""

    def __init__(self, root: Path, records: list[tuple[str, list[Box]]]):
        self.root = Path(root)
        self.records = records
        self._cache: dict[int, np.ndarray] = {}

    @classmethod
    def open(cls, root) -> "Dataset":
        root = Path(root)
        manifest = root / "manifest.jsonl"
        if not manifest.exists():
            raise DatasetError(f"no manifest found at {manifest}")
        records: list[tuple[str, list[Box]]] = []
        with open(manifest, "r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    obj = json.loads(line)
                    rel = obj["image"]
                    boxes = [Box(*map(float, row)) for row in obj["boxes"]]
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
                    raise DatasetError(f"{manifest}: bad record at line {line_no}: {err}") from err
                if not (root / rel).exists():
                    raise DatasetError(f"{manifest}: line {line_no}: missing image file {rel}")
                records.append((rel, boxes))
        return cls(root, records)

    def __len__(self) -> int:
        return len(self.records)

    def boxes(self, index: int) -> list[Box]:
        return self.records[index][1]

    def load_image(self, index: int) -> np.ndarray:
        cached = self._cache.get(index)
        if cached is None:
            cached = np.round(
                load_image_png(self.root / self.records[index][0]) * 255.0
            ).astype(np.uint8)
            self._cache[index] = cached
        return (cached.astype(np.float32) / 255.0).copy()

    def scene(self, index: int) -> SyntheticScene:
        return SyntheticScene(
            image=self.load_image(index), boxes=list(self.boxes(index)), seed=index
        )
