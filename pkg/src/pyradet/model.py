"""Detector assembly (backbone -> fusion -> heads) and checkpoint format.

Checkpoints are little-endian binary: the magic ``MSFD1``, a u32 tensor
count, then per tensor a u32 name length, UTF-8 name, u32 rank, u32
extents, and the raw float32 payload.  Trainer state rides along as extra
tensors under reserved name prefixes and is ignored when only model
weights are wanted.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .anchors import AnchorSet, AssignmentConfig, generate_anchors
from .backbone import Backbone, BackboneConfig, FeaturePyramid, center_image
from .exceptions import CheckpointError, ConfigError
from .fusion import ContextTexture, FusedPyramid, FusionConfig
from .heads import DetectionHeads, HeadConfig, HeadOutputs
from .tensor import Tensor

CHECKPOINT_MAGIC = b"MSFD1"
STATE_PREFIXES = ("momentum.", "trainer.")  # non-model tensors in trainer checkpoints


class Detector:
    """End-to-end single-image detector over the anchor grid."""

    def __init__(
        self,
        backbone_cfg: BackboneConfig = BackboneConfig(),
        fusion_cfg: FusionConfig = FusionConfig(),
        head_cfg: HeadConfig = HeadConfig(),
        assignment_cfg: AssignmentConfig = AssignmentConfig(),
        seed: int = 0,
    ):
        if head_cfg.anchors_per_loc != len(assignment_cfg.aspect_ratios):
            raise ConfigError(
                f"head anchors_per_loc={head_cfg.anchors_per_loc} but assignment has "
                f"{len(assignment_cfg.aspect_ratios)} aspect ratios"
            )
        self.backbone_cfg = backbone_cfg
        self.fusion_cfg = fusion_cfg
        self.head_cfg = head_cfg
        self.assignment_cfg = assignment_cfg
        self.seed = seed

        rng = np.random.default_rng(seed)
        self.backbone = Backbone(backbone_cfg, rng)
        self.fusion = ContextTexture(fusion_cfg, list(backbone_cfg.channels_per_level), rng)
        self.heads = DetectionHeads(
            fusion_cfg.reduced_channels, fusion_cfg.neighbor_channels, head_cfg, rng
        )
        self.anchors: AnchorSet = generate_anchors(
            backbone_cfg.grid_sizes, backbone_cfg.strides, assignment_cfg
        )
        self._params: dict[str, Tensor] = {}
        self._params.update(self.backbone.named_parameters())
        self._params.update(self.fusion.named_parameters())
        self._params.update(self.heads.named_parameters())

    @property
    def input_size(self) -> int:
        return self.backbone_cfg.input_size

    @property
    def level_count(self) -> int:
        return self.backbone_cfg.levels

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self._params)

    def decay_exempt_names(self) -> set[str]:
        """Biases and L2 rescaling vectors: excluded from weight decay."""
        return {k for k in self._params if k.endswith(".bias") or ".l2norm" in k}

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad = None

    def forward(self, image01: np.ndarray) -> HeadOutputs:
        """Run the network on one [3,S,S] image with values in [0,1]."""
        outputs, _, _ = self.forward_with_intermediates(image01)
        return outputs

    def forward_with_intermediates(
        self, image01: np.ndarray
    ) -> tuple[HeadOutputs, FeaturePyramid, FusedPyramid]:
        image = Tensor(center_image(image01))
        pyramid = self.backbone.forward(image)
        fused = self.fusion.fuse(pyramid)
        last = self.level_count - 1
        levels = [
            self.heads.forward(fl.feature, has_shallow=li > 0, has_deep=li < last)
            for li, fl in enumerate(fused.levels)
        ]
        outputs = HeadOutputs(levels=levels, anchors_per_loc=self.head_cfg.anchors_per_loc)
        return outputs, pyramid, fused

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.astype(np.float32, copy=True) for name, p in self._params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = [name for name in self._params if name not in arrays]
        if missing:
            raise CheckpointError(
                "checkpoint is missing model tensors: " + ", ".join(sorted(missing))
            )
        for name, p in self._params.items():
            arr = np.asarray(arrays[name], dtype=np.float32)
            if arr.shape != p.shape:
                raise CheckpointError(
                    f"checkpoint tensor {name} has shape {arr.shape}, expected {p.shape}"
                )
            p.data = arr.copy()
            p.grad = None


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            for extent in arr.shape:
                fh.write(struct.pack("<I", extent))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    offset = len(CHECKPOINT_MAGIC)

    def read_u32() -> int:
        nonlocal offset
        if offset + 4 > len(data):
            raise CheckpointError(f"{path} is truncated")
        (value,) = struct.unpack_from("<I", data, offset)
        offset += 4
        return value

    count = read_u32()
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = read_u32()
        if offset + name_len > len(data):
            raise CheckpointError(f"{path} is truncated")
        name = data[offset : offset + name_len].decode("utf-8")
        offset += name_len
        rank = read_u32()
        shape = tuple(read_u32() for _ in range(rank))
        n_bytes = int(np.prod(shape)) * 4 if shape else 4
        if offset + n_bytes > len(data):
            raise CheckpointError(f"{path} is truncated in tensor {name}")
        flat = np.frombuffer(data, dtype="<f4", count=n_bytes // 4, offset=offset)
        offset += n_bytes
        tensors[name] = flat.reshape(shape).astype(np.float32)
    return tensors


def model_tensors(arrays: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Drop trainer-state tensors, keeping only model weights."""
    return {
        k: v for k, v in arrays.items() if not any(k.startswith(p) for p in STATE_PREFIXES)
    }
