"""Classification and box-regression subnets applied to every fused level.

Each branch is two 3x3 convs (128 filters, ReLU) followed by a final 3x3
conv: ``K*A`` score channels or ``4*A`` delta channels.  One parameter set
serves all pyramid levels.  Because boundary levels lack one neighbor
block, the first conv's weight spans the widest fused layout
``[shallow | center | deep]`` and each level consumes the contiguous slice
of input-channel columns matching the blocks it actually has.

Flattened anchor ordering: ``((cell_y * S + cell_x) * A + a)``; deltas are
grouped ``(tx, ty, tw, th)`` per anchor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .exceptions import ConfigError, ShapeError
from .tensor import Tensor


@dataclass(frozen=True)
class HeadConfig:
    hidden_channels: int = 128
    num_classes: int = 1  # sigmoid face score
    anchors_per_loc: int = 2
    prior_face_prob: float = 0.01  # initial P(face) at every anchor

    def __post_init__(self):
        if self.hidden_channels < 1:
            raise ConfigError(f"hidden_channels must be >= 1, got {self.hidden_channels}")
        if self.num_classes != 1:
            raise ConfigError("only the single-logit sigmoid head is supported (num_classes=1)")
        if self.anchors_per_loc < 1:
            raise ConfigError(f"anchors_per_loc must be >= 1, got {self.anchors_per_loc}")
        if not 0.0 < self.prior_face_prob < 1.0:
            raise ConfigError(f"prior_face_prob must be in (0,1), got {self.prior_face_prob}")

    @property
    def cls_channels(self) -> int:
        return self.num_classes * self.anchors_per_loc

    @property
    def box_channels(self) -> int:
        return 4 * self.anchors_per_loc


@dataclass
class LevelOutput:
    cls_logits: Tensor  # [K*A, S, S]
    box_deltas: Tensor  # [4*A, S, S]

    @property
    def grid_size(self) -> int:
        return self.cls_logits.shape[1]


@dataclass
class HeadOutputs:
    levels: list[LevelOutput]
    anchors_per_loc: int

    @property
    def n_anchors(self) -> int:
        return sum(l.grid_size ** 2 * self.anchors_per_loc for l in self.levels)

    def flat_logits(self) -> np.ndarray:
        """Scores in anchor order (detached view of the forward data)."""
        return np.concatenate(
            [flatten_cls(l.cls_logits.data, self.anchors_per_loc) for l in self.levels]
        )

    def flat_deltas(self) -> np.ndarray:
        return np.concatenate(
            [flatten_deltas(l.box_deltas.data, self.anchors_per_loc) for l in self.levels]
        )


def flatten_cls(arr: np.ndarray, anchors_per_loc: int) -> np.ndarray:
    """[A, S, S] scores -> [S*S*A] in the anchor ordering contract."""
    a = anchors_per_loc
    if arr.shape[0] != a:
        raise ShapeError(f"flatten_cls: {arr.shape[0]} channels != A={a}")
    return arr.transpose(1, 2, 0).reshape(-1)


def unflatten_cls(flat: np.ndarray, anchors_per_loc: int, grid_size: int) -> np.ndarray:
    a, s = anchors_per_loc, grid_size
    return flat.reshape(s, s, a).transpose(2, 0, 1).copy()


def flatten_deltas(arr: np.ndarray, anchors_per_loc: int) -> np.ndarray:
    """[4*A, S, S] deltas -> [S*S*A, 4] rows of (tx, ty, tw, th)."""
    a = anchors_per_loc
    s = arr.shape[1]
    if arr.shape[0] != 4 * a:
        raise ShapeError(f"flatten_deltas: {arr.shape[0]} channels != 4*A={4 * a}")
    return arr.reshape(a, 4, s, s).transpose(2, 3, 0, 1).reshape(-1, 4)


def unflatten_deltas(flat: np.ndarray, anchors_per_loc: int, grid_size: int) -> np.ndarray:
    a, s = anchors_per_loc, grid_size
    return flat.reshape(s, s, a, 4).transpose(2, 3, 0, 1).reshape(4 * a, s, s).copy()


class DetectionHeads:
    """Shared-across-levels subnet pair over fused feature maps."""

    def __init__(
        self,
        center_channels: int,
        neighbor_channels: int,
        cfg: HeadConfig,
        rng: np.random.Generator,
    ):
        self.cfg = cfg
        self.center_channels = center_channels
        self.neighbor_channels = neighbor_channels
        full_in = center_channels + 2 * neighbor_channels
        self.full_in = full_in
        hid = cfg.hidden_channels
        sigma = 0.01
        cls_bias = -math.log((1.0 - cfg.prior_face_prob) / cfg.prior_face_prob)

        def gauss(*shape):
            return Tensor(
                rng.normal(0.0, sigma, size=shape).astype(np.float32), requires_grad=True
            )

        def zeros(n):
            return Tensor(np.zeros(n, dtype=np.float32), requires_grad=True)

        self.params: dict[str, Tensor] = {
            "head.cls.conv1.weight": gauss(hid, full_in, 3, 3),
            "head.cls.conv1.bias": zeros(hid),
            "head.cls.conv2.weight": gauss(hid, hid, 3, 3),
            "head.cls.conv2.bias": zeros(hid),
            "head.cls.out.weight": gauss(cfg.cls_channels, hid, 3, 3),
            "head.cls.out.bias": Tensor(
                np.full(cfg.cls_channels, cls_bias, dtype=np.float32), requires_grad=True
            ),
            "head.box.conv1.weight": gauss(hid, full_in, 3, 3),
            "head.box.conv1.bias": zeros(hid),
            "head.box.conv2.weight": gauss(hid, hid, 3, 3),
            "head.box.conv2.bias": zeros(hid),
            "head.box.out.weight": gauss(cfg.box_channels, hid, 3, 3),
            "head.box.out.bias": zeros(cfg.box_channels),
        }

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    def _branch(self, prefix: str, fused: Tensor, start: int, stop: int) -> Tensor:
        p = self.params
        w1 = p[f"{prefix}.conv1.weight"]
        if (start, stop) != (0, self.full_in):
            w1 = ops.narrow(w1, 1, start, stop)
        h1 = ops.relu(ops.conv2d(fused, w1, p[f"{prefix}.conv1.bias"], pad=1))
        h2 = ops.relu(ops.conv2d(h1, p[f"{prefix}.conv2.weight"], p[f"{prefix}.conv2.bias"], pad=1))
        return ops.conv2d(h2, p[f"{prefix}.out.weight"], p[f"{prefix}.out.bias"], pad=1)

    def forward(self, fused: Tensor, has_shallow: bool, has_deep: bool) -> LevelOutput:
        nb = self.neighbor_channels
        start = 0 if has_shallow else nb
        stop = self.full_in if has_deep else self.full_in - nb
        expected = stop - start
        if fused.shape[0] != expected:
            raise ShapeError(
                f"head_forward: fused map has {fused.shape[0]} channels, expected "
                f"{expected} (shallow={has_shallow}, deep={has_deep})"
            )
        return LevelOutput(
            cls_logits=self._branch("head.cls", fused, start, stop),
            box_deltas=self._branch("head.box", fused, start, stop),
        )
