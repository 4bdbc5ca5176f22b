"""Neighbor agglomeration: each level absorbs its adjacent levels.

For level ``n``: the center path is a 1x1 conv to ``N`` channels; the
shallower neighbor (if any) is 1x1-reduced to ``N/8`` then 2x2 max-pooled;
the deeper neighbor (if any) is 1x1-reduced to ``N/8`` then bilinearly
doubled.  The blocks concatenate as (shallow, center, deep) and pass
through one ReLU.  Missing neighbors at the boundaries simply drop out, so
interior levels carry ``N + 2*(N/8)`` channels and boundary levels
``N + N/8`` (plain ``N`` when there is a single level).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .backbone import FeaturePyramid, xavier_uniform
from .exceptions import ConfigError
from .tensor import Tensor


@dataclass(frozen=True)
class FusionConfig:
    reduced_channels: int = 64  # N: center path width after 1x1 reduction

    def __post_init__(self):
        if self.reduced_channels < 8 or self.reduced_channels % 8:
            raise ConfigError(
                f"reduced_channels must be a positive multiple of 8, got "
                f"{self.reduced_channels}"
            )

    @property
    def neighbor_channels(self) -> int:
        return self.reduced_channels // 8

    def fused_channels(self, level: int, level_count: int) -> int:
        neighbors = int(level > 0) + int(level < level_count - 1)
        return self.reduced_channels + neighbors * self.neighbor_channels


@dataclass
class FusedLevel:
    feature: Tensor
    stride: int


@dataclass
class FusedPyramid:
    levels: list[FusedLevel]

    def __len__(self) -> int:
        return len(self.levels)

    @property
    def features(self) -> list[Tensor]:
        return [l.feature for l in self.levels]


class ContextTexture:
    """Per-level fusion parameters (no sharing between levels)."""

    def __init__(
        self,
        cfg: FusionConfig,
        in_channels: list[int],
        rng: np.random.Generator,
    ):
        self.cfg = cfg
        self.level_count = len(in_channels)
        if self.level_count < 1:
            raise ConfigError("fusion needs at least one pyramid level")
        self.params: dict[str, Tensor] = {}
        n, nb = cfg.reduced_channels, cfg.neighbor_channels
        for li, c in enumerate(in_channels):
            self._add_conv(f"fusion.level{li}.center", n, c, rng)
            if li > 0:
                self._add_conv(f"fusion.level{li}.shallow", nb, in_channels[li - 1], rng)
            if li < self.level_count - 1:
                self._add_conv(f"fusion.level{li}.deep", nb, in_channels[li + 1], rng)

    def _add_conv(self, name: str, cout: int, cin: int, rng: np.random.Generator):
        self.params[f"{name}.weight"] = Tensor(
            xavier_uniform(rng, (cout, cin, 1, 1)), requires_grad=True
        )
        self.params[f"{name}.bias"] = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    def _reduce(self, name: str, feature: Tensor) -> Tensor:
        return ops.conv2d(feature, self.params[f"{name}.weight"], self.params[f"{name}.bias"])

    def fuse_level(self, pyramid: FeaturePyramid, level: int) -> Tensor:
        if not 0 <= level < len(pyramid):
            raise IndexError(
                f"fuse_level: level {level} out of range for {len(pyramid)}-level pyramid"
            )
        feats = pyramid.features
        blocks: list[Tensor] = []
        if level > 0:
            reduced = self._reduce(f"fusion.level{level}.shallow", feats[level - 1])
            blocks.append(ops.maxpool2x2(reduced))
        blocks.append(self._reduce(f"fusion.level{level}.center", feats[level]))
        if level < len(pyramid) - 1:
            reduced = self._reduce(f"fusion.level{level}.deep", feats[level + 1])
            blocks.append(ops.upsample_bilinear_2x(reduced))
        return ops.relu(ops.concat_channels(blocks))

    def fuse(self, pyramid: FeaturePyramid) -> FusedPyramid:
        if len(pyramid) != self.level_count:
            raise ConfigError(
                f"fusion built for {self.level_count} levels, pyramid has {len(pyramid)}"
            )
        return FusedPyramid(
            levels=[
                FusedLevel(feature=self.fuse_level(pyramid, li), stride=pyramid.levels[li].stride)
                for li in range(len(pyramid))
            ]
        )
