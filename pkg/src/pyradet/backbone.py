"""Micro backbone emitting a feature pyramid at strides 4, 8, 16, ...

Two stride-2 stages reach stride 4; each additional level adds one more
stride-2 stage.  Shallow levels selected in the config pass through
learnable per-channel L2 rescaling before being emitted, so their
per-location feature norms start at a common magnitude.
"""

from __future__ import annotations

from dataclasses import dataclass
import numpy as np

from . import ops
from .exceptions import ConfigError, ShapeError
from .tensor import Tensor

IMAGE_MEAN = 0.5  # per-channel mean subtracted from [0,1] images


@dataclass(frozen=True)
class BackboneConfig:
    input_size: int = 128
    levels: int = 3
    channels_per_level: tuple[int, ...] = (32, 64, 128)
    l2norm_levels: frozenset[int] = frozenset({0, 1})
    l2norm_init_scale: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "channels_per_level", tuple(self.channels_per_level))
        object.__setattr__(self, "l2norm_levels", frozenset(self.l2norm_levels))
        if self.levels < 1:
            raise ConfigError(f"levels must be >= 1, got {self.levels}")
        if len(self.channels_per_level) != self.levels:
            raise ConfigError(
                f"channels_per_level has {len(self.channels_per_level)} entries "
                f"for {self.levels} levels"
            )
        if any(c < 1 for c in self.channels_per_level):
            raise ConfigError(f"channel counts must be positive: {self.channels_per_level}")
        divisor = 2 ** (self.levels + 1)
        if self.input_size % divisor:
            raise ConfigError(
                f"input_size {self.input_size} must be divisible by 2^(levels+1) = {divisor}"
            )
        if not self.l2norm_levels <= set(range(self.levels)):
            raise ConfigError(
                f"l2norm_levels {sorted(self.l2norm_levels)} outside level range "
                f"0..{self.levels - 1}"
            )
        if self.l2norm_init_scale <= 0:
            raise ConfigError(f"l2norm_init_scale must be > 0, got {self.l2norm_init_scale}")

    @property
    def strides(self) -> tuple[int, ...]:
        return tuple(4 * 2 ** i for i in range(self.levels))

    @property
    def grid_sizes(self) -> tuple[int, ...]:
        return tuple(self.input_size // s for s in self.strides)


@dataclass
class PyramidLevel:
    feature: Tensor
    stride: int


@dataclass
class FeaturePyramid:
    levels: list[PyramidLevel]

    def __len__(self) -> int:
        return len(self.levels)

    @property
    def features(self) -> list[Tensor]:
        return [l.feature for l in self.levels]

    @property
    def strides(self) -> tuple[int, ...]:
        return tuple(l.stride for l in self.levels)

    @property
    def grid_sizes(self) -> tuple[int, ...]:
        return tuple(l.feature.shape[1] for l in self.levels)


def center_image(image01: np.ndarray) -> np.ndarray:
    """Shift a [0,1] image to the network's zero-centered input range."""
    return (np.asarray(image01, dtype=np.float32) - IMAGE_MEAN).astype(np.float32)


def xavier_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_out = shape[0] * shape[2] * shape[3]
    fan_in = shape[1] * shape[2] * shape[3]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


class Backbone:
    """Stack of stride-2 3x3 conv + ReLU stages with per-level taps."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self.cfg = cfg
        chans = cfg.channels_per_level
        # Stage channel plan: 3 -> c0 -> c0 (stride 4 tap), then c0 -> c1 -> ...
        stage_io = [(3, chans[0]), (chans[0], chans[0])]
        for i in range(1, cfg.levels):
            stage_io.append((chans[i - 1], chans[i]))
        self.params: dict[str, Tensor] = {}
        for si, (cin, cout) in enumerate(stage_io):
            self.params[f"backbone.stage{si}.weight"] = Tensor(
                xavier_uniform(rng, (cout, cin, 3, 3)), requires_grad=True
            )
            self.params[f"backbone.stage{si}.bias"] = Tensor(
                np.zeros(cout, dtype=np.float32), requires_grad=True
            )
        for li in sorted(cfg.l2norm_levels):
            self.params[f"backbone.l2norm{li}.scale"] = Tensor(
                np.full(chans[li], cfg.l2norm_init_scale, dtype=np.float32),
                requires_grad=True,
            )
        self.n_stages = len(stage_io)

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    def l2norm_scale_names(self) -> list[str]:
        return [k for k in self.params if ".l2norm" in k]

    def forward(self, image: Tensor) -> FeaturePyramid:
        cfg = self.cfg
        if image.shape != (3, cfg.input_size, cfg.input_size):
            raise ShapeError(
                f"backbone expects a [3,{cfg.input_size},{cfg.input_size}] image, "
                f"got {image.shape}"
            )
        x = image
        levels: list[PyramidLevel] = []
        tap_stage = 1  # output of stage 1 is the stride-4 level
        for si in range(self.n_stages):
            x = ops.relu(
                ops.conv2d(
                    x,
                    self.params[f"backbone.stage{si}.weight"],
                    self.params[f"backbone.stage{si}.bias"],
                    stride=2,
                    pad=1,
                )
            )
            if si >= tap_stage:
                li = si - tap_stage
                feat = x
                if li in cfg.l2norm_levels:
                    feat = ops.l2norm_channels(
                        feat, self.params[f"backbone.l2norm{li}.scale"]
                    )
                levels.append(PyramidLevel(feature=feat, stride=cfg.strides[li]))
        return FeaturePyramid(levels=levels)
