"""One JSON config for the whole pipeline, with strict validation.

Every section mirrors its module's config dataclass; omitted sections and
fields fall back to the documented defaults, unknown keys are rejected,
and every value is range-checked by the dataclass it lands in.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .anchors import AssignmentConfig
from .backbone import BackboneConfig
from .data import AugmentConfig, GeneratorConfig
from .exceptions import ConfigError
from .fusion import FusionConfig
from .heads import HeadConfig
from .inference import InferenceConfig
from .losses import LossConfig
from .model import Detector
from .trainer import TrainConfig

# JSON key -> dataclass field, where they differ ("lambda" is a keyword).
_ALIASES = {"lambda": "lambda_"}
_TUPLE_FIELDS = {
    "channels_per_level",
    "aspect_ratios",
    "crop_scale_range",
    "contrast_range",
    "saturation_range",
    "lr_drop_fractions",
}
_SET_FIELDS = {"l2norm_levels"}


def _build_section(cls, section: dict, name: str):
    valid = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in section.items():
        field_name = _ALIASES.get(key, key)
        if field_name not in valid:
            raise ConfigError(f"unknown key '{key}' in config section '{name}'")
        if field_name in _TUPLE_FIELDS:
            value = tuple(value)
        elif field_name in _SET_FIELDS:
            value = frozenset(value)
        kwargs[field_name] = value
    return cls(**kwargs)


@dataclass(frozen=True)
class PipelineConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    assignment: AssignmentConfig = field(default_factory=AssignmentConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)

    def __post_init__(self):
        size = self.backbone.input_size
        if self.generator.image_size != size:
            raise ConfigError(
                f"generator.image_size ({self.generator.image_size}) must equal "
                f"backbone.input_size ({size})"
            )
        if self.augment.output_size != size:
            raise ConfigError(
                f"augment.output_size ({self.augment.output_size}) must equal "
                f"backbone.input_size ({size})"
            )
        if self.head.anchors_per_loc != len(self.assignment.aspect_ratios):
            raise ConfigError(
                "head.anchors_per_loc must match the number of assignment.aspect_ratios"
            )

    _SECTIONS = {
        "backbone": BackboneConfig,
        "fusion": FusionConfig,
        "head": HeadConfig,
        "assignment": AssignmentConfig,
        "loss": LossConfig,
        "generator": GeneratorConfig,
        "augment": AugmentConfig,
        "train": TrainConfig,
        "inference": InferenceConfig,
    }

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        if not isinstance(data, dict):
            raise ConfigError(f"config root must be a JSON object, got {type(data).__name__}")
        unknown = set(data) - set(cls._SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {', '.join(sorted(unknown))}")
        kwargs = {}
        for name, section_cls in cls._SECTIONS.items():
            section = data.get(name, {})
            if not isinstance(section, dict):
                raise ConfigError(f"config section '{name}' must be an object")
            try:
                kwargs[name] = _build_section(section_cls, section, name)
            except TypeError as err:
                raise ConfigError(f"bad value in config section '{name}': {err}") from err
        return cls(**kwargs)

    @classmethod
    def from_json_file(cls, path) -> "PipelineConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path} is not valid JSON: {err}") from err
        return cls.from_dict(data)

    @classmethod
    def load(cls, path=None) -> "PipelineConfig":
        """Config from a JSON file, or all defaults when no path is given."""
        return cls.from_json_file(path) if path else cls()

    def build_detector(self) -> Detector:
        return Detector(
            backbone_cfg=self.backbone,
            fusion_cfg=self.fusion,
            head_cfg=self.head,
            assignment_cfg=self.assignment,
            seed=self.train.seed,
        )
