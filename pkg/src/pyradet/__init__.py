"""pyradet: anchor-based single-shot face detection on a from-scratch engine.

The package is organized around a minimal reverse-mode autodiff core
(`tensor`, `ops`, `gradcheck`), the detector itself (`backbone`, `fusion`,
`heads`, `model`), box machinery (`anchors`, `losses`, `inference`,
`evaluation`), synthetic data (`data`), and the training loop (`trainer`),
all wired together by `config` and the `pyradet` CLI.
"""

from .anchors import AssignmentConfig, Box, assign, decode, encode, generate_anchors, iou
from .backbone import BackboneConfig
from .config import PipelineConfig
from .data import AugmentConfig, GeneratorConfig, SyntheticScene, augment, generate_scene
from .evaluation import EvalResult, average_precision, box_to_ellipse
from .fusion import FusionConfig
from .gradcheck import grad_check
from .heads import HeadConfig
from .inference import Detection, InferenceConfig, nms, postprocess
from .losses import LossConfig, focal_loss, multitask_loss, smooth_l1
from .model import Detector, load_checkpoint, save_checkpoint
from .tensor import Tensor
from .trainer import TrainConfig, evaluate_detector, train

__version__ = "0.1.0"

__all__ = [
    "AssignmentConfig",
    "AugmentConfig",
    "BackboneConfig",
    "Box",
    "Detection",
    "Detector",
    "EvalResult",
    "FusionConfig",
    "GeneratorConfig",
    "HeadConfig",
    "InferenceConfig",
    "LossConfig",
    "PipelineConfig",
    "SyntheticScene",
    "Tensor",
    "TrainConfig",
    "assign",
    "augment",
    "average_precision",
    "box_to_ellipse",
    "decode",
    "encode",
    "evaluate_detector",
    "focal_loss",
    "generate_anchors",
    "generate_scene",
    "grad_check",
    "iou",
    "load_checkpoint",
    "multitask_loss",
    "nms",
    "postprocess",
    "save_checkpoint",
    "smooth_l1",
    "train",
]
