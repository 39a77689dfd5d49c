"""Frustum-window multi-scale segmentation for ultra-wide-area rasters."""

from .geometry import (
    FrustumConfig,
    ObservationWindow,
    ProjectionReferencePoint,
    frustum_windows,
    prp_for_local_tile,
    scale_ratios,
    window_for_scale,
)
from .infer import InferencePlan, LogitCanvas, infer_image, plan_prps, predict_window
from .loss import LossWeights, cross_entropy, dice_loss, total_loss
from .metrics import ConfusionMatrix, overlap_delta
from .model import (
    ModelConfig,
    ModelParams,
    backward,
    forward,
    gradient_check,
    load_checkpoint,
    save_checkpoint,
)
from .raster import IGNORE_LABEL, LabelMap, RasterImage, extract_labels, extract_resample
from .synth import SceneSpec, generate_dataset, generate_scene
from .train import TrainConfig, train_loop

__version__ = "0.1.0"

__all__ = [
    "ConfusionMatrix",
    "FrustumConfig",
    "IGNORE_LABEL",
    "InferencePlan",
    "LabelMap",
    "LogitCanvas",
    "LossWeights",
    "ModelConfig",
    "ModelParams",
    "ObservationWindow",
    "ProjectionReferencePoint",
    "RasterImage",
    "SceneSpec",
    "TrainConfig",
    "backward",
    "cross_entropy",
    "dice_loss",
    "extract_labels",
    "extract_resample",
    "forward",
    "frustum_windows",
    "generate_dataset",
    "generate_scene",
    "gradient_check",
    "infer_image",
    "load_checkpoint",
    "overlap_delta",
    "plan_prps",
    "predict_window",
    "prp_for_local_tile",
    "save_checkpoint",
    "scale_ratios",
    "total_loss",
    "train_loop",
    "window_for_scale",
]
