"""Weakly-supervised semantic segmentation and scoring of Gleason grades."""

from .aggregation import AggregationSpec, GlobalAggregation2d, aggregate, lse_gradient
from .augment import HideAndSeekConfig, apply_geometric, augment, hide_and_seek
from .baselines import (
    ResidualUNet,
    UNetConfig,
    Vgg19Classifier,
    build_unet,
    build_vgg19sup,
    convert_to_cam,
    dice_loss,
    infer_full_core,
)
from .data import (
    CLASS_NAMES,
    CoreSample,
    GlobalLabel,
    load_dataset,
    save_dataset,
    split_cores,
)
from .metrics import (
    ConfusionMatrix,
    EvaluationReport,
    confusion_metrics,
    corelevel_auc,
    patch_level_eval,
    pixel_level_eval,
    quadratic_kappa,
)
from .model import (
    ClassProbabilityMaps,
    ModelConfig,
    WeGleNet,
    build_model,
    infer_segmentation,
    weak_loss,
)
from .patches import PatchRecord, extract_patches
from .scoring import (
    ClassPercentages,
    GleasonScore,
    ScoringConfig,
    apply_score_rule,
    class_percentages,
    gleason_score_sum,
    score_mask,
)
from .synthetic import SynthesisSpec, synthesize_core, synthesize_dataset
from .training import TrainConfig, load_checkpoint, lr_schedule, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "AggregationSpec",
    "GlobalAggregation2d",
    "aggregate",
    "lse_gradient",
    "HideAndSeekConfig",
    "apply_geometric",
    "augment",
    "hide_and_seek",
    "ResidualUNet",
    "UNetConfig",
    "Vgg19Classifier",
    "build_unet",
    "build_vgg19sup",
    "convert_to_cam",
    "dice_loss",
    "infer_full_core",
    "CLASS_NAMES",
    "CoreSample",
    "GlobalLabel",
    "load_dataset",
    "save_dataset",
    "split_cores",
    "ConfusionMatrix",
    "EvaluationReport",
    "confusion_metrics",
    "corelevel_auc",
    "patch_level_eval",
    "pixel_level_eval",
    "quadratic_kappa",
    "ClassProbabilityMaps",
    "ModelConfig",
    "WeGleNet",
    "build_model",
    "infer_segmentation",
    "weak_loss",
    "PatchRecord",
    "extract_patches",
    "ClassPercentages",
    "GleasonScore",
    "ScoringConfig",
    "apply_score_rule",
    "class_percentages",
    "gleason_score_sum",
    "score_mask",
    "SynthesisSpec",
    "synthesize_core",
    "synthesize_dataset",
    "TrainConfig",
    "load_checkpoint",
    "lr_schedule",
    "save_checkpoint",
    "train",
]
