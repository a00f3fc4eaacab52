"""Few-shot 3D point-cloud classification via multi-view vision prompts.

Point clouds are lifted to per-point features, projected into multi-view
2D feature grids, fused across views with self-attention, and rendered as
three-channel prompt images consumed by a frozen pretrained 2D backbone
(only batch normalization adapts). A small head classifies the pooled
multi-view features.
"""

from .backbone import ARCHITECTURES, FrozenBackbone, load_weights, save_weights
from .classify import ClassificationHead, ClassScores, overall_accuracy, xent_loss
from .config import TrainConfig, load_config
from .data import Dataset, FewShotSplit, kshot_split, load_dataset, make_synthetic
from .errors import LoadError, TrainingDiverged, ValidationError
from .estimator import MultiViewPromptClassifier
from .fusion import PromptFusion, TokenSequence, standardize_prompts
from .geometry import (
    EdgeFeatureNet,
    KnnGraph,
    PointCloud,
    PointLift,
    RotationSpec,
    knn,
    normalize_cloud,
    rotation_matrix,
    sample_rotation,
)
from .network import MultiViewPromptNetwork
from .projection import ViewSet, densify_shift, grid_project, make_view_set
from .training import (
    Checkpoint,
    ablate,
    evaluate,
    load_checkpoint,
    predict_tta,
    save_checkpoint,
    train,
    visualize_prompts,
)

__version__ = "0.1.0"

__all__ = [
    "ARCHITECTURES",
    "Checkpoint",
    "ClassificationHead",
    "ClassScores",
    "Dataset",
    "EdgeFeatureNet",
    "FewShotSplit",
    "FrozenBackbone",
    "KnnGraph",
    "LoadError",
    "MultiViewPromptClassifier",
    "MultiViewPromptNetwork",
    "PointCloud",
    "PointLift",
    "PromptFusion",
    "RotationSpec",
    "TokenSequence",
    "TrainConfig",
    "TrainingDiverged",
    "ValidationError",
    "ViewSet",
    "ablate",
    "densify_shift",
    "evaluate",
    "grid_project",
    "knn",
    "kshot_split",
    "load_checkpoint",
    "load_config",
    "load_dataset",
    "load_weights",
    "make_synthetic",
    "make_view_set",
    "normalize_cloud",
    "overall_accuracy",
    "predict_tta",
    "rotation_matrix",
    "sample_rotation",
    "save_checkpoint",
    "save_weights",
    "standardize_prompts",
    "train",
    "visualize_prompts",
    "xent_loss",
]
