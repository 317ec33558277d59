"""Saliency-guided calorie regression on a small numpy CNN.

Human saliency maps compiled from bounding boxes steer a TinyCNN through the
CYBORG losses; the package also covers transfer learning, frozen-member
ensembles and a synthetic scene generator with exact labels.
"""

__version__ = "0.1.0"

from .data import Dataset, Manifest, SplitSpec, generate_synthetic, load_dataset, load_manifest, synthetic_dataset
from .ensemble import build_ensemble, ensemble_predict, load_ensemble, save_ensemble, train_combiner
from .errors import SalcalError
from .estimators import (
    FoodCategoryClassifier,
    HumanSaliencyTransformer,
    SaliencyGuidedRegressor,
    StackedEnsembleRegressor,
    pretrain_and_finetune,
)
from .heatmap import Annotation, Box, HeatmapConfig, SaliencyMap, build_hsm
from .losses import LossSpec, cyborg_multiplied, cyborg_weighted, relative_improvement
from .nn import ModelGraph, extract_msm, forward, load_checkpoint, predict, save_checkpoint, swap_head, tiny_cnn
from .train import TrainConfig, evaluate, pretrain_then_finetune, saliency_agreement, train

__all__ = [
    "Annotation",
    "Box",
    "Dataset",
    "FoodCategoryClassifier",
    "HeatmapConfig",
    "HumanSaliencyTransformer",
    "LossSpec",
    "Manifest",
    "ModelGraph",
    "SaliencyGuidedRegressor",
    "SaliencyMap",
    "SalcalError",
    "SplitSpec",
    "StackedEnsembleRegressor",
    "TrainConfig",
    "build_ensemble",
    "build_hsm",
    "cyborg_multiplied",
    "cyborg_weighted",
    "ensemble_predict",
    "evaluate",
    "extract_msm",
    "forward",
    "generate_synthetic",
    "load_checkpoint",
    "load_dataset",
    "load_ensemble",
    "load_manifest",
    "predict",
    "pretrain_and_finetune",
    "pretrain_then_finetune",
    "relative_improvement",
    "saliency_agreement",
    "save_checkpoint",
    "save_ensemble",
    "swap_head",
    "synthetic_dataset",
    "tiny_cnn",
    "train",
    "train_combiner",
]
