"""Automatic training-set generation and probabilistic cell phenotyping."""

__version__ = "0.1.0"

from .kernels import BACKEND as KERNEL_BACKEND
from .model import Cohort, MultiChannelImage, LabelMask, CellRecord, build_cell_records
from .segmentation import (
    BlobParams,
    MembraneParams,
    atrous_decompose,
    atrous_planes,
    detect_nuclei,
    detect_membrane,
    kittler_threshold,
    connected_components,
)
from .qc import QcParams, cell_round_correlation, qc_filter
from .autotrain import (
    GmmParams,
    CellScores,
    CatThresholds,
    TrainingSample,
    TrainingSet,
    fit_gmm2,
    background_posterior,
    cell_background_prob,
    negative_labels,
    positive_score,
    assign_classes,
    build_training_set,
)
from .balance import BalanceParams, downsample_negatives, smote_upsample, equalize
from .classify import (
    FeatureSpec,
    ClassifierModel,
    MetricsReport,
    train_classifier,
    predict,
    predict_proba,
    evaluate,
)
from .synth import SynthSpec, ClassSpec, generate_cohort
from .config import PipelineConfig, load_config
from .pipeline import run_pipeline

__all__ = [
    "KERNEL_BACKEND",
    "Cohort",
    "MultiChannelImage",
    "LabelMask",
    "CellRecord",
    "build_cell_records",
    "BlobParams",
    "MembraneParams",
    "atrous_decompose",
    "atrous_planes",
    "detect_nuclei",
    "detect_membrane",
    "kittler_threshold",
    "connected_components",
    "QcParams",
    "cell_round_correlation",
    "qc_filter",
    "GmmParams",
    "CellScores",
    "CatThresholds",
    "TrainingSample",
    "TrainingSet",
    "fit_gmm2",
    "background_posterior",
    "cell_background_prob",
    "negative_labels",
    "positive_score",
    "assign_classes",
    "build_training_set",
    "BalanceParams",
    "downsample_negatives",
    "smote_upsample",
    "equalize",
    "FeatureSpec",
    "ClassifierModel",
    "MetricsReport",
    "train_classifier",
    "predict",
    "predict_proba",
    "evaluate",
    "SynthSpec",
    "ClassSpec",
    "generate_cohort",
    "PipelineConfig",
    "load_config",
    "run_pipeline",
]
