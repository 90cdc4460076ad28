"""Fusion, uncertainty decomposition and evaluation for sampled
probabilistic instance segmentation."""

from .fusion import FusionConfig, Observation, binarize, bsas_cluster, fuse, heatmap
from .metrics import (
    EvalConfig,
    EvalReport,
    MatchResult,
    ace,
    ause_brier,
    background_loss,
    classwise_fbw,
    evaluate_dataset,
    foreground_loss,
    label_quality,
    match_scene,
    pair_quality_matrix,
    spatial_quality,
    weighted_fbw,
)
from .model import (
    BBox,
    BinaryMask,
    ClassDist,
    Detection,
    GroundTruthInstance,
    ProbMask,
    SampleSet,
    Scene,
    ValidationError,
    mask_iou,
)
from .runio import RunMeta, load_run, rle_decode, rle_encode, save_run
from .simulator import (
    NoiseConfig,
    SimScene,
    expected_decomposition,
    generate_scene,
    make_calibration_records,
    simulate_samples,
)
from .uncertainty import (
    CovarianceDecomposition,
    VarianceMaps,
    class_covariance,
    pixel_variance,
    variance_maps,
)

__version__ = "0.1.0"

__all__ = [
    "BBox",
    "BinaryMask",
    "ClassDist",
    "CovarianceDecomposition",
    "Detection",
    "EvalConfig",
    "EvalReport",
    "FusionConfig",
    "GroundTruthInstance",
    "MatchResult",
    "NoiseConfig",
    "Observation",
    "ProbMask",
    "RunMeta",
    "SampleSet",
    "Scene",
    "SimScene",
    "ValidationError",
    "VarianceMaps",
    "ace",
    "ause_brier",
    "background_loss",
    "binarize",
    "bsas_cluster",
    "class_covariance",
    "classwise_fbw",
    "evaluate_dataset",
    "expected_decomposition",
    "foreground_loss",
    "fuse",
    "generate_scene",
    "heatmap",
    "label_quality",
    "load_run",
    "make_calibration_records",
    "mask_iou",
    "match_scene",
    "pair_quality_matrix",
    "pixel_variance",
    "rle_decode",
    "rle_encode",
    "save_run",
    "simulate_samples",
    "spatial_quality",
    "variance_maps",
    "weighted_fbw",
]
