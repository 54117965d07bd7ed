"""Gaussian OOD scoring and risk-coverage safety evaluation for semantic
segmentation softmax outputs.

The toolkit fits class-conditional Gaussians over the softmax vectors of
correctly predicted pixels, scores every pixel by Mahalanobis distance
to its predicted class, sweeps an acceptance threshold to trade risk
(1 - mIoU over accepted pixels) against coverage, measures how well the
distance separates correct from incorrect predictions, and gates the
result against safety requirements (risk ceiling, coverage floor).
"""

__version__ = "0.1.0"

from .bank import (
    ClassGaussian,
    CorrelationMatrix,
    FitConfig,
    GaussianBank,
    PixelReservoir,
    class_correlation,
    fit_bank,
    fit_gaussian,
    load_bank,
    precision_residual,
    save_bank,
    select_true_positive_pixels,
)
from .datasets import (
    ClassRegistry,
    DatasetManifest,
    LabelMask,
    SampleEntry,
    SoftmaxTensor,
    load_label_mask,
    load_manifest,
    load_softmax_tensor,
    validate_pair,
    write_label_mask,
    write_softmax_tensor,
)
from .errors import (
    DataIOError,
    EmptyDatasetError,
    FormatError,
    IntegrityError,
    NumericalError,
    SchemaError,
    SegoodError,
    ValidationError,
)
from .estimator import MahalanobisScorer
from .evaluation import (
    AUC_SUBSAMPLE_CAP,
    DEFAULT_SWEEP_POINTS,
    AucResult,
    ConfusionTotals,
    DatasetEvaluation,
    ImageSweep,
    IouResult,
    RiskCoverageCurve,
    SweepPoint,
    accepted_subset,
    aggregate_dataset,
    dataset_auc,
    evaluate_dataset,
    iou,
    mann_whitney_auc,
    risk_nonmonotone_index,
    sweep_epsilons,
    sweep_image,
)
from .gate import (
    GateVerdict,
    SafetyRequirement,
    evaluate_gate,
    evaluate_gate_per_image,
    max_coverage_at_risk,
    min_risk_at_coverage,
)
from .scoring import (
    NO_CLASS,
    DistanceMap,
    DistanceStats,
    PredictionMap,
    distance_stats,
    gaussian_distances,
    mahalanobis_map,
    predict,
    write_distance_map,
)
from .synth import (
    GroundTruth,
    SynthSpec,
    default_class_means,
    generate,
    load_ground_truth,
    shifted_means,
)

__all__ = [
    "__version__",
    # errors
    "SegoodError", "FormatError", "SchemaError", "ValidationError", "DataIOError",
    "IntegrityError", "NumericalError", "EmptyDatasetError",
    # datasets
    "ClassRegistry", "SoftmaxTensor", "LabelMask", "SampleEntry", "DatasetManifest",
    "load_softmax_tensor", "write_softmax_tensor", "load_label_mask", "write_label_mask",
    "load_manifest", "validate_pair",
    # bank
    "FitConfig", "ClassGaussian", "GaussianBank", "CorrelationMatrix", "PixelReservoir",
    "select_true_positive_pixels", "fit_gaussian", "fit_bank", "class_correlation",
    "precision_residual", "save_bank", "load_bank",
    # scoring
    "NO_CLASS", "PredictionMap", "DistanceMap", "DistanceStats",
    "predict", "gaussian_distances", "mahalanobis_map", "distance_stats", "write_distance_map",
    # evaluation
    "ConfusionTotals", "IouResult", "SweepPoint", "ImageSweep", "RiskCoverageCurve",
    "AucResult", "DatasetEvaluation", "accepted_subset", "iou", "sweep_image",
    "sweep_epsilons", "DEFAULT_SWEEP_POINTS", "AUC_SUBSAMPLE_CAP",
    "aggregate_dataset", "mann_whitney_auc", "dataset_auc", "evaluate_dataset",
    "risk_nonmonotone_index",
    # gate
    "SafetyRequirement", "GateVerdict", "max_coverage_at_risk", "min_risk_at_coverage",
    "evaluate_gate", "evaluate_gate_per_image",
    # synth
    "SynthSpec", "GroundTruth", "generate", "default_class_means", "shifted_means",
    "load_ground_truth",
    # estimator
    "MahalanobisScorer",
]
