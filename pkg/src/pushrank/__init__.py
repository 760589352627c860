"""Drug ranking per cell line with push-based latent factors.

Cell lines and drugs get latent vectors whose dot product scores a drug for a
cell line. Training pushes sensitive drugs above insensitive ones, can order
sensitive drugs among themselves and pulls similar cell lines together.
"""

from .data import (
    DataError,
    ExpressionMatrix,
    ResponseMatrix,
    SensitivityLabels,
    load_expression,
    load_labels,
    load_response,
)
from .labeling import label_new_cell_lines, label_train_test, percentile_threshold
from .model import (
    LatentModel,
    LossWeights,
    OptimizerConfig,
    TrainingLabels,
    baseline_pointwise_mf,
    extrapolate_cell_line,
    gradients,
    rank_drugs,
    surrogate_loss,
    train,
)
from .similarity import SimilarityMatrix, cosine_similarity, rbf_similarity
from .synthetic import generate_clustered, generate_synthetic

__all__ = [
    "DataError",
    "ExpressionMatrix",
    "LatentModel",
    "LossWeights",
    "OptimizerConfig",
    "ResponseMatrix",
    "SensitivityLabels",
    "SimilarityMatrix",
    "TrainingLabels",
    "baseline_pointwise_mf",
    "cosine_similarity",
    "extrapolate_cell_line",
    "generate_clustered",
    "generate_synthetic",
    "gradients",
    "label_new_cell_lines",
    "label_train_test",
    "load_expression",
    "load_labels",
    "load_response",
    "percentile_threshold",
    "rank_drugs",
    "rbf_similarity",
    "surrogate_loss",
    "train",
]
