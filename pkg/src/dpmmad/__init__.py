"""Mixture-prototype anomaly detection over patch embeddings.

Fit a truncated Dirichlet-process mixture with diagonal Gaussian components
to embedding vectors via batched EM, score new embeddings by similarity to
the surviving component means, calibrate thresholds at a target false
positive rate, and evaluate pixel-level anomaly segmentation.

See the demos/ directory of the source distribution for worked examples and
the ``dpmmad`` command for the file-based pipeline.
"""

from .core import (
    VAR_FLOOR,
    DpmmModel,
    EmbeddingBatch,
    SufficientStats,
    SyntheticSpec,
    diag_gaussian_logpdf,
    mixture_log_likelihood,
    responsibilities,
    sample_synthetic,
    stick_breaking_weights,
)
from .dataio import (
    Checkpoint,
    FormatError,
    ShardFile,
    ShardRecord,
    read_checkpoint,
    read_map,
    read_mask_pgm,
    read_shard,
    render_map_pgm,
    write_checkpoint,
    write_map,
    write_mask_pgm,
    write_shard,
)
from .metrics import (
    LabeledScores,
    PairedImageScores,
    auroc,
    aupr,
    dice,
    paired_permutation_test,
)
from .scoring import (
    AnomalyMap,
    PatchGrid,
    ScoreMethod,
    anomaly_scores,
    binarize,
    component_assignment,
    normalize_rows,
    patch_to_pixel,
    select_threshold,
)
from .training import (
    FitConfig,
    FitReport,
    digamma,
    effective_components,
    fit,
    init_model,
    m_step,
    update_alpha,
    update_stats,
)

__version__ = "0.1.0"

__all__ = [
    "VAR_FLOOR",
    "DpmmModel",
    "EmbeddingBatch",
    "SufficientStats",
    "SyntheticSpec",
    "diag_gaussian_logpdf",
    "mixture_log_likelihood",
    "responsibilities",
    "sample_synthetic",
    "stick_breaking_weights",
    "Checkpoint",
    "FormatError",
    "ShardFile",
    "ShardRecord",
    "read_checkpoint",
    "read_map",
    "read_mask_pgm",
    "read_shard",
    "render_map_pgm",
    "write_checkpoint",
    "write_map",
    "write_mask_pgm",
    "write_shard",
    "LabeledScores",
    "PairedImageScores",
    "auroc",
    "aupr",
    "dice",
    "paired_permutation_test",
    "AnomalyMap",
    "PatchGrid",
    "ScoreMethod",
    "anomaly_scores",
    "binarize",
    "component_assignment",
    "normalize_rows",
    "patch_to_pixel",
    "select_threshold",
    "FitConfig",
    "FitReport",
    "digamma",
    "effective_components",
    "fit",
    "init_model",
    "m_step",
    "update_alpha",
    "update_stats",
]
