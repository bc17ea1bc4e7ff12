"""Anomaly scoring against the surviving component means.

A fitted mixture is reduced to the set of components whose weight clears a
threshold; the distance of a test embedding to the nearest surviving mean
(cosine, Euclidean or per-component likelihood) becomes its anomaly score.
Patch-level scores are lifted to pixel resolution by center-aligned bilinear
interpolation, and score maps are binarized at a threshold calibrated to a
target false-positive rate on normal validation scores.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass

import numpy as np

from .core import DpmmModel, EmbeddingBatch, component_log_densities
from .training import effective_components


class ScoreMethod(str, enum.Enum):
    COSINE = "cosine"
    EUCLIDEAN = "euclidean"
    LIKELIHOOD = "likelihood"


@dataclass(frozen=True)
class PatchGrid:
    """Per-patch scores laid out on the image's patch grid."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise ValueError(f"patch grid must be 2-D and nonempty, got shape {values.shape}")
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class AnomalyMap:
    """Pixel-resolution anomaly scores; higher means more anomalous."""

    scores: np.ndarray
    image_id: str = ""

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        if scores.ndim != 2:
            raise ValueError(f"anomaly map must be 2-D, got shape {scores.shape}")
        if not np.all(np.isfinite(scores)):
            raise ValueError("anomaly map entries must all be finite")
        object.__setattr__(self, "scores", scores)

    @property
    def shape(self) -> tuple[int, int]:
        return self.scores.shape


def normalize_rows(batch: EmbeddingBatch) -> EmbeddingBatch:
    """Scale every row to unit L2 norm.

    Rows with a norm below 1e-12 cannot be normalized meaningfully; they are
    passed through unchanged and reported once via ``warnings.warn``.
    """
    norms = np.linalg.norm(batch.data, axis=1, keepdims=True)
    degenerate = norms[:, 0] < 1e-12
    n_bad = int(np.count_nonzero(degenerate))
    if n_bad:
        warnings.warn(f"{n_bad} rows with near-zero norm left unnormalized", RuntimeWarning)
    scaled = batch.data / np.where(degenerate[:, None], 1.0, norms)
    if n_bad:
        # degenerate rows break the unit-norm invariant, so the flag stays off
        return EmbeddingBatch(scaled, normalized=False)
    return EmbeddingBatch(scaled, normalized=True)


def _effective_indices(model: DpmmModel, t_pi: float) -> np.ndarray:
    return np.asarray(effective_components(model, t_pi), dtype=np.intp)


def _check_scoring_inputs(batch: EmbeddingBatch, model: DpmmModel) -> None:
    if batch.dim != model.dim:
        raise ValueError(f"dimension mismatch: batch D={batch.dim}, model D={model.dim}")
    if model.normalized_input and not batch.normalized:
        raise ValueError("model was fit on normalized embeddings; normalize the batch first")


def _cosine_similarities(data: np.ndarray, means: np.ndarray) -> np.ndarray:
    y_norm = np.linalg.norm(data, axis=1, keepdims=True)
    m_norm = np.linalg.norm(means, axis=1)
    denom = np.where(y_norm > 0.0, y_norm, 1.0) * np.where(m_norm > 0.0, m_norm, 1.0)
    return (data @ means.T) / denom


def _euclidean_distances(data: np.ndarray, means: np.ndarray) -> np.ndarray:
    sq = (
        np.sum(data**2, axis=1, keepdims=True)
        - 2.0 * (data @ means.T)
        + np.sum(means**2, axis=1)
    )
    return np.sqrt(np.maximum(sq, 0.0))


def anomaly_scores(
    batch: EmbeddingBatch,
    model: DpmmModel,
    method: ScoreMethod = ScoreMethod.COSINE,
    t_pi: float = 1e-6,
) -> np.ndarray:
    """Per-row anomaly scores, oriented so that higher means more anomalous.

    cosine    : 1 - max cosine similarity to any surviving mean
    euclidean : distance to the nearest surviving mean
    likelihood: negative best per-component log density

    Only components whose mixture weight exceeds ``t_pi`` participate. A
    model fit on normalized embeddings refuses unnormalized batches.
    """
    method = ScoreMethod(method)
    _check_scoring_inputs(batch, model)
    keep = _effective_indices(model, t_pi)
    means = model.means[keep]
    if method is ScoreMethod.COSINE:
        return 1.0 - np.max(_cosine_similarities(batch.data, means), axis=1)
    if method is ScoreMethod.EUCLIDEAN:
        return np.min(_euclidean_distances(batch.data, means), axis=1)
    log_dens = component_log_densities(batch.data, means, model.vars[keep])
    return -np.max(log_dens, axis=1)


def component_assignment(
    batch: EmbeddingBatch,
    model: DpmmModel,
    method: ScoreMethod = ScoreMethod.COSINE,
    t_pi: float = 1e-6,
) -> np.ndarray:
    """Index of the closest surviving component for every row.

    Indices refer to the original component numbering; ties resolve to the
    lowest index.
    """
    method = ScoreMethod(method)
    _check_scoring_inputs(batch, model)
    keep = _effective_indices(model, t_pi)
    means = model.means[keep]
    if method is ScoreMethod.COSINE:
        best = np.argmax(_cosine_similarities(batch.data, means), axis=1)
    elif method is ScoreMethod.EUCLIDEAN:
        best = np.argmin(_euclidean_distances(batch.data, means), axis=1)
    else:
        best = np.argmax(component_log_densities(batch.data, means, model.vars[keep]), axis=1)
    return keep[best]


def patch_to_pixel(grid: PatchGrid, height: int, width: int) -> AnomalyMap:
    """Bilinearly interpolate patch scores to pixel resolution.

    Each patch score sits at its patch center; pixel centers are sampled with
    edge clamping, so the output range never leaves the grid's range and a
    constant grid maps to a constant image.
    """
    gh, gw = grid.shape
    if height < gh or width < gw:
        raise ValueError("target resolution must be at least the grid resolution")
    out = _resample_axis(grid.values, height, axis=0)
    out = _resample_axis(out, width, axis=1)
    return AnomalyMap(out)


def _resample_axis(values: np.ndarray, target: int, axis: int) -> np.ndarray:
    source = values.shape[axis]
    if target == source:
        return values
    # pixel center r + 0.5 lands at grid coordinate (r + 0.5) * source/target - 0.5
    pos = (np.arange(target) + 0.5) * (source / target) - 0.5
    lo = np.clip(np.floor(pos).astype(np.intp), 0, source - 1)
    hi = np.clip(lo + 1, 0, source - 1)
    frac = np.clip(pos - np.floor(pos), 0.0, 1.0)
    frac[pos < 0.0] = 0.0
    frac[pos > source - 1] = 0.0
    low = np.take(values, lo, axis=axis)
    high = np.take(values, hi, axis=axis)
    shape = [1, 1]
    shape[axis] = target
    w = frac.reshape(shape)
    return low * (1.0 - w) + high * w


def select_threshold(normal_scores: np.ndarray, target_fpr: float) -> float:
    """Smallest threshold whose strict exceedance rate stays within ``target_fpr``.

    Equivalently the (1 - target_fpr) empirical quantile under the "higher"
    convention; scores must be oriented so that higher means more anomalous.
    """
    scores = np.asarray(normal_scores, dtype=np.float64).ravel()
    if scores.size == 0:
        raise ValueError("cannot calibrate a threshold on empty scores")
    if not (0.0 < target_fpr < 1.0):
        raise ValueError("target_fpr must lie in (0, 1)")
    ordered = np.sort(scores)
    candidates = np.unique(ordered)
    above = scores.size - np.searchsorted(ordered, candidates, side="right")
    ok = above / scores.size <= target_fpr
    return float(candidates[np.argmax(ok)])  # exceedance is monotone, first True is smallest


def binarize(amap: AnomalyMap, threshold: float) -> np.ndarray:
    """Boolean mask of pixels strictly above the threshold."""
    return amap.scores > threshold
