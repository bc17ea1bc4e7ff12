"""Pixel-level evaluation: AUROC, average precision, Dice, and a paired
permutation test for comparing two methods on per-image metric values."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LabeledScores:
    """Flat scores with binary ground-truth labels (1 = anomalous)."""

    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64).ravel()
        labels = np.asarray(self.labels).ravel().astype(bool)
        if scores.shape != labels.shape:
            raise ValueError("scores and labels must have the same length")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels)

    @property
    def n_pos(self) -> int:
        return int(np.count_nonzero(self.labels))

    @property
    def n_neg(self) -> int:
        return int(self.labels.size - self.n_pos)


@dataclass(frozen=True)
class PairedImageScores:
    """Per-image metric values for two methods, compared pairwise."""

    method_a: np.ndarray
    method_b: np.ndarray
    n_permutations: int = 10000
    seed: int = 0

    def __post_init__(self):
        a = np.asarray(self.method_a, dtype=np.float64).ravel()
        b = np.asarray(self.method_b, dtype=np.float64).ravel()
        if a.shape != b.shape:
            raise ValueError("paired score vectors must have equal length")
        if a.size < 2:
            raise ValueError("need at least 2 pairs")
        if self.n_permutations < 1:
            raise ValueError("n_permutations must be positive")
        object.__setattr__(self, "method_a", a)
        object.__setattr__(self, "method_b", b)


def auroc(data: LabeledScores) -> float:
    """Area under the ROC curve over pooled scores.

    Computed as the Mann-Whitney statistic with average ranks, so ties get
    half credit. Requires both classes to be present.
    """
    if data.n_pos == 0 or data.n_neg == 0:
        raise ValueError("AUROC needs at least one positive and one negative label")
    ranks = _average_ranks(data.scores)
    pos_rank_sum = float(ranks[data.labels].sum())
    n_pos, n_neg = data.n_pos, data.n_neg
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    new_block = np.concatenate([[True], np.diff(sorted_vals) != 0.0])
    block_of = np.cumsum(new_block) - 1
    starts = np.flatnonzero(new_block)
    sizes = np.diff(np.concatenate([starts, [values.size]]))
    block_rank = starts + (sizes + 1) / 2.0
    ranks = np.empty(values.size, dtype=np.float64)
    ranks[order] = block_rank[block_of]
    return ranks


def aupr(data: LabeledScores) -> float:
    """Area under the precision-recall curve as step-wise average precision.

    Thresholds sweep the distinct scores in descending order; rows sharing a
    score enter as one block. Needs at least one positive label.
    """
    if data.n_pos == 0:
        raise ValueError("AUPR needs at least one positive label")
    order = np.argsort(-data.scores, kind="mergesort")
    sorted_scores = data.scores[order]
    sorted_labels = data.labels[order].astype(np.float64)
    tp = np.cumsum(sorted_labels)
    predicted = np.arange(1, data.scores.size + 1, dtype=np.float64)
    # keep only the last row of each tie block
    block_end = np.concatenate([np.diff(sorted_scores) != 0.0, [True]])
    tp = tp[block_end]
    predicted = predicted[block_end]
    precision = tp / predicted
    recall = tp / data.n_pos
    delta_recall = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(precision * delta_recall))


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """Dice overlap between two binary masks; two empty masks count as 1.0."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / total


def paired_permutation_test(data: PairedImageScores) -> float:
    """Two-sided sign-flip permutation test on the mean paired difference.

    Each replicate flips the sign of every pair's difference independently
    with probability one half; the p-value uses the add-one estimator so it
    always lies in (0, 1]. Deterministic for a fixed seed.
    """
    diffs = data.method_a - data.method_b
    observed = abs(float(diffs.mean()))
    rng = np.random.default_rng(data.seed)
    hits = 0
    remaining = data.n_permutations
    while remaining > 0:  # chunked draws keep memory bounded for large image sets
        chunk = min(remaining, 1024)
        signs = rng.integers(0, 2, size=(chunk, diffs.size)) * 2 - 1
        replicated = np.abs((signs * diffs).mean(axis=1))
        hits += int(np.count_nonzero(replicated >= observed))
        remaining -= chunk
    return (1 + hits) / (1 + data.n_permutations)
