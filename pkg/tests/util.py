"""Shared test helpers: random model factories and independent oracles.

The oracles here are deliberately naive (scalar loops, exhaustive pair
counting, threshold enumeration) so they stay independent of the library's
vectorized implementations.
"""

from __future__ import annotations

import math

import numpy as np

from dpmmad import DpmmModel, EmbeddingBatch


def random_sticks(rng: np.random.Generator, k: int) -> np.ndarray:
    sticks = rng.uniform(0.05, 1.0, size=k)
    sticks[-1] = 1.0
    return sticks


def random_model(rng: np.random.Generator, k: int, d: int, normalized: bool = False) -> DpmmModel:
    means = rng.normal(0.0, 2.0, size=(k, d))
    vars_ = rng.uniform(0.1, 2.0, size=(k, d))
    return DpmmModel(means, vars_, random_sticks(rng, k), float(rng.uniform(0.5, 5.0)), normalized)


def random_batch(rng: np.random.Generator, n: int, d: int) -> EmbeddingBatch:
    return EmbeddingBatch(rng.normal(0.0, 1.5, size=(n, d)))


def sticks_from_weights(weights: np.ndarray) -> np.ndarray:
    """Invert stick breaking for strictly positive weights."""
    weights = np.asarray(weights, dtype=np.float64)
    k = weights.size
    sticks = np.empty(k)
    remaining = 1.0
    for i in range(k - 1):
        sticks[i] = weights[i] / remaining
        remaining -= weights[i]
    sticks[-1] = 1.0
    return np.clip(sticks, 1e-15, 1.0)


def scalar_logpdf(y, mean, var) -> float:
    """Scalar-loop diagonal Gaussian log density."""
    total = 0.0
    for yi, mi, vi in zip(np.atleast_1d(y), np.atleast_1d(mean), np.atleast_1d(var)):
        total += -0.5 * (math.log(2.0 * math.pi * vi) + (yi - mi) ** 2 / vi)
    return total


def scalar_responsibilities(y, weights, means, vars_) -> list[float]:
    """Linear-space reference for one sample, via per-component densities."""
    dens = [w * math.exp(scalar_logpdf(y, m, v)) for w, m, v in zip(weights, means, vars_)]
    total = sum(dens)
    return [d / total for d in dens]


def auroc_pair_counting(scores, labels) -> float:
    """Exhaustive positive/negative pair counting with half credit for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    pos = scores[labels]
    neg = scores[~labels]
    total = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                total += 1.0
            elif p == q:
                total += 0.5
    return total / (pos.size * neg.size)


def aupr_threshold_enumeration(scores, labels) -> float:
    """Average precision by recomputing precision/recall at every distinct score."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    area = 0.0
    prev_recall = 0.0
    for t in sorted(set(scores.tolist()), reverse=True):
        predicted = scores >= t
        tp = int(np.logical_and(predicted, labels).sum())
        precision = tp / int(predicted.sum())
        recall = tp / n_pos
        area += precision * (recall - prev_recall)
        prev_recall = recall
    return area
