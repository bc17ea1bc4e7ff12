"""Batched EM training for the truncated mixture.

The loop accumulates exponentially discounted sufficient statistics over
mini-batches, applies the closed-form M-step for means, variances and stick
fractions, then refreshes the concentration parameter from the stick
posterior. Model selection keeps the epoch snapshot with the highest
validation log likelihood.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import (
    VAR_FLOOR,
    DpmmModel,
    EmbeddingBatch,
    SufficientStats,
    mixture_log_likelihood,
    responsibilities,
)

STARVED_MASS = 1e-12
STICK_CLAMP = 1e-12


@dataclass(frozen=True)
class FitConfig:
    """Training hyperparameters.

    Defaults follow the reference operating point: truncation at 500
    components, discount 0.2, 40 epochs over batches of 12288 vectors.
    ``full_batch_mode`` turns the loop into plain full-data EM (discount
    forced to 1, concentration held fixed), which is the configuration whose
    log likelihood is provably non-decreasing.
    """

    k: int = 500
    gamma: float = 0.2
    epochs: int = 40
    batch_vectors: int = 12288
    alpha_init: float = 1.0
    seed: int = 0
    var_floor: float = VAR_FLOOR
    alpha_clamp: tuple[float, float] = (1e-3, 1e6)
    full_batch_mode: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if not (0.0 < self.gamma <= 1.0):
            raise ValueError("gamma must lie in (0, 1]")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.batch_vectors < 1:
            raise ValueError("batch_vectors must be positive")
        if self.alpha_init <= 0.0 or self.var_floor <= 0.0:
            raise ValueError("alpha_init and var_floor must be positive")
        low, high = self.alpha_clamp
        if not (0.0 < low <= high):
            raise ValueError("alpha_clamp must satisfy 0 < low <= high")
        if self.seed < 0:
            raise ValueError("seed must be an unsigned integer")


@dataclass
class FitReport:
    """Per-epoch trace of a training run."""

    val_loglik: list[float] = field(default_factory=list)
    effective_counts: list[int] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    best_epoch: int = -1
    final_effective: int = 0


def digamma(x):
    """Digamma function for positive arguments.

    Applies the upward recurrence psi(x) = psi(x+1) - 1/x until the argument
    reaches the asymptotic region, then the de Moivre series in 1/x^2. Scalar
    in, scalar out; arrays are handled elementwise.
    """
    arr = np.asarray(x, dtype=np.float64)
    scalar = arr.ndim == 0
    arr = np.atleast_1d(arr).copy()
    if np.any(arr <= 0.0) or not np.all(np.isfinite(arr)):
        raise ValueError("digamma requires strictly positive finite arguments")
    acc = np.zeros_like(arr)
    # recurrence into x >= 10, where the truncated series is accurate to ~1e-15
    while True:
        small = arr < 10.0
        if not np.any(small):
            break
        acc[small] -= 1.0 / arr[small]
        arr[small] += 1.0
    inv2 = 1.0 / (arr * arr)
    series = inv2 * (
        1.0 / 12.0
        - inv2 * (1.0 / 120.0 - inv2 * (1.0 / 252.0 - inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0 - inv2 * (691.0 / 32760.0)))))
    )
    out = acc + np.log(arr) - 0.5 / arr - series
    return float(out[0]) if scalar else out


def init_model(first_batch: EmbeddingBatch, config: FitConfig) -> tuple[DpmmModel, SufficientStats]:
    """Seed the model from a first batch of data.

    Means are rows sampled with replacement, variances start at the global
    per-dimension variance, sticks encode uniform weights, and the statistics
    are the global moments spread uniformly so the first M-step reproduces
    the initialization.
    """
    if first_batch.n < 1:
        raise ValueError("cannot initialize from an empty batch")
    k = config.k
    rng = np.random.default_rng([config.seed, 0])
    rows = rng.integers(0, first_batch.n, size=k)
    means = first_batch.data[rows].copy()
    global_var = np.maximum(first_batch.data.var(axis=0), config.var_floor)
    vars_ = np.tile(global_var, (k, 1))
    # v_k = 1/(K-k) in 0-based indexing gives exactly uniform weights
    sticks = 1.0 / (k - np.arange(k, dtype=np.float64))
    sticks[-1] = 1.0
    model = DpmmModel(means, vars_, sticks, config.alpha_init, first_batch.normalized)
    p_bar = np.full(k, 1.0 / k)
    m_bar = p_bar[:, None] * first_batch.data.mean(axis=0)
    c_bar = p_bar[:, None] * (first_batch.data**2).mean(axis=0)
    return model, SufficientStats(p_bar, m_bar, c_bar, first_batch.n)


def update_stats(
    stats: SufficientStats, resp: np.ndarray, batch: EmbeddingBatch, gamma: float
) -> SufficientStats:
    """Blend batch statistics into the moving averages with discount ``gamma``."""
    if not (0.0 < gamma <= 1.0):
        raise ValueError("gamma must lie in (0, 1]")
    resp = np.asarray(resp, dtype=np.float64)
    if resp.shape != (batch.n, stats.k):
        raise ValueError(f"responsibilities must have shape {(batch.n, stats.k)}, got {resp.shape}")
    if batch.dim != stats.dim:
        raise ValueError(f"dimension mismatch: batch D={batch.dim}, stats D={stats.dim}")
    if np.any(np.abs(resp.sum(axis=1) - 1.0) > 1e-9):
        raise ValueError("responsibility rows must sum to 1")
    n = batch.n
    p_new = resp.mean(axis=0)
    m_new = (resp.T @ batch.data) / n
    c_new = (resp.T @ (batch.data**2)) / n
    return SufficientStats(
        (1.0 - gamma) * stats.p_bar + gamma * p_new,
        (1.0 - gamma) * stats.m_bar + gamma * m_new,
        (1.0 - gamma) * stats.c_bar + gamma * c_new,
        n,
    )


def m_step(
    stats: SufficientStats,
    alpha_prev: float,
    config: FitConfig,
    prev_means: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Closed-form parameter update from the current statistics.

    Returns ``(means, vars, sticks)``. Components whose smoothed mass fell
    below ``STARVED_MASS`` keep their previous mean (zeros when none is
    given) and are reset to the variance floor instead of dividing 0 by 0.
    The prior pull on the sticks is scaled by 1/batch_size so it lives on the
    same [0, 1] scale as the averaged masses; at alpha = 1 the sticks
    reproduce ``p_bar`` exactly.
    """
    p = stats.p_bar
    if abs(float(p.sum()) - 1.0) > 1e-6:
        raise ValueError("p_bar must be a simplex")
    alive = p >= STARVED_MASS
    safe_p = np.where(alive, p, 1.0)
    means = stats.m_bar / safe_p[:, None]
    vars_ = stats.c_bar / safe_p[:, None] - means**2
    if prev_means is None:
        prev_means = np.zeros_like(means)
    means = np.where(alive[:, None], means, prev_means)
    vars_ = np.where(alive[:, None], vars_, config.var_floor)
    vars_ = np.maximum(vars_, config.var_floor)

    tail = np.concatenate([np.cumsum(p[::-1])[::-1][1:], [0.0]])
    prior = (alpha_prev - 1.0) / stats.batch_size
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = p / (p + prior + tail)
    # alpha < 1 makes the prior term negative; a vanishing denominator then
    # degenerates to 0/0 for starved components, which clamp low
    raw = np.where(np.isfinite(raw), raw, STICK_CLAMP)
    sticks = np.clip(raw, STICK_CLAMP, 1.0 - STICK_CLAMP)
    sticks[-1] = 1.0
    return means, vars_, sticks


def update_alpha(stats: SufficientStats, alpha_prev: float, config: FitConfig) -> float:
    """Refresh the concentration parameter from the smoothed masses.

    Uses the digamma expression for the expected log stick remainders with
    counts on the batch scale; the result is clamped to ``config.alpha_clamp``.
    A single-component model has no sticks to estimate and keeps ``alpha_prev``.
    """
    if alpha_prev <= 0.0:
        raise ValueError("alpha_prev must be positive")
    k = stats.k
    if k == 1:
        return float(alpha_prev)
    counts = stats.batch_size * stats.p_bar
    tail_counts = np.concatenate([np.cumsum(counts[::-1])[::-1][1:], [0.0]])
    terms = digamma(alpha_prev + 1.0 + counts[:-1] + tail_counts[:-1]) - digamma(
        alpha_prev + tail_counts[:-1]
    )
    denom = float(terms.sum())
    if denom <= 0.0:
        raise FloatingPointError("nonpositive digamma sum in concentration update")
    low, high = config.alpha_clamp
    return float(min(max((k - 1) / denom, low), high))


def effective_components(model: DpmmModel, t_pi: float) -> list[int]:
    """Indices of components whose weight exceeds ``t_pi``, ascending."""
    if t_pi < 0.0:
        raise ValueError("t_pi must be nonnegative")
    weights = model.component_weights()
    if t_pi >= float(weights.max()):
        raise ValueError(f"t_pi={t_pi} would discard every component (max weight {weights.max()})")
    return [int(i) for i in np.flatnonzero(weights > t_pi)]


def _check_units(units: Sequence[EmbeddingBatch], what: str) -> None:
    dims = {u.dim for u in units}
    if len(dims) > 1:
        raise ValueError(f"{what} shards disagree on dimensionality: {sorted(dims)}")
    flags = {u.normalized for u in units}
    if len(flags) > 1:
        raise ValueError(f"{what} shards mix normalized and unnormalized rows")


def _concat(units: Sequence[EmbeddingBatch]) -> EmbeddingBatch:
    if len(units) == 1:
        return units[0]
    return EmbeddingBatch(
        np.concatenate([u.data for u in units], axis=0), normalized=units[0].normalized
    )


def _pack_batches(
    units: Sequence[EmbeddingBatch], order: np.ndarray, batch_vectors: int
) -> list[EmbeddingBatch]:
    batches: list[EmbeddingBatch] = []
    pending: list[EmbeddingBatch] = []
    rows = 0
    for idx in order:
        unit = units[idx]
        if unit.n == 0:
            continue
        pending.append(unit)
        rows += unit.n
        if rows >= batch_vectors:
            batches.append(_concat(pending))
            pending, rows = [], 0
    if pending:
        batches.append(_concat(pending))  # final short batch still trains
    return batches


def fit(
    train_shards: Sequence[EmbeddingBatch],
    val_shards: Sequence[EmbeddingBatch],
    config: FitConfig,
) -> tuple[DpmmModel, FitReport]:
    """Run batched EM and return the best validation snapshot.

    Each epoch shuffles the training units with a seeded generator, packs
    them image-by-image into batches of at least ``config.batch_vectors``
    rows (the trailing short batch is still used), and runs one EM update per
    batch. After every epoch the validation log likelihood is recorded; the
    returned model is the snapshot from the best epoch, earliest epoch
    winning ties. With ``epochs=0`` the initialized model is returned and the
    trace stays empty.
    """
    units = [u for u in train_shards if u.n > 0]
    if not units:
        raise ValueError("training set is empty")
    _check_units(units, "training")
    val_units = [v for v in val_shards if v.n > 0]
    if val_units:
        _check_units(val_units, "validation")
        if val_units[0].dim != units[0].dim:
            raise ValueError("validation dimensionality differs from training")

    full = config.full_batch_mode
    gamma = 1.0 if full else config.gamma
    batch_vectors = sum(u.n for u in units) if full else config.batch_vectors

    first = _pack_batches(units, np.arange(len(units)), batch_vectors)[0]
    model, stats = init_model(first, config)

    report = FitReport()
    if config.epochs == 0:
        report.final_effective = _count_effective(model)
        return model, report

    if not val_units:
        raise ValueError("validation shards are required to select an epoch (epochs > 0)")

    shuffle_rng = np.random.default_rng([config.seed, 1])
    best_ll = -math.inf
    best_model = model
    for epoch in range(config.epochs):
        started = time.perf_counter()
        order = shuffle_rng.permutation(len(units))
        for batch in _pack_batches(units, order, batch_vectors):
            resp = responsibilities(batch, model)
            stats = update_stats(stats, resp, batch, gamma)
            means, vars_, sticks = m_step(stats, model.alpha, config, prev_means=model.means)
            alpha = model.alpha if full else update_alpha(stats, model.alpha, config)
            model = DpmmModel(means, vars_, sticks, alpha, model.normalized_input)
        val_ll = sum(mixture_log_likelihood(v, model) for v in val_units)
        report.val_loglik.append(val_ll)
        report.effective_counts.append(_count_effective(model))
        report.epoch_seconds.append(time.perf_counter() - started)
        if val_ll > best_ll:
            best_ll = val_ll
            best_model = model
            report.best_epoch = epoch
    report.final_effective = _count_effective(best_model)
    return best_model, report


def _count_effective(model: DpmmModel, t_pi: float = 1e-6) -> int:
    return int(np.count_nonzero(model.component_weights() > t_pi))
