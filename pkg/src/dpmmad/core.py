"""Mixture-model domain types and the pure math shared by fitting and scoring.

Everything here is a pure function over immutable inputs. Densities are
evaluated in log space throughout: with many components the mixture is
typically dominated by a single term, which makes linear-space arithmetic
underflow long before it becomes inaccurate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

VAR_FLOOR = 1e-6

LOG_2PI = float(np.log(2.0 * np.pi))


def _as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


@dataclass(frozen=True)
class EmbeddingBatch:
    """A batch of embedding vectors, one per row.

    Parameters
    ----------
    data : (N, D) float array
        Embedding vectors. Stored as float64; 32-bit inputs are widened.
    normalized : bool
        Whether every row has unit L2 norm. Checked on construction.
    """

    data: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        data = _as_f64(self.data)
        if data.ndim != 2:
            raise ValueError(f"embedding batch must be 2-D, got shape {data.shape}")
        object.__setattr__(self, "data", data)
        if self.normalized and data.shape[0] > 0:
            norms = np.linalg.norm(data, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-6):
                raise ValueError("batch claims normalized rows but row norms deviate from 1")

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class DpmmModel:
    """Truncated Dirichlet-process mixture with diagonal Gaussian components.

    Parameters
    ----------
    means : (K, D) array
        Component means.
    vars : (K, D) array
        Diagonal covariance entries, all strictly positive.
    sticks : (K,) array
        Stick-breaking fractions in (0, 1]; the last entry must be exactly 1
        so the derived weights sum to 1.
    alpha : float
        Concentration parameter, strictly positive.
    normalized_input : bool
        True when the model was fit on row-normalized embeddings. Scoring
        enforces the same preprocessing at test time.
    """

    means: np.ndarray
    vars: np.ndarray
    sticks: np.ndarray
    alpha: float
    normalized_input: bool = False

    def __post_init__(self):
        means = _as_f64(self.means)
        vars_ = _as_f64(self.vars)
        sticks = _as_f64(self.sticks)
        if means.ndim != 2 or means.shape != vars_.shape:
            raise ValueError(f"means/vars must share a (K, D) shape, got {means.shape} and {vars_.shape}")
        if sticks.shape != (means.shape[0],):
            raise ValueError(f"sticks must have length K={means.shape[0]}, got {sticks.shape}")
        if means.shape[0] < 1 or means.shape[1] < 1:
            raise ValueError("model needs K >= 1 and D >= 1")
        if not np.all(np.isfinite(means)) or not np.all(np.isfinite(vars_)):
            raise ValueError("means/vars must be finite")
        if np.any(vars_ <= 0.0):
            raise ValueError("all variance entries must be strictly positive")
        _check_sticks(sticks)
        if not (np.isfinite(self.alpha) and self.alpha > 0.0):
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "vars", vars_)
        object.__setattr__(self, "sticks", sticks)
        object.__setattr__(self, "alpha", float(self.alpha))

    @property
    def k(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def component_weights(self) -> np.ndarray:
        """Mixture weights derived from the stick fractions."""
        return stick_breaking_weights(self.sticks)


@dataclass(frozen=True)
class SufficientStats:
    """Moving averages of the per-component sufficient statistics.

    ``p_bar`` is the smoothed responsibility mass (a simplex over components),
    ``m_bar`` the responsibility-weighted first moment and ``c_bar`` the
    responsibility-weighted second moment, diagonal only. ``batch_size`` is
    the row count of the most recent batch, used to put the concentration
    update on a count scale.
    """

    p_bar: np.ndarray
    m_bar: np.ndarray
    c_bar: np.ndarray
    batch_size: int

    def __post_init__(self):
        p = _as_f64(self.p_bar)
        m = _as_f64(self.m_bar)
        c = _as_f64(self.c_bar)
        if p.ndim != 1 or m.ndim != 2 or m.shape != c.shape or m.shape[0] != p.shape[0]:
            raise ValueError("inconsistent sufficient-statistic shapes")
        if np.any(p < 0.0):
            raise ValueError("p_bar entries must be nonnegative")
        if abs(float(p.sum()) - 1.0) > 1e-6:
            raise ValueError(f"p_bar must sum to 1, got {float(p.sum())!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        object.__setattr__(self, "p_bar", p)
        object.__setattr__(self, "m_bar", m)
        object.__setattr__(self, "c_bar", c)
        object.__setattr__(self, "batch_size", int(self.batch_size))

    @property
    def k(self) -> int:
        return self.p_bar.shape[0]

    @property
    def dim(self) -> int:
        return self.m_bar.shape[1]


@dataclass(frozen=True)
class SyntheticSpec:
    """Ground-truth mixture used to generate test data with known labels."""

    true_means: np.ndarray
    true_vars: np.ndarray
    true_weights: np.ndarray
    count: int
    seed: int = 0

    def __post_init__(self):
        means = _as_f64(self.true_means)
        vars_ = _as_f64(self.true_vars)
        weights = _as_f64(self.true_weights)
        if means.ndim != 2 or means.shape != vars_.shape:
            raise ValueError("true_means/true_vars must share a (M, D) shape")
        if weights.shape != (means.shape[0],):
            raise ValueError("true_weights must have one entry per component")
        if np.any(vars_ <= 0.0):
            raise ValueError("true_vars must be strictly positive")
        if np.any(weights < 0.0) or abs(float(weights.sum()) - 1.0) > 1e-12:
            raise ValueError("true_weights must be a simplex")
        if self.count < 1:
            raise ValueError("count must be positive")
        object.__setattr__(self, "true_means", means)
        object.__setattr__(self, "true_vars", vars_)
        object.__setattr__(self, "true_weights", weights)


def _check_sticks(sticks: np.ndarray) -> None:
    if sticks.ndim != 1 or sticks.shape[0] < 1:
        raise ValueError("sticks must be a nonempty 1-D vector")
    if np.any(sticks <= 0.0) or np.any(sticks > 1.0):
        raise ValueError("stick fractions must lie in (0, 1]")
    if sticks[-1] != 1.0:
        raise ValueError("last stick fraction must be exactly 1")


def stick_breaking_weights(sticks: np.ndarray) -> np.ndarray:
    """Turn stick fractions into mixture weights.

    The first component takes ``v[0]`` of the mass and each later component
    takes its fraction of whatever the earlier ones left; the final fraction
    is pinned to 1 so the remainder is absorbed and the weights form a
    simplex.

    Parameters
    ----------
    sticks : (K,) array
        Fractions in (0, 1] with the last entry exactly 1.

    Returns
    -------
    (K,) array
        Nonnegative weights summing to 1.
    """
    sticks = _as_f64(sticks)
    _check_sticks(sticks)
    weights = sticks.copy()
    weights[1:] *= np.cumprod(1.0 - sticks[:-1])
    return weights


def diag_gaussian_logpdf(y, mean, var) -> float:
    """Log density of a diagonal-covariance Gaussian at ``y``.

    All three arguments are length-D vectors; ``var`` holds the covariance
    diagonal and must be strictly positive.
    """
    y = np.atleast_1d(_as_f64(y))
    mean = np.atleast_1d(_as_f64(mean))
    var = np.atleast_1d(_as_f64(var))
    if y.shape != mean.shape or y.shape != var.shape:
        raise ValueError("y, mean and var must share a shape")
    if np.any(var <= 0.0):
        raise ValueError("variance entries must be strictly positive")
    return float(-0.5 * np.sum(np.log(2.0 * np.pi * var) + (y - mean) ** 2 / var))


def component_log_densities(data: np.ndarray, means: np.ndarray, vars_: np.ndarray) -> np.ndarray:
    """Per-component diagonal-Gaussian log densities for a whole batch.

    Returns an (N, K) matrix; row n, column k is log N(data[n] | means[k],
    diag(vars[k])). Evaluated with two matrix products rather than an
    explicit (N, K, D) intermediate.
    """
    data = _as_f64(data)
    inv = 1.0 / vars_
    const = np.sum(np.log(vars_), axis=1) + means.shape[1] * LOG_2PI  # (K,)
    quad = (data**2) @ inv.T - 2.0 * (data @ (means * inv).T) + np.sum(means**2 * inv, axis=1)
    return -0.5 * (const + quad)


def _posterior_log_weights(batch: EmbeddingBatch, model: DpmmModel) -> np.ndarray:
    if batch.dim != model.dim:
        raise ValueError(f"dimension mismatch: batch D={batch.dim}, model D={model.dim}")
    weights = model.component_weights()
    log_dens = component_log_densities(batch.data, model.means, model.vars)
    with np.errstate(divide="ignore"):  # zero weights legitimately map to -inf
        return log_dens + np.log(weights)


def responsibilities(batch: EmbeddingBatch, model: DpmmModel) -> np.ndarray:
    """Posterior component-assignment probabilities for every batch row.

    Computed in log space with per-row max subtraction; components with zero
    mixture weight get responsibility exactly 0 and every row sums to 1.
    """
    log_w = _posterior_log_weights(batch, model)
    if batch.n == 0:
        return np.zeros((0, model.k))
    row_max = np.max(log_w, axis=1, keepdims=True)
    if not np.all(np.isfinite(row_max)):
        raise FloatingPointError("all component densities vanished for some row")
    resp = np.exp(log_w - row_max)
    resp /= np.sum(resp, axis=1, keepdims=True)
    return resp


def mixture_log_likelihood(batch: EmbeddingBatch, model: DpmmModel) -> float:
    """Total log likelihood of a batch under the mixture (0.0 for an empty batch)."""
    if batch.dim != model.dim:
        raise ValueError(f"dimension mismatch: batch D={batch.dim}, model D={model.dim}")
    if batch.n == 0:
        return 0.0
    log_w = _posterior_log_weights(batch, model)
    row_max = np.max(log_w, axis=1, keepdims=True)
    if not np.all(np.isfinite(row_max)):
        raise FloatingPointError("all component densities vanished for some row")
    return float(np.sum(np.log(np.sum(np.exp(log_w - row_max), axis=1)) + row_max[:, 0]))


def sample_synthetic(spec: SyntheticSpec) -> tuple[EmbeddingBatch, np.ndarray]:
    """Draw labeled points from a known diagonal-Gaussian mixture.

    Deterministic for a fixed seed. Returns the batch together with the
    ground-truth component label of every row.
    """
    rng = np.random.default_rng(spec.seed)
    labels = rng.choice(spec.true_means.shape[0], size=spec.count, p=spec.true_weights)
    noise = rng.standard_normal((spec.count, spec.true_means.shape[1]))
    data = spec.true_means[labels] + noise * np.sqrt(spec.true_vars[labels])
    return EmbeddingBatch(data), labels
