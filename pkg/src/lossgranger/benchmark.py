"""Synthetic covariate-shift benchmark.

Samples come from a multivariate normal with a constant mean ``alpha`` and an
equicorrelation covariance (unit diagonal, off-diagonal ``beta``). Classes are
equal-frequency shells of Mahalanobis distance from the mean. Two shifted
test sets are produced alongside: one with correlation ``beta + delta_beta``
and one with variances ``1 + kappa``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .data import Dataset, Standardizer
from .errors import GenerationError, InvalidArgumentError

CLAMP_MARGIN = 1e-3


@dataclass
class SyntheticShiftSpec:
    d: int = 20
    N: int = 5000
    alpha: float = 0.0
    beta: float = 0.0
    delta_beta: float = 0.0
    kappa: float = 0.5
    num_classes: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.d < 2:
            raise InvalidArgumentError("d must be >= 2")
        if self.N < 1 or self.num_classes < 1:
            raise InvalidArgumentError("N and num_classes must be positive")
        if self.num_classes > self.N:
            raise InvalidArgumentError("num_classes cannot exceed N")
        if self.kappa <= -1.0:
            raise InvalidArgumentError("kappa must keep variances positive")

    @property
    def effective_beta(self) -> float:
        return clamp_correlation(self.beta, self.d)

    @property
    def effective_shifted_beta(self) -> float:
        return clamp_correlation(self.beta + self.delta_beta, self.d)

    def realized(self) -> dict:
        """Spec fields plus the post-clamp correlations actually used."""
        out = asdict(self)
        out["effective_beta"] = self.effective_beta
        out["effective_shifted_beta"] = self.effective_shifted_beta
        return out


def sample_spec(
    seed: int,
    d: int | None = None,
    N: int = 5000,
    num_classes: int = 4,
) -> SyntheticShiftSpec:
    """Draw generator parameters from the benchmark ranges: d in [10, 50],
    alpha in [-2, 2], beta in [-1, 1], delta_beta in [-0.2, 0.2], kappa in
    [0.25, 0.75]. Passing ``d`` fixes the dimensionality."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EC]))
    d_drawn = int(rng.integers(10, 51))
    return SyntheticShiftSpec(
        d=d_drawn if d is None else d,
        N=N,
        alpha=float(rng.uniform(-2.0, 2.0)),
        beta=float(rng.uniform(-1.0, 1.0)),
        delta_beta=float(rng.uniform(-0.2, 0.2)),
        kappa=float(rng.uniform(0.25, 0.75)),
        num_classes=num_classes,
        seed=seed,
    )


def clamp_correlation(beta: float, d: int) -> float:
    """Clamp an equicorrelation into ``(-1/(d-1), 1)`` with a 1e-3 margin."""
    if d < 2:
        raise InvalidArgumentError("d must be >= 2")
    return min(max(float(beta), -1.0 / (d - 1) + CLAMP_MARGIN), 1.0 - CLAMP_MARGIN)


def equicorrelation_covariance(d: int, beta: float, variance: float = 1.0) -> np.ndarray:
    cov = np.full((d, d), float(beta))
    np.fill_diagonal(cov, variance)
    return cov


def quantile_label(samples: np.ndarray, mean: np.ndarray, covariance: np.ndarray, C: int) -> np.ndarray:
    """Equal-frequency shell labels by Mahalanobis distance (class 0 innermost).

    Samples are ordered by distance (stable, ties by row index) and the i-th
    sample in that order gets class ``floor(i * C / N)``.
    """
    samples = np.asarray(samples, dtype=np.float64)
    n = samples.shape[0]
    if C < 1:
        raise InvalidArgumentError("C must be >= 1")
    if C > n:
        raise InvalidArgumentError(f"C={C} exceeds the number of samples {n}")
    try:
        chol = np.linalg.cholesky(covariance)
    except np.linalg.LinAlgError as exc:
        raise GenerationError("covariance is not positive definite") from exc
    centered = (samples - mean).T
    whitened = np.linalg.solve(chol, centered)
    dist = np.sqrt((whitened**2).sum(axis=0))
    order = np.argsort(dist, kind="stable")
    labels = np.empty(n, dtype=np.int64)
    labels[order] = (np.arange(n) * C) // n
    return labels


def _draw(spec: SyntheticShiftSpec, cov: np.ndarray, rng: np.random.Generator) -> Dataset:
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise GenerationError("covariance is not positive definite after clamping") from exc
    mean = np.full(spec.d, spec.alpha)
    X = mean + rng.standard_normal((spec.N, spec.d)) @ chol.T
    y = quantile_label(X, mean, cov, spec.num_classes)
    return Dataset(X, y, [f"f{j}" for j in range(spec.d)], spec.num_classes)


def generate_triple(spec: SyntheticShiftSpec) -> tuple[Dataset, Dataset, Dataset]:
    """``(original, corr_shifted, var_shifted)`` drawn from ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    beta = spec.effective_beta
    original = _draw(spec, equicorrelation_covariance(spec.d, beta), rng)
    corr = _draw(spec, equicorrelation_covariance(spec.d, spec.effective_shifted_beta), rng)
    var = _draw(spec, equicorrelation_covariance(spec.d, beta, 1.0 + spec.kappa), rng)
    return original, corr, var


def population_standardizer(spec: SyntheticShiftSpec) -> Standardizer:
    """Standardizer from the original distribution's exact moments (mean alpha, unit variance).

    Applied unchanged to the shifted sets, so their shifts stay visible.
    """
    return Standardizer((float(spec.alpha),) * spec.d, (1.0,) * spec.d)


def standardize_triple(triple, spec: SyntheticShiftSpec):
    std = population_standardizer(spec)
    return tuple(std.transform(ds) for ds in triple)
