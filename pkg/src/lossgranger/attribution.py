"""Masking-based Granger-causal feature importance.

For a sample ``x`` and feature ``j`` the importance is the increase in model
error when ``j`` is masked: ``error(x without j) - error(x)``. The error is
the loss estimator's output (no label needed) or, for the oracle, the true
cross-entropy.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ExplanationError, InputShapeError, InvalidArgumentError
from .estimator import LossEstimator, estimate_loss
from .nn import PredictiveModel, cross_entropy, forward

STRATEGY_KINDS = ("zero", "constant", "feature_mean")


@dataclass(frozen=True)
class MaskingStrategy:
    kind: str = "zero"
    value: float = 0.0
    means: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise InvalidArgumentError(f"unknown masking strategy {self.kind!r}")
        if self.kind == "feature_mean":
            if self.means is None or not np.isfinite(self.means).all():
                raise InvalidArgumentError("feature_mean strategy needs finite per-feature means")
        elif not np.isfinite(self.value):
            raise InvalidArgumentError("constant mask value must be finite")

    @classmethod
    def zero(cls) -> "MaskingStrategy":
        return cls("zero")

    @classmethod
    def constant(cls, value: float) -> "MaskingStrategy":
        return cls("constant", float(value))

    @classmethod
    def feature_mean(cls, reference: np.ndarray) -> "MaskingStrategy":
        """Per-feature means of a reference feature matrix (or a Dataset)."""
        features = getattr(reference, "features", reference)
        means = np.asarray(features, dtype=np.float64).mean(axis=0)
        return cls("feature_mean", means=tuple(float(m) for m in means))

    @classmethod
    def parse(cls, text: str, reference=None) -> "MaskingStrategy":
        """``zero``, ``constant:<value>`` or ``feature_mean``."""
        name, _, arg = text.partition(":")
        if name == "zero" and not arg:
            return cls.zero()
        if name == "constant":
            try:
                return cls.constant(float(arg))
            except ValueError:
                raise InvalidArgumentError(f"bad constant in strategy {text!r}") from None
        if name == "feature_mean" and not arg:
            if reference is None:
                raise InvalidArgumentError("feature_mean strategy needs reference data")
            return cls.feature_mean(reference)
        raise InvalidArgumentError(f"unknown masking strategy {text!r}")

    @property
    def label(self) -> str:
        if self.kind == "constant":
            return f"constant:{self.value!r}"
        return self.kind

    def replacement(self, d: int) -> np.ndarray:
        if self.kind == "feature_mean":
            if len(self.means) != d:
                raise InputShapeError(f"strategy has {len(self.means)} means for {d} features")
            return np.asarray(self.means, dtype=np.float64)
        return np.full(d, 0.0 if self.kind == "zero" else self.value)

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        if self.kind == "constant":
            out["value"] = self.value
        if self.kind == "feature_mean":
            out["means"] = list(self.means)
        return out


def mask_feature(x: np.ndarray, j: int, strategy: MaskingStrategy) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[-1]
    if not 0 <= j < d:
        raise IndexError(f"feature index {j} out of range for {d} features")
    out = x.copy()
    out[..., j] = strategy.replacement(d)[j]
    return out


def mask_features(x: np.ndarray, features: Sequence[int], strategy: MaskingStrategy) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = x.copy()
    idx = np.asarray(features, dtype=np.int64)
    if idx.size:
        out[..., idx] = strategy.replacement(x.shape[-1])[idx]
    return out


def rank_features(deltas: np.ndarray) -> np.ndarray:
    """Feature indices by delta descending, ties by ascending index."""
    deltas = np.asarray(deltas, dtype=np.float64)
    return np.lexsort((np.arange(deltas.size), -deltas))


@dataclass
class AttributionResult:
    sample_id: int
    base_estimate: float
    masked_estimates: np.ndarray
    deltas: np.ndarray
    ranking: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.ranking is None:
            self.ranking = rank_features(self.deltas)

    def to_dict(self) -> dict:
        return {
            "sample_id": int(self.sample_id),
            "base_estimate": float(self.base_estimate),
            "deltas": [float(v) for v in self.deltas],
            "ranking": [int(v) for v in self.ranking],
        }


def _masked_batch(x: np.ndarray, strategy: MaskingStrategy):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InputShapeError(f"expected a single sample, got shape {x.shape}")
    d = x.size
    repl = strategy.replacement(d)
    rows = np.repeat(x[None, :], d + 1, axis=0)
    rows[1 + np.arange(d), np.arange(d)] = repl
    unchanged = repl == x
    return rows, unchanged


def _scores(errors: np.ndarray, unchanged: np.ndarray, sample_id: int) -> AttributionResult:
    base = float(errors[0])
    masked = errors[1:].copy()
    # a masking that does not change x has exactly the unmasked error
    masked[unchanged] = base
    return AttributionResult(sample_id, base, masked, masked - base)


def granger_scores(
    model: PredictiveModel,
    estimator: LossEstimator,
    x: np.ndarray,
    strategy: MaskingStrategy,
    sample_id: int = 0,
) -> AttributionResult:
    """Estimated-loss importance of every feature of ``x``.

    Runs the unmasked sample and the ``d`` single-feature maskings as one
    batch of ``d + 1`` dropout-free forward passes.
    """
    rows, unchanged = _masked_batch(x, strategy)
    trace = forward(model, rows)
    return _scores(estimate_loss(estimator, trace.hidden_activations), unchanged, sample_id)


def oracle_granger_scores(
    model: PredictiveModel,
    x: np.ndarray,
    label: int,
    strategy: MaskingStrategy,
    sample_id: int = 0,
) -> AttributionResult:
    """Same as :func:`granger_scores` with the true cross-entropy as the error."""
    rows, unchanged = _masked_batch(x, strategy)
    trace = forward(model, rows)
    losses = cross_entropy(trace.logits, np.full(rows.shape[0], int(label)))
    return _scores(losses, unchanged, sample_id)


def map_samples(fn: Callable[[int], object], n: int, workers: int = 1) -> list:
    """Order-preserving map over sample indices; failures carry the sample index."""

    def call(i):
        try:
            return fn(i)
        except ExplanationError:
            raise
        except Exception as exc:
            raise ExplanationError(i, exc) from exc

    if workers <= 1 or n <= 1:
        return [call(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(call, range(n)))


def explain_batch(
    model: PredictiveModel,
    estimator: LossEstimator,
    samples: np.ndarray,
    strategy: MaskingStrategy,
    sample_ids: Sequence[int] | None = None,
    workers: int = 1,
) -> list[AttributionResult]:
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        return []
    samples = samples.reshape(-1, model.n_features)
    ids = list(range(len(samples))) if sample_ids is None else list(sample_ids)
    return map_samples(
        lambda i: granger_scores(model, estimator, samples[i], strategy, sample_id=ids[i]),
        len(samples),
        workers,
    )


def ranking_spearman(a: Sequence[int], b: Sequence[int]) -> float:
    """Spearman correlation of two tie-free rankings (permutations of range(d))."""
    a = np.asarray(a)
    b = np.asarray(b)
    d = a.size
    if d < 2:
        return 1.0
    pos_a = np.empty(d)
    pos_b = np.empty(d)
    pos_a[a] = np.arange(d)
    pos_b[b] = np.arange(d)
    return float(1.0 - 6.0 * ((pos_a - pos_b) ** 2).sum() / (d * (d * d - 1)))
