"""Fidelity evaluation with the difference-in-log-odds score.

Mask the top ``k%`` ranked features of a sample and measure how much the
model's confidence in its originally predicted class drops, on the log-odds
scale. Larger is better.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .attribution import MaskingStrategy, map_samples, mask_features
from .errors import InvalidArgumentError, RankingError
from .estimator import LossEstimator, estimate_loss
from .nn import PredictiveModel, forward, softmax

PROB_CLAMP = 1e-7
REPORT_SCHEMA_VERSION = 1


def log_odds(p: float) -> float:
    p = min(max(float(p), PROB_CLAMP), 1.0 - PROB_CLAMP)
    return math.log(p) - math.log1p(-p)


def n_masked(k_percent: float, d: int) -> int:
    """Number of features masked at ``k_percent``: ``ceil(k * d / 100)``."""
    if not 0.0 <= k_percent <= 100.0:
        raise InvalidArgumentError("k_percent must lie in [0, 100]")
    # rounding first keeps e.g. 15 * 20 / 100 from landing a hair above 3
    return min(d, math.ceil(round(k_percent * d / 100.0, 9)))


def _check_ranking(ranking, d: int) -> np.ndarray:
    r = np.asarray(ranking)
    if r.shape != (d,) or not np.issubdtype(r.dtype, np.integer):
        raise RankingError(f"ranking must be {d} integer feature indices")
    if not np.array_equal(np.sort(r), np.arange(d)):
        raise RankingError("ranking is not a permutation of the feature indices")
    return r


def delta_log_odds(
    model: PredictiveModel,
    x: np.ndarray,
    ranking: Sequence[int],
    k_percent: float,
    strategy: MaskingStrategy | None = None,
) -> float:
    """``log-odds(p_ref) - log-odds(p_masked)`` for the argmax class of the unmasked input."""
    strategy = strategy or MaskingStrategy.zero()
    x = np.asarray(x, dtype=np.float64)
    d = model.n_features
    r = _check_ranking(ranking, d)
    top = r[: n_masked(k_percent, d)]
    x_masked = mask_features(x, top, strategy)
    p = softmax(forward(model, x).logits)
    c = int(np.argmax(p))
    if np.array_equal(x_masked, x):
        return 0.0
    p_masked = softmax(forward(model, x_masked).logits)[c]
    return log_odds(p[c]) - log_odds(p_masked)


@dataclass
class EvalReport:
    explainer: str
    k_percent: float
    strategy: str
    per_sample: list[tuple[int, float]] = field(default_factory=list)
    median: float = 0.0
    p25: float = 0.0
    p75: float = 0.0

    @classmethod
    def from_scores(cls, explainer, k_percent, strategy, sample_ids, scores) -> "EvalReport":
        scores = np.asarray(scores, dtype=np.float64)
        p25, median, p75 = np.percentile(scores, [25, 50, 75]) if scores.size else (0.0, 0.0, 0.0)
        return cls(
            explainer,
            float(k_percent),
            strategy,
            [(int(i), float(s)) for i, s in zip(sample_ids, scores)],
            float(median),
            float(p25),
            float(p75),
        )

    @property
    def scores(self) -> np.ndarray:
        return np.array([s for _, s in self.per_sample], dtype=np.float64)

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "explainer": self.explainer,
            "k_percent": self.k_percent,
            "strategy": self.strategy,
            "median": self.median,
            "p25": self.p25,
            "p75": self.p75,
            "n": len(self.per_sample),
            "per_sample": [{"sample_id": i, "delta_log_odds": s} for i, s in self.per_sample],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample_id", "delta_log_odds"])
        for i, s in self.per_sample:
            w.writerow([i, repr(s)])
        return buf.getvalue()


def evaluate_explainer(
    model: PredictiveModel,
    explainer: Callable[[int, np.ndarray], Sequence[int]],
    samples: np.ndarray,
    k_percent: float,
    strategy: MaskingStrategy | None = None,
    explainer_id: str = "explainer",
    sample_ids: Sequence[int] | None = None,
    workers: int = 1,
) -> EvalReport:
    """Score ``explainer(index, x) -> ranking`` over ``samples``.

    The strategy masks both the explanation input and the evaluation input.
    """
    strategy = strategy or MaskingStrategy.zero()
    samples = np.asarray(samples, dtype=np.float64).reshape(-1, model.n_features)
    if samples.shape[0] == 0:
        raise InvalidArgumentError("evaluate_explainer needs at least one sample")
    ids = list(range(len(samples))) if sample_ids is None else list(sample_ids)
    scores = map_samples(
        lambda i: delta_log_odds(model, samples[i], explainer(i, samples[i]), k_percent, strategy),
        len(samples),
        workers,
    )
    return EvalReport.from_scores(explainer_id, k_percent, strategy.label, ids, scores)


def random_ranking_baseline(d: int, seed) -> np.ndarray:
    """Uniformly random permutation of ``range(d)``; ``seed`` may be an int or a Generator."""
    if d < 1:
        raise InvalidArgumentError("d must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return rng.permutation(d)


def severity_sweep(
    model: PredictiveModel,
    estimator: LossEstimator,
    samples: np.ndarray,
    noise_levels: Sequence[float],
    seed: int = 0,
) -> list[tuple[float, float]]:
    """Mean loss estimate under additive Gaussian input noise of each std in ``noise_levels``.

    One standard-normal draw is shared across levels and scaled, so curves are
    comparable level to level.
    """
    levels = [float(v) for v in noise_levels]
    if not levels:
        raise InvalidArgumentError("noise_levels is empty")
    if any(v < 0 for v in levels):
        raise InvalidArgumentError("noise levels must be >= 0")
    if levels != sorted(levels) or levels[0] != 0.0:
        raise InvalidArgumentError("noise levels must be ascending and start at 0")
    X = np.asarray(samples, dtype=np.float64).reshape(-1, model.n_features)
    base_noise = np.random.default_rng(seed).standard_normal(X.shape)
    out = []
    for level in levels:
        Xn = X if level == 0.0 else X + level * base_noise
        s_hat = estimate_loss(estimator, forward(model, Xn).hidden_activations)
        out.append((level, float(np.mean(s_hat))))
    return out
