"""Auxiliary loss estimator and the joint training procedure.

The estimator reads hidden activations of the predictive model at a set of
taps, projects each through ``Linear -> ReLU`` to ``hidden_units`` values,
concatenates the projections and maps them linearly to a scalar loss estimate.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import spearmanr

from .data import Dataset, train_holdout_split
from .errors import InvalidArgumentError, NumericError, TapShapeError
from .nn import (
    DEFAULT_HIDDEN,
    Adam,
    AdamConfig,
    ModelGradients,
    PredictiveModel,
    check_finite_parameters,
    cross_entropy,
    cross_entropy_grad,
    forward,
    backward,
    mc_dropout_batch,
    optimizer_step,
)

log = logging.getLogger(__name__)

OBJECTIVES = ("contrastive", "dropout_calibration")
INDICATORS = ("signed", "literal")


@dataclass(eq=False)
class LossEstimator:
    taps: list[int]
    proj_weights: list[np.ndarray]
    proj_biases: list[np.ndarray]
    head_weight: np.ndarray
    head_bias: np.ndarray
    seed: int = 0

    def __post_init__(self):
        if not self.taps:
            raise InvalidArgumentError("loss estimator needs at least one tap")
        if len(self.proj_weights) != len(self.taps) or len(self.proj_biases) != len(self.taps):
            raise InvalidArgumentError("one projection per tap required")
        units = self.hidden_units
        for w, b in zip(self.proj_weights, self.proj_biases):
            if w.ndim != 2 or w.shape[1] != units or b.shape != (units,):
                raise InvalidArgumentError("projection shapes disagree on hidden_units")
        if self.head_weight.shape != (units * len(self.taps),) or self.head_bias.shape != (1,):
            raise InvalidArgumentError("head shape does not match concatenated projections")
        check_finite_parameters(self.parameters(), self.parameter_names())

    @classmethod
    def for_model(
        cls,
        model: PredictiveModel,
        taps: Sequence[int] | None = None,
        hidden_units: int = 16,
        seed: int = 0,
        rng: np.random.Generator | None = None,
    ) -> "LossEstimator":
        """Estimator bound to ``model``'s hidden layers; default taps are all of them."""
        taps = list(range(model.n_hidden)) if taps is None else [int(t) for t in taps]
        for t in taps:
            if not 0 <= t < model.n_hidden:
                raise TapShapeError(f"tap {t} is not a hidden layer (model has {model.n_hidden})")
        rng = np.random.default_rng(seed) if rng is None else rng
        dims = model.hidden_dims
        proj_w, proj_b = [], []
        for t in taps:
            limit = np.sqrt(6.0 / dims[t])
            proj_w.append(rng.uniform(-limit, limit, size=(dims[t], hidden_units)))
            proj_b.append(np.zeros(hidden_units))
        fan_in = hidden_units * len(taps)
        limit = np.sqrt(3.0 / fan_in)
        head_w = rng.uniform(-limit, limit, size=fan_in)
        return cls(taps, proj_w, proj_b, head_w, np.zeros(1), seed=seed)

    @property
    def hidden_units(self) -> int:
        return self.proj_weights[0].shape[1]

    @property
    def tap_dims(self) -> list[int]:
        return [w.shape[0] for w in self.proj_weights]

    def parameters(self) -> list[np.ndarray]:
        out = [p for pair in zip(self.proj_weights, self.proj_biases) for p in pair]
        return out + [self.head_weight, self.head_bias]

    def parameter_names(self) -> list[str]:
        names = [f"tap{t}.{k}" for t in self.taps for k in ("weight", "bias")]
        return names + ["head.weight", "head.bias"]

    def copy(self) -> "LossEstimator":
        return LossEstimator(
            list(self.taps),
            [w.copy() for w in self.proj_weights],
            [b.copy() for b in self.proj_biases],
            self.head_weight.copy(),
            self.head_bias.copy(),
            self.seed,
        )


@dataclass
class EstimatorCache:
    inputs: list[np.ndarray]
    preacts: list[np.ndarray]
    concat: np.ndarray
    n_hidden: int
    batched: bool


def _tap_inputs(estimator: LossEstimator, hidden_activations: Sequence[np.ndarray]):
    inputs, batched = [], None
    for t, dim in zip(estimator.taps, estimator.tap_dims):
        if t >= len(hidden_activations):
            raise TapShapeError(f"tap {t} missing: only {len(hidden_activations)} activations given")
        a = np.asarray(hidden_activations[t], dtype=np.float64)
        if a.ndim not in (1, 2) or a.shape[-1] != dim:
            raise TapShapeError(f"tap {t}: expected width {dim}, got shape {a.shape}")
        batched = a.ndim == 2 if batched is None else batched
        inputs.append(a if a.ndim == 2 else a[None, :])
    return inputs, batched


def estimate_loss_with_cache(estimator: LossEstimator, hidden_activations: Sequence[np.ndarray]):
    inputs, batched = _tap_inputs(estimator, hidden_activations)
    preacts = [a @ w + b for a, w, b in zip(inputs, estimator.proj_weights, estimator.proj_biases)]
    concat = np.concatenate([np.maximum(z, 0.0) for z in preacts], axis=1)
    s_hat = concat @ estimator.head_weight + estimator.head_bias[0]
    if not np.isfinite(s_hat).all():
        raise NumericError("loss estimate is not finite")
    cache = EstimatorCache(inputs, preacts, concat, len(hidden_activations), batched)
    return (s_hat if batched else float(s_hat[0])), cache


def estimate_loss(estimator: LossEstimator, hidden_activations: Sequence[np.ndarray]):
    """Loss estimate from the model's hidden activations (all layers, in order).

    Pass the ``hidden_activations`` list of a :class:`~lossgranger.nn.ForwardTrace`;
    the estimator picks its taps from it. Batched activations give one estimate
    per row.
    """
    return estimate_loss_with_cache(estimator, hidden_activations)[0]


def estimator_backward(estimator: LossEstimator, cache: EstimatorCache, grad_s_hat):
    """Returns ``(parameter_grads, grad_hidden)``.

    ``parameter_grads`` aligns with ``estimator.parameters()``; ``grad_hidden``
    has one entry per hidden layer of the model, ``None`` where not tapped.
    """
    g = np.atleast_1d(np.asarray(grad_s_hat, dtype=np.float64))
    d_head_w = cache.concat.T @ g
    d_head_b = np.array([g.sum()])
    d_concat = np.outer(g, estimator.head_weight)
    units = estimator.hidden_units
    grads, grad_hidden = [], [None] * cache.n_hidden
    for k, t in enumerate(estimator.taps):
        dz = d_concat[:, k * units : (k + 1) * units] * (cache.preacts[k] > 0.0)
        grads.append(cache.inputs[k].T @ dz)
        grads.append(dz.sum(axis=0))
        da = dz @ estimator.proj_weights[k].T
        da = da if cache.batched else da[0]
        grad_hidden[t] = da if grad_hidden[t] is None else grad_hidden[t] + da
    grads += [d_head_w, d_head_b]
    return grads, grad_hidden


def _pair_indicator(s_i, s_j, signed: bool) -> np.ndarray:
    greater = np.asarray(s_i) > np.asarray(s_j)
    if signed:
        return np.where(greater, 1.0, -1.0)
    return greater.astype(np.float64)


def contrastive_loss(s_i, s_j, s_hat_i, s_hat_j, gamma: float = 1.0, signed: bool = True) -> float:
    """Pairwise ranking hinge ``sum max(0, -I(s_i, s_j) * (s_hat_i - s_hat_j) + gamma)``.

    ``signed=True`` uses ``I = +1`` when ``s_i > s_j`` and ``-1`` otherwise;
    ``signed=False`` uses the 1/0 indicator, for which pairs with
    ``s_i <= s_j`` contribute a constant ``gamma``.
    """
    arrs = [np.atleast_1d(np.asarray(v, dtype=np.float64)) for v in (s_i, s_j, s_hat_i, s_hat_j)]
    if not all(np.isfinite(a).all() for a in arrs):
        raise NumericError("contrastive_loss on non-finite input")
    ind = _pair_indicator(arrs[0], arrs[1], signed)
    return float(np.maximum(0.0, -ind * (arrs[2] - arrs[3]) + gamma).sum())


def contrastive_loss_grad(s_i, s_j, s_hat_i, s_hat_j, gamma: float = 1.0, signed: bool = True):
    """Gradient of :func:`contrastive_loss` w.r.t. ``(s_hat_i, s_hat_j)``."""
    s_hat_i = np.atleast_1d(np.asarray(s_hat_i, dtype=np.float64))
    s_hat_j = np.atleast_1d(np.asarray(s_hat_j, dtype=np.float64))
    ind = _pair_indicator(s_i, s_j, signed)
    active = (-ind * (s_hat_i - s_hat_j) + gamma) > 0.0
    g_i = np.where(active, -ind, 0.0)
    return g_i, -g_i


def dropout_calibration_loss(s_hat, mu, sigma, xi: float = 0.0) -> float:
    """Interval hinge: ``max(0, s_hat - (mu+sigma) + xi) + max(0, (mu-sigma) - s_hat + xi)``,
    summed over samples."""
    s_hat, mu, sigma = (np.atleast_1d(np.asarray(v, dtype=np.float64)) for v in (s_hat, mu, sigma))
    if not (np.isfinite(s_hat).all() and np.isfinite(mu).all() and np.isfinite(sigma).all()):
        raise NumericError("dropout_calibration_loss on non-finite input")
    upper = np.maximum(0.0, s_hat - (mu + sigma) + xi)
    lower = np.maximum(0.0, (mu - sigma) - s_hat + xi)
    return float((upper + lower).sum())


def dropout_calibration_loss_grad(s_hat, mu, sigma, xi: float = 0.0) -> np.ndarray:
    s_hat, mu, sigma = (np.atleast_1d(np.asarray(v, dtype=np.float64)) for v in (s_hat, mu, sigma))
    g = np.where(s_hat - (mu + sigma) + xi > 0.0, 1.0, 0.0)
    return g - np.where((mu - sigma) - s_hat + xi > 0.0, 1.0, 0.0)


@dataclass
class JointTrainConfig:
    objective: str = "contrastive"
    gamma: float = 1.0
    xi: float = 0.0
    lambda_aux: float = 1.0
    T: int = 10
    lr: float = 0.001
    batch_size: int = 128
    epochs: int = 30
    seed: int = 0
    dropout_rate: float | None = None
    taps: list[int] | None = None
    hidden: list[int] = field(default_factory=lambda: list(DEFAULT_HIDDEN))
    estimator_units: int = 16
    indicator: str = "signed"
    contrastive_dropout: bool = False
    holdout_fraction: float = 0.1

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise InvalidArgumentError(f"objective must be one of {OBJECTIVES}")
        if self.indicator not in INDICATORS:
            raise InvalidArgumentError(f"indicator must be one of {INDICATORS}")
        if self.gamma < 0 or self.xi < 0:
            raise InvalidArgumentError("gamma and xi must be >= 0")
        if self.lambda_aux < 0:
            raise InvalidArgumentError("lambda_aux must be >= 0")
        if self.T < 1:
            raise InvalidArgumentError("T must be >= 1")
        if self.batch_size < 2 or self.epochs < 0 or self.lr <= 0:
            raise InvalidArgumentError("batch_size >= 2, epochs >= 0 and lr > 0 required")
        if self.objective == "contrastive" and self.batch_size % 2:
            raise InvalidArgumentError("contrastive training pairs samples: batch_size must be even")
        if self.dropout_rate is not None and not 0.0 <= self.dropout_rate < 1.0:
            raise InvalidArgumentError("dropout_rate must lie in [0, 1)")
        self.hidden = [int(h) for h in self.hidden]

    @property
    def resolved_dropout_rate(self) -> float:
        if self.dropout_rate is not None:
            return float(self.dropout_rate)
        return 0.1 if self.objective == "dropout_calibration" else 0.0

    def resolved(self) -> dict:
        out = asdict(self)
        out["dropout_rate"] = self.resolved_dropout_rate
        return out


def seed_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent generators derived from one seed.

    Child ``k`` of ``SeedSequence(seed)``: 0 model init, 1 estimator init,
    2 holdout split, 3 batch shuffling, 4 dropout masks, 5 evaluation.
    """
    names = ("model_init", "estimator_init", "split", "shuffle", "dropout", "eval")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(c) for n, c in zip(names, children)}


def build_pair(n_features: int, n_classes: int, config: JointTrainConfig):
    """Fresh ``(model, estimator)`` for ``config`` using the seed streams."""
    streams = seed_streams(config.seed)
    model = PredictiveModel.create(
        n_features,
        n_classes,
        config.hidden,
        dropout_rate=config.resolved_dropout_rate,
        seed=config.seed,
        rng=streams["model_init"],
    )
    estimator = LossEstimator.for_model(
        model, config.taps, config.estimator_units, seed=config.seed, rng=streams["estimator_init"]
    )
    return model, estimator


@dataclass
class StepTargets:
    """Loss targets captured for one step; constants for the auxiliary objective."""

    s: np.ndarray | None = None
    mu: np.ndarray | None = None
    sigma: np.ndarray | None = None


@dataclass
class StepResult:
    main_loss: float
    aux_loss: float
    model_grads: ModelGradients
    estimator_grads: list[np.ndarray]
    targets: StepTargets


def joint_step(
    model: PredictiveModel,
    estimator: LossEstimator,
    X: np.ndarray,
    y: np.ndarray,
    config: JointTrainConfig,
    rng: np.random.Generator,
    targets: StepTargets | None = None,
) -> StepResult:
    """Losses and gradients of ``L + lambda_aux * L_aux`` on one minibatch.

    ``L`` is the mean cross-entropy; ``L_aux`` the per-pair (contrastive) or
    per-sample (calibration) mean of the auxiliary objective. Loss targets are
    captured as constants; pass ``targets`` to pin them explicitly.
    """
    n = X.shape[0]
    lam = config.lambda_aux
    if config.objective == "contrastive":
        if n % 2:
            raise InvalidArgumentError("contrastive step needs an even batch")
        trace = forward(model, X, dropout_active=config.contrastive_dropout, rng=rng)
        s = cross_entropy(trace.logits, y)
        if targets is None:
            targets = StepTargets(s=s.copy())
        main = float(s.mean())
        s_hat, cache = estimate_loss_with_cache(estimator, trace.hidden_activations)
        h = n // 2
        ts = targets.s
        args = (ts[:h], ts[h:], s_hat[:h], s_hat[h:], config.gamma, config.indicator == "signed")
        aux = contrastive_loss(*args) / h
        g_i, g_j = contrastive_loss_grad(*args)
        grad_s_hat = np.concatenate([g_i, g_j]) / h
        est_grads, grad_hidden = estimator_backward(estimator, cache, grad_s_hat)
        grad_hidden = [None if g is None else lam * g for g in grad_hidden]
        model_grads = backward(model, trace, cross_entropy_grad(trace.logits, y) / n, grad_hidden)
    else:
        mc = mc_dropout_batch(model, X, y, config.T, rng)
        if targets is None:
            targets = StepTargets(mu=mc.mu.copy(), sigma=mc.sigma.copy())
        main = float(mc.mu.mean())
        s_hat, cache = estimate_loss_with_cache(estimator, mc.mean_activations)
        aux = dropout_calibration_loss(s_hat, targets.mu, targets.sigma, config.xi) / n
        grad_s_hat = dropout_calibration_loss_grad(s_hat, targets.mu, targets.sigma, config.xi) / n
        est_grads, grad_hidden = estimator_backward(estimator, cache, grad_s_hat)
        n_traces = len(mc.traces)
        grad_hidden = [None if g is None else lam * g / n_traces for g in grad_hidden]
        model_grads = None
        for tr in mc.traces:
            g_logits = cross_entropy_grad(tr.logits, y) / (n * n_traces)
            part = backward(model, tr, g_logits, grad_hidden)
            if model_grads is None:
                model_grads = part
            else:
                model_grads = ModelGradients(
                    [a + b for a, b in zip(model_grads.weights, part.weights)],
                    [a + b for a, b in zip(model_grads.biases, part.biases)],
                )
    est_grads = [lam * g for g in est_grads]
    return StepResult(main, aux, model_grads, est_grads, targets)


def holdout_spearman(model: PredictiveModel, estimator: LossEstimator, dataset: Dataset) -> float:
    """Spearman correlation between estimated and true loss (dropout off); 0 if undefined."""
    if dataset.n_samples < 2:
        return 0.0
    trace = forward(model, dataset.features)
    s = cross_entropy(trace.logits, dataset.labels)
    s_hat = estimate_loss(estimator, trace.hidden_activations)
    if np.ptp(s) == 0.0 or np.ptp(s_hat) == 0.0:
        return 0.0
    return float(spearmanr(s_hat, s).statistic)


@dataclass
class TrainResult:
    model: PredictiveModel
    estimator: LossEstimator
    history: list[dict]
    train_indices: np.ndarray
    holdout_indices: np.ndarray


def _batches(order: np.ndarray, batch_size: int, even: bool):
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        if even and len(idx) % 2:
            idx = idx[:-1]
        if len(idx) >= 2:
            yield idx


def joint_train(
    dataset: Dataset,
    model: PredictiveModel,
    estimator: LossEstimator,
    config: JointTrainConfig,
    holdout: Dataset | None = None,
) -> TrainResult:
    """Train model and estimator together with Adam.

    If ``holdout`` is not given, ``config.holdout_fraction`` of ``dataset`` is
    split off (seeded) and used only for the Spearman column of the history.
    History row 0 is the untrained state, evaluated without updates.
    """
    if dataset.n_features != model.n_features:
        raise InvalidArgumentError(
            f"dataset has {dataset.n_features} features, model expects {model.n_features}"
        )
    if dataset.n_classes > model.n_classes:
        raise InvalidArgumentError("dataset has more classes than the model outputs")
    for t, dim in zip(estimator.taps, estimator.tap_dims):
        if t >= model.n_hidden or model.hidden_dims[t] != dim:
            raise TapShapeError(f"estimator tap {t} does not match the model")

    streams = seed_streams(config.seed)
    if holdout is None:
        train_idx, hold_idx = train_holdout_split(
            dataset.n_samples, config.holdout_fraction, streams["split"]
        )
        train, holdout = dataset.subset(train_idx), dataset.subset(hold_idx)
    else:
        train_idx, hold_idx = np.arange(dataset.n_samples), np.arange(0)
        train = dataset
    X, y = train.features, train.labels
    even = config.objective == "contrastive"

    model_opt = Adam(model.parameters(), AdamConfig(lr=config.lr))
    est_opt = Adam(estimator.parameters(), AdamConfig(lr=config.lr))

    def run_epoch(epoch: int, order: np.ndarray, rng: np.random.Generator, update: bool) -> dict:
        mains, auxes = [], []
        for step, idx in enumerate(_batches(order, config.batch_size, even)):
            res = joint_step(model, estimator, X[idx], y[idx], config, rng)
            if not (np.isfinite(res.main_loss) and np.isfinite(res.aux_loss)):
                raise NumericError(f"non-finite loss at epoch {epoch}, step {step}")
            mains.append(res.main_loss)
            auxes.append(res.aux_loss)
            if update:
                try:
                    optimizer_step(model, res.model_grads, model_opt)
                    est_opt.step(
                        estimator.parameters(), res.estimator_grads, estimator.parameter_names()
                    )
                except NumericError as exc:
                    raise NumericError(f"epoch {epoch}, step {step}: {exc}") from exc
        return {
            "epoch": epoch,
            "loss": float(np.mean(mains)) if mains else float("nan"),
            "aux_loss": float(np.mean(auxes)) if auxes else float("nan"),
            "spearman": holdout_spearman(model, estimator, holdout),
        }

    history = [run_epoch(0, np.arange(len(y)), streams["eval"], update=False)]
    for epoch in range(1, config.epochs + 1):
        order = streams["shuffle"].permutation(len(y))
        history.append(run_epoch(epoch, order, streams["dropout"], update=True))
        log.debug("epoch %d: %s", epoch, history[-1])
    return TrainResult(model, estimator, history, train_idx, hold_idx)
