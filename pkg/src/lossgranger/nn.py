"""Dense-network core: forward/backward passes, dropout, cross-entropy, Adam and
Monte Carlo dropout loss intervals.

All arithmetic is float64. Weights are stored as ``(fan_in, fan_out)`` so a
batch ``X`` of shape ``(n, fan_in)`` maps to ``X @ W + b``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    InputShapeError,
    InvalidArgumentError,
    InvalidLabelError,
    NumericError,
    StaleTraceError,
)

ACTIVATIONS = ("relu", "identity")
DEFAULT_HIDDEN = (64, 64, 32, 16)

_tokens = itertools.count()


@dataclass(frozen=True)
class LayerSpec:
    fan_in: int
    fan_out: int
    activation: str = "relu"


@dataclass(eq=False)
class PredictiveModel:
    """The classifier being explained.

    Every hidden layer is followed by its activation and then (inverted)
    dropout at ``dropout_rate`` when a forward pass asks for it. The last
    layer produces the logits.
    """

    layer_specs: list[LayerSpec]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    dropout_rate: float = 0.0
    seed: int = 0
    version: int = field(default=0, compare=False)

    def __post_init__(self):
        self.token = next(_tokens)
        if not self.layer_specs:
            raise InvalidArgumentError("a model needs at least one layer")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise InvalidArgumentError("dropout_rate must lie in [0, 1)")
        for i, spec in enumerate(self.layer_specs):
            if spec.activation not in ACTIVATIONS:
                raise InvalidArgumentError(f"layer {i}: unknown activation {spec.activation!r}")
            if i and spec.fan_in != self.layer_specs[i - 1].fan_out:
                raise InvalidArgumentError(f"layer {i}: fan_in does not chain with layer {i - 1}")
            if self.weights[i].shape != (spec.fan_in, spec.fan_out):
                raise InvalidArgumentError(f"layer {i}: weight shape {self.weights[i].shape}")
            if self.biases[i].shape != (spec.fan_out,):
                raise InvalidArgumentError(f"layer {i}: bias shape {self.biases[i].shape}")
        check_finite_parameters(self.parameters(), self.parameter_names())

    @classmethod
    def create(
        cls,
        n_features: int,
        n_classes: int,
        hidden: Sequence[int] = DEFAULT_HIDDEN,
        dropout_rate: float = 0.0,
        seed: int = 0,
        rng: np.random.Generator | None = None,
    ) -> "PredictiveModel":
        """He-uniform initialised ReLU MLP; biases start at zero."""
        rng = np.random.default_rng(seed) if rng is None else rng
        sizes = [n_features, *hidden, n_classes]
        specs, weights, biases = [], [], []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            act = "identity" if i == len(sizes) - 2 else "relu"
            specs.append(LayerSpec(fan_in, fan_out, act))
            limit = np.sqrt(6.0 / fan_in)
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(specs, weights, biases, dropout_rate=dropout_rate, seed=seed)

    @property
    def n_features(self) -> int:
        return self.layer_specs[0].fan_in

    @property
    def n_classes(self) -> int:
        return self.layer_specs[-1].fan_out

    @property
    def n_hidden(self) -> int:
        return len(self.layer_specs) - 1

    @property
    def hidden_dims(self) -> list[int]:
        return [s.fan_out for s in self.layer_specs[:-1]]

    def parameters(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def parameter_names(self) -> list[str]:
        return [f"layer{i}.{k}" for i in range(len(self.weights)) for k in ("weight", "bias")]

    def copy(self) -> "PredictiveModel":
        return PredictiveModel(
            list(self.layer_specs),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.dropout_rate,
            self.seed,
        )


@dataclass
class ForwardTrace:
    logits: np.ndarray
    hidden_activations: list[np.ndarray]
    dropout_masks: list[np.ndarray | None]
    layer_inputs: list[np.ndarray] = field(repr=False)
    preactivations: list[np.ndarray] = field(repr=False)
    batched: bool = True
    model_token: tuple[int, int] = (-1, -1)


@dataclass
class ModelGradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    inputs: np.ndarray | None = None

    def flat(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]


def check_finite_parameters(params: Sequence[np.ndarray], names: Sequence[str]) -> None:
    for name, p in zip(names, params):
        if not np.isfinite(p).all():
            raise NumericError(f"non-finite values in {name}")


def _as_batch(x: np.ndarray, width: int, what: str) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == 2
    if x.ndim not in (1, 2) or x.shape[-1] != width:
        raise InputShapeError(f"{what}: expected trailing dimension {width}, got shape {x.shape}")
    return (x if batched else x[None, :]), batched


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    return np.maximum(z, 0.0) if activation == "relu" else z


def forward(
    model: PredictiveModel,
    x: np.ndarray,
    dropout_active: bool = False,
    rng: np.random.Generator | None = None,
) -> ForwardTrace:
    """Run ``x`` (one sample or a batch) through the model.

    Dropout masks are drawn hidden layer by hidden layer as
    ``rng.random(shape) >= dropout_rate``, only when ``dropout_active`` and the
    rate is positive. Hidden activations in the trace are post-dropout, i.e.
    exactly what the next layer consumed.
    """
    a, batched = _as_batch(x, model.n_features, "forward input")
    if not np.isfinite(a).all():
        raise NumericError("forward input contains NaN or Inf")
    use_dropout = dropout_active and model.dropout_rate > 0.0
    if use_dropout and rng is None:
        raise InvalidArgumentError("dropout_active forward pass needs an rng")
    keep_scale = 1.0 / (1.0 - model.dropout_rate)

    inputs, preacts, hidden, masks = [], [], [], []
    last = len(model.layer_specs) - 1
    for i, spec in enumerate(model.layer_specs):
        inputs.append(a)
        z = a @ model.weights[i] + model.biases[i]
        if not np.isfinite(z).all():
            raise NumericError(f"numeric overflow in layer {i} pre-activation")
        preacts.append(z)
        a = _activate(z, spec.activation)
        if i < last:
            if use_dropout:
                mask = rng.random(a.shape) >= model.dropout_rate
                a = a * mask * keep_scale
                masks.append(mask)
            else:
                masks.append(None)
            hidden.append(a)

    unbatch = (lambda v: v) if batched else (lambda v: v[0])
    return ForwardTrace(
        logits=unbatch(a),
        hidden_activations=[unbatch(h) for h in hidden],
        dropout_masks=[None if m is None else unbatch(m) for m in masks],
        layer_inputs=inputs,
        preactivations=preacts,
        batched=batched,
        model_token=(model.token, model.version),
    )


def backward(
    model: PredictiveModel,
    trace: ForwardTrace,
    grad_logits: np.ndarray,
    grad_hidden: Sequence[np.ndarray | None] | None = None,
) -> ModelGradients:
    """Backpropagate ``grad_logits`` plus optional gradients injected at hidden
    activations (``grad_hidden[l]`` is d(loss)/d(hidden_activations[l])).

    Gradients are summed over the batch.
    """
    if trace.model_token != (model.token, model.version):
        raise StaleTraceError("trace was produced by a different model or an older parameter version")
    g, _ = _as_batch(grad_logits, model.n_classes, "grad_logits")
    n = trace.layer_inputs[0].shape[0]
    if g.shape[0] != n:
        raise InputShapeError(f"grad_logits batch {g.shape[0]} != trace batch {n}")
    if grad_hidden is not None and len(grad_hidden) != model.n_hidden:
        raise InputShapeError(f"expected {model.n_hidden} hidden gradients, got {len(grad_hidden)}")

    keep_scale = 1.0 / (1.0 - model.dropout_rate) if model.dropout_rate > 0 else 1.0
    n_layers = len(model.layer_specs)
    dW = [None] * n_layers
    db = [None] * n_layers
    for i in reversed(range(n_layers)):
        spec = model.layer_specs[i]
        if i < n_layers - 1:
            if grad_hidden is not None and grad_hidden[i] is not None:
                gh, _ = _as_batch(grad_hidden[i], spec.fan_out, f"grad_hidden[{i}]")
                g = g + gh
            mask = trace.dropout_masks[i]
            if mask is not None:
                g = g * (mask if trace.batched else mask[None, :]) * keep_scale
        if spec.activation == "relu":
            g = g * (trace.preactivations[i] > 0.0)
        dW[i] = trace.layer_inputs[i].T @ g
        db[i] = g.sum(axis=0)
        g = g @ model.weights[i].T
    return ModelGradients(dW, db, g if trace.batched else g[0])


def log_softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    m = logits.max(axis=-1, keepdims=True)
    return logits - (m + np.log(np.exp(logits - m).sum(axis=-1, keepdims=True)))


def softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _check_labels(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if not np.issubdtype(labels.dtype, np.integer):
        raise InvalidLabelError(f"labels must be integer class ids, got {labels.dtype}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise InvalidLabelError(f"label out of range [0, {n_classes})")
    return labels


def cross_entropy(logits: np.ndarray, label):
    """``-log softmax(logits)[label]`` via log-sum-exp.

    A 1-d ``logits`` with a scalar label gives a float; a batch of logits with a
    label vector gives one loss per row.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = _check_labels(label, logits.shape[-1])
    if not np.isfinite(logits).all():
        raise NumericError("cross_entropy on non-finite logits")
    m = logits.max(axis=-1)
    lse = m + np.log(np.exp(logits - m[..., None]).sum(axis=-1))
    if logits.ndim == 1:
        return float(lse - logits[int(labels)])
    return lse - logits[np.arange(logits.shape[0]), labels]


def cross_entropy_grad(logits: np.ndarray, label) -> np.ndarray:
    """d cross_entropy / d logits, per row."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = _check_labels(label, logits.shape[-1])
    g = softmax(logits)
    if logits.ndim == 1:
        g[int(labels)] -= 1.0
    else:
        g[np.arange(logits.shape[0]), labels] -= 1.0
    return g


@dataclass
class AdamConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class Adam:
    def __init__(self, params: Sequence[np.ndarray], config: AdamConfig | None = None):
        self.config = config or AdamConfig()
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray], names=None) -> None:
        """Update ``params`` in place."""
        names = names or [f"param{i}" for i in range(len(params))]
        for name, g in zip(names, grads):
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for {name}")
        c = self.config
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * (g * g)
            p -= c.lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)
        check_finite_parameters(params, names)


def optimizer_step(model: PredictiveModel, gradients: ModelGradients, optimizer: Adam) -> PredictiveModel:
    optimizer.step(model.parameters(), gradients.flat(), model.parameter_names())
    model.version += 1
    return model


@dataclass
class PredictionInterval:
    mu: float
    sigma: float
    T: int
    mean_activations: list[np.ndarray]

    @property
    def lower(self) -> float:
        return self.mu - self.sigma

    @property
    def upper(self) -> float:
        return self.mu + self.sigma


@dataclass
class MCDropoutBatch:
    """T dropout passes over a batch: per-sample loss mean/std and averaged activations."""

    mu: np.ndarray
    sigma: np.ndarray
    losses: np.ndarray  # (T, n)
    mean_activations: list[np.ndarray]
    traces: list[ForwardTrace]


def mc_dropout_batch(
    model: PredictiveModel, X: np.ndarray, labels, T: int, rng: np.random.Generator
) -> MCDropoutBatch:
    if T < 1:
        raise InvalidArgumentError("T must be >= 1")
    X = np.asarray(X, dtype=np.float64)
    if model.dropout_rate == 0.0:
        # every pass is identical; one pass gives the exact statistics
        trace = forward(model, X)
        s = cross_entropy(trace.logits, labels)
        losses = np.broadcast_to(s, (T, *np.shape(s)))
        return MCDropoutBatch(s, np.zeros_like(s), losses, list(trace.hidden_activations), [trace])
    traces = [forward(model, X, dropout_active=True, rng=rng) for _ in range(T)]
    losses = np.stack([cross_entropy(t.logits, labels) for t in traces])
    if T == 1:
        mean_acts = list(traces[0].hidden_activations)
    else:
        mean_acts = [
            np.mean([t.hidden_activations[l] for t in traces], axis=0) for l in range(model.n_hidden)
        ]
    return MCDropoutBatch(losses.mean(axis=0), losses.std(axis=0), losses, mean_acts, traces)


def mc_dropout_interval(
    model: PredictiveModel, x: np.ndarray, label: int, T: int, rng: np.random.Generator
) -> PredictionInterval:
    """Loss interval ``mu +/- sigma`` from ``T`` dropout-active passes on one sample."""
    batch = mc_dropout_batch(model, x, label, T, rng)
    return PredictionInterval(
        mu=float(batch.mu), sigma=float(batch.sigma), T=T, mean_activations=batch.mean_activations
    )
