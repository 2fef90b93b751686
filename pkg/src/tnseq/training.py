"""Loss, gradients, optimisers and the early-stopped training loop."""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import Example
from .errors import ArgumentError, DegenerateStateError
from .evaluator import Model, Prepared, forward_batch, param_gradients

CLAMP = 1e-7
OPTIMIZERS = ("adamw", "spsa")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.01
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    optimizer: str = "adamw"
    spsa_c: float = 0.1
    spsa_alpha: float = 0.602
    spsa_gamma: float = 0.101
    spsa_stability: float = 0.0  # the "A" offset of the step-size schedule

    def __post_init__(self):
        checks = [
            (self.learning_rate > 0, "learning_rate must be > 0"),
            (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1, "betas must lie in [0, 1)"),
            (self.epsilon > 0, "epsilon must be > 0"),
            (self.weight_decay >= 0, "weight_decay must be >= 0"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.max_epochs >= 1, "max_epochs must be >= 1"),
            (self.patience >= 1, "patience must be >= 1"),
            (self.optimizer in OPTIMIZERS, f"optimizer must be one of {OPTIMIZERS}"),
            (self.spsa_c > 0, "spsa_c must be > 0"),
            (self.spsa_alpha >= 0 and self.spsa_gamma >= 0, "spsa exponents must be >= 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ArgumentError(msg)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class MetricsRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float
    wall_time: float

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- loss

def bce_loss(probs, labels) -> float:
    """Mean binary cross-entropy in bits.

    Each probability inside a log is floored at 1e-7, so a saturated wrong
    prediction costs at most log2(1e7) bits while an exact one costs nothing.
    """
    p1, labels = _loss_inputs(probs, labels)
    terms = labels * np.log2(np.maximum(p1, CLAMP)) + (1 - labels) * np.log2(np.maximum(1 - p1, CLAMP))
    return float(-np.mean(terms))


def _loss_inputs(probs, labels):
    probs = np.asarray(probs, dtype=np.float64).reshape(-1, 2)
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    if probs.shape[0] == 0:
        raise ArgumentError("empty batch")
    if probs.shape[0] != labels.shape[0]:
        raise ArgumentError(f"{probs.shape[0]} predictions for {labels.shape[0]} labels")
    return probs[:, 1], labels


def bce_grad(probs, labels) -> np.ndarray:
    """d(bce_loss)/d(probs); a floored term contributes nothing."""
    probs = np.asarray(probs, dtype=np.float64).reshape(-1, 2)
    p1, labels = _loss_inputs(probs, labels)
    with np.errstate(divide="ignore", invalid="ignore"):
        pos = np.where(p1 > CLAMP, labels / p1, 0.0)
        neg = np.where(1 - p1 > CLAMP, (1 - labels) / (1 - p1), 0.0)
    out = np.zeros_like(probs)
    out[:, 1] = -(pos - neg) / (len(labels) * math.log(2))
    return out


# ---------------------------------------------------------------- gradients

def _prepare_all(model: Model, batch: Sequence[Example]) -> list[Prepared]:
    return [model.prepare(ex.tokens, ex.tree) for ex in batch]


def _check_degenerate(res, offset=0):
    if res.degenerate.any():
        b = int(np.flatnonzero(res.degenerate)[0])
        raise DegenerateStateError(f"batch item {b + offset}: postselection annihilated the state "
                                   f"at box {int(res.bad_box[b])}", box=int(res.bad_box[b]), item=b + offset)


def loss_and_gradients(model: Model, batch: Sequence[Example],
                       prepared: Sequence[Prepared] | None = None) -> tuple[float, dict[str, np.ndarray]]:
    """Batch loss and its exact gradient for every stored parameter vector."""
    if not batch:
        raise ArgumentError("empty batch")
    prepared = prepared if prepared is not None else _prepare_all(model, batch)
    labels = np.array([ex.label for ex in batch])
    res = forward_batch(model, prepared, need_grad=True)
    _check_degenerate(res)
    loss = bce_loss(res.probs, labels)
    return loss, param_gradients(model, res.backward(bce_grad(res.probs, labels)))


def gradients(model: Model, batch: Sequence[Example]) -> dict[str, np.ndarray]:
    return loss_and_gradients(model, batch)[1]


def batch_loss(model: Model, batch: Sequence[Example], prepared: Sequence[Prepared] | None = None) -> float:
    prepared = prepared if prepared is not None else _prepare_all(model, batch)
    res = forward_batch(model, prepared)
    _check_degenerate(res)
    return bce_loss(res.probs, [ex.label for ex in batch])


# ---------------------------------------------------------------- optimisers

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_update(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
                 config: TrainConfig, step: int) -> tuple[dict[str, np.ndarray], AdamState]:
    """One AdamW step; decay is applied to the weights before the Adam move."""
    if step < 1:
        raise ArgumentError("step index starts at 1")
    lr, b1, b2 = config.learning_rate, config.beta1, config.beta2
    new_p, new_m, new_v = {}, {}, {}
    for k, theta in params.items():
        g = np.asarray(grads.get(k, np.zeros_like(theta)), dtype=np.float64)
        if g.shape != theta.shape:
            raise ArgumentError(f"gradient for {k!r} has shape {g.shape}, expected {theta.shape}")
        m = b1 * state.m.get(k, np.zeros_like(theta)) + (1 - b1) * g
        v = b2 * state.v.get(k, np.zeros_like(theta)) + (1 - b2) * g * g
        m_hat = m / (1 - b1**step)
        v_hat = v / (1 - b2**step)
        th = theta - lr * config.weight_decay * theta
        new_p[k] = th - lr * m_hat / (np.sqrt(v_hat) + config.epsilon)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(new_m, new_v)


def _flatten(params: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([params[k] for k in params]) if params else np.zeros(0)


def _unflatten(flat: np.ndarray, like: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    out, i = {}, 0
    for k, v in like.items():
        out[k] = flat[i : i + v.size].copy()
        i += v.size
    return out


def spsa_estimate(loss_fn: Callable[[np.ndarray], float], theta: np.ndarray, c: float,
                  rng: np.random.Generator) -> np.ndarray:
    """Two-sided simultaneous-perturbation gradient estimate with a Rademacher direction."""
    delta = rng.choice(np.array([-1.0, 1.0]), size=theta.shape)
    diff = loss_fn(theta + c * delta) - loss_fn(theta - c * delta)
    return diff / (2 * c) * delta


def spsa_gradient(model: Model, batch: Sequence[Example], iteration: int, seed: int,
                  config: TrainConfig | None = None,
                  prepared: Sequence[Prepared] | None = None) -> dict[str, np.ndarray]:
    """SPSA estimate at iteration ``iteration`` (0-based), deterministic in (iteration, seed)."""
    config = config or TrainConfig()
    prepared = prepared if prepared is not None else _prepare_all(model, batch)
    c_k = config.spsa_c / (iteration + 1) ** config.spsa_gamma
    rng = np.random.default_rng([seed, 2, iteration])

    def loss_fn(flat):
        return batch_loss(model.with_params(_unflatten(flat, model.params)), batch, prepared)

    return _unflatten(spsa_estimate(loss_fn, _flatten(model.params), c_k, rng), model.params)


def spsa_step_size(config: TrainConfig, iteration: int) -> float:
    return config.learning_rate / (iteration + 1 + config.spsa_stability) ** config.spsa_alpha


# ---------------------------------------------------------------- evaluation

@dataclass(frozen=True)
class EvalResult:
    accuracy: float
    loss: float
    n: int
    n_degenerate: int
    probs: np.ndarray  # (n, 2); NaN rows for degenerate items


def predict_probs(model: Model, dataset: Sequence[Example], batch_size: int = 256,
                  prepared: Sequence[Prepared] | None = None):
    """Born pairs and degenerate mask for every item, in dataset order."""
    prepared = prepared if prepared is not None else _prepare_all(model, dataset)
    probs, degenerate = [], []
    for i in range(0, len(prepared), batch_size):
        res = forward_batch(model, prepared[i : i + batch_size])
        probs.append(res.probs)
        degenerate.append(res.degenerate)
    return np.concatenate(probs), np.concatenate(degenerate)


def evaluate(model: Model, dataset: Sequence[Example], batch_size: int = 256,
             prepared: Sequence[Prepared] | None = None) -> EvalResult:
    """Accuracy with the p1 > 0.5 decision rule, and loss.

    Degenerate items count as misclassified and enter the loss as maximally
    wrong (clamped) predictions.
    """
    if not dataset:
        raise ArgumentError("empty dataset")
    probs, degenerate = predict_probs(model, dataset, batch_size, prepared)
    labels = np.array([ex.label for ex in dataset])
    pred = (probs[:, 1] > 0.5).astype(int)
    correct = (pred == labels) & ~degenerate
    loss_probs = probs.copy()
    loss_probs[degenerate, 1] = 1.0 - labels[degenerate]
    loss_probs[degenerate, 0] = labels[degenerate]
    return EvalResult(float(correct.mean()), bce_loss(loss_probs, labels), len(dataset),
                      int(degenerate.sum()), probs)


def evaluate_accuracy(model: Model, dataset: Sequence[Example]) -> float:
    return evaluate(model, dataset).accuracy


# ---------------------------------------------------------------- training loop

class EarlyStopping:
    """Tracks the best validation accuracy; earliest epoch wins ties."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, score: float) -> bool:
        """Record ``score``; returns True if it is a new best."""
        if score > self.best:
            self.best, self.best_epoch, self.bad_epochs = score, epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


@dataclass
class TrainResult:
    model: Model
    metrics: list[MetricsRecord]
    best_epoch: int

    def __iter__(self):  # allows ``best, metrics = train(...)``
        return iter((self.model, self.metrics))


def train(model: Model, train_set: Sequence[Example], val_set: Sequence[Example], config: TrainConfig,
          on_epoch: Callable[[MetricsRecord], None] | None = None) -> TrainResult:
    """Mini-batch training with early stopping on validation accuracy.

    Mini-batches are drawn from a permutation seeded by ``config.seed``; the
    returned model holds the parameters of the best validation epoch.
    """
    if not train_set or not val_set:
        raise ArgumentError("training and validation splits must be non-empty")
    prep_train = _prepare_all(model, train_set)
    prep_val = _prepare_all(model, val_set)
    rng = np.random.default_rng([config.seed, 1])
    params = {k: v.copy() for k, v in model.params.items()}
    adam = AdamState()
    stopper = EarlyStopping(config.patience)
    best_params = params
    metrics: list[MetricsRecord] = []
    step = 0
    t0 = time.perf_counter()
    for epoch in range(1, config.max_epochs + 1):
        perm = rng.permutation(len(train_set))
        for start in range(0, len(perm), config.batch_size):
            idx = perm[start : start + config.batch_size]
            batch = [train_set[i] for i in idx]
            prep = [prep_train[i] for i in idx]
            current = model.with_params(params)
            try:
                if config.optimizer == "adamw":
                    _, grads = loss_and_gradients(current, batch, prep)
                    params, adam = adamw_update(params, grads, adam, config, step + 1)
                else:
                    g = spsa_gradient(current, batch, step, config.seed, config, prep)
                    a_k = spsa_step_size(config, step)
                    params = {k: v - a_k * g[k] for k, v in params.items()}
            except DegenerateStateError as e:
                item = int(idx[e.item]) if e.item is not None else None
                raise DegenerateStateError(f"epoch {epoch}, training example {item}: {e}",
                                           box=e.box, item=item) from e
            step += 1
        current = model.with_params(params)
        tr = evaluate(current, train_set, prepared=prep_train)
        va = evaluate(current, val_set, prepared=prep_val)
        rec = MetricsRecord(epoch, tr.loss, tr.accuracy, va.loss, va.accuracy, time.perf_counter() - t0)
        metrics.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        if stopper.update(epoch, va.accuracy):
            best_params = {k: v.copy() for k, v in params.items()}
        if stopper.should_stop:
            break
    return TrainResult(model.with_params(best_params), metrics, stopper.best_epoch)
