"""Unlearning methods: retrain oracle, FineTune, NegGrad, Amnesiac and Blindspot.

Every method takes the original model and a :class:`SplitDataset` and returns
an :class:`UnlearnOutcome` wrapping a new model; inputs are never mutated.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .data import (
    RegressionDataset,
    SplitDataset,
    SplitSpec,
    concat,
    fit_label_gaussian,
    split_sequence,
)
from .nn import (
    ModelSpec,
    RegressionModel,
    ShapeError,
    TrainConfig,
    backward,
    fit,
    forward_batch,
    init_model,
    loss,
    loss_grad,
    minibatches,
    optimizer_step,
    OptimizerState,
    train,
)

FINETUNE_DEFAULTS = TrainConfig(epochs=5, learning_rate=1e-3)
NEGGRAD_DEFAULTS = TrainConfig(epochs=1, learning_rate=1e-3)


@dataclass(frozen=True)
class BlindspotConfig:
    lam: float = 50.0
    attn_layers: int = 1
    blindspot_epochs: int = 2
    retain_fraction: float = 1.0
    unlearn_epochs: int = 1
    blindspot_lr: float = 0.01
    unlearn_lr: float = 1e-3
    batch_size: int = 32
    loss: str = "mae"
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.attn_layers < 1:
            raise ValueError("attn_layers must be >= 1")
        if not 0.0 <= self.retain_fraction <= 1.0:
            raise ValueError("retain_fraction must lie in [0, 1]")
        if self.blindspot_epochs < 1 or self.unlearn_epochs < 1:
            raise ValueError("blindspot and unlearn epochs must be >= 1")

    def blindspot_train_config(self) -> TrainConfig:
        return TrainConfig(self.blindspot_epochs, self.blindspot_lr, self.batch_size,
                           self.loss, self.optimizer, self.seed)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class AmnesiacConfig:
    distribution: str = "gaussian"
    fit_on: str = "all"
    uniform_range: tuple[float, float] = (1.0, 101.0)
    clamp: bool = False
    epochs: int = 1
    learning_rate: float = 1e-3
    batch_size: int = 32
    loss: str = "mae"
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "uniform_range", tuple(float(v) for v in self.uniform_range))
        if self.distribution not in ("gaussian", "uniform"):
            raise ValueError(f"unknown replacement distribution {self.distribution!r}")
        if self.fit_on not in ("all", "forget"):
            raise ValueError(f"fit_on must be 'all' or 'forget', got {self.fit_on!r}")
        lo, hi = self.uniform_range
        if self.distribution == "uniform" and not lo < hi:
            raise ValueError("uniform_range needs lo < hi")

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.learning_rate, self.batch_size,
                           self.loss, self.optimizer, self.seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["uniform_range"] = list(self.uniform_range)
        return d


@dataclass(frozen=True, eq=False)
class UnlearnOutcome:
    model: RegressionModel
    method: str
    config: dict
    wall_time_seconds: float
    aux: dict = field(default_factory=dict)


def _config_dict(config) -> dict:
    return config.to_dict() if hasattr(config, "to_dict") else dict(config)


def _require(ds: RegressionDataset, what: str):
    if len(ds) == 0:
        raise ValueError(f"{what} is empty")


# -- baselines ----------------------------------------------------------------

def retrain_oracle(spec: ModelSpec, split: SplitDataset, config: TrainConfig) -> RegressionModel:
    """Fresh model trained on the retain set only."""
    _require(split.retain, "retain set")
    return train(spec, split.retain, config)


def retrain(original: RegressionModel, split: SplitDataset, config: TrainConfig = TrainConfig()) -> UnlearnOutcome:
    t0 = time.perf_counter()
    model = retrain_oracle(original.spec, split, config)
    return UnlearnOutcome(model, "retrain", _config_dict(config), time.perf_counter() - t0)


def finetune(original: RegressionModel, split: SplitDataset, config: TrainConfig = FINETUNE_DEFAULTS) -> UnlearnOutcome:
    """Keep training a copy of the original on the retain set."""
    _require(split.retain, "retain set")
    t0 = time.perf_counter()
    model = fit(original, split.retain, config)
    return UnlearnOutcome(model, "finetune", _config_dict(config), time.perf_counter() - t0)


def neggrad(original: RegressionModel, split: SplitDataset, config: TrainConfig = NEGGRAD_DEFAULTS) -> UnlearnOutcome:
    """Gradient ascent on the forget-set loss."""
    _require(split.forget, "forget set")
    t0 = time.perf_counter()
    model = fit(original, split.forget, config, ascent=True)
    return UnlearnOutcome(model, "neggrad", _config_dict(config), time.perf_counter() - t0)


# -- amnesiac -----------------------------------------------------------------

def amnesiac_relabel(split: SplitDataset, config: AmnesiacConfig) -> RegressionDataset:
    """Retain set plus forget inputs carrying decoy labels, shuffled."""
    _require(split.forget, "forget set")
    rng = np.random.default_rng([int(config.seed), 51])
    train_labels = np.concatenate([split.retain.y, split.forget.y])
    n_f = len(split.forget)
    if config.distribution == "gaussian":
        pool = train_labels if config.fit_on == "all" else split.forget.y
        if pool.size < 2:
            # a single forget label still defines a degenerate gaussian
            pool = np.repeat(pool, 2)
        g = fit_label_gaussian(pool)
        decoys = g.mu + g.sigma * rng.standard_normal(n_f)
    else:
        lo, hi = config.uniform_range
        decoys = rng.uniform(lo, hi, size=n_f)
    if config.clamp:
        decoys = np.clip(decoys, train_labels.min(), train_labels.max())
    merged = concat([split.retain, split.forget.with_labels(decoys)])
    return merged.subset(rng.permutation(len(merged)))


def gaussian_amnesiac(original: RegressionModel, split: SplitDataset,
                      config: AmnesiacConfig = AmnesiacConfig()) -> UnlearnOutcome:
    """Fine-tune a copy of the original on the relabelled training set."""
    t0 = time.perf_counter()
    relabeled = amnesiac_relabel(split, config)
    model = fit(original, relabeled, config.train_config())
    name = "gaussian_amnesiac" if config.distribution == "gaussian" else "uniform_amnesiac"
    return UnlearnOutcome(model, name, _config_dict(config), time.perf_counter() - t0)


def uniform_amnesiac(original: RegressionModel, split: SplitDataset,
                     config: AmnesiacConfig = AmnesiacConfig(distribution="uniform")) -> UnlearnOutcome:
    if config.distribution != "uniform":
        config = AmnesiacConfig(**{**config.to_dict(), "distribution": "uniform"})
    return gaussian_amnesiac(original, split, config)


# -- blindspot ----------------------------------------------------------------

def train_blindspot(spec: ModelSpec, retain: RegressionDataset, config: BlindspotConfig) -> RegressionModel:
    """Briefly train a fresh model on a seeded fraction of the retain set."""
    n_sub = int(math.floor(config.retain_fraction * len(retain)))
    if n_sub < 1:
        raise ValueError(f"retain_fraction {config.retain_fraction} selects no retain samples")
    rng = np.random.default_rng([int(config.seed), 61])
    subset = retain.subset(np.sort(rng.choice(len(retain), size=n_sub, replace=False)))
    start = init_model(spec, config.seed, stream=60)
    return fit(start, subset, config.blindspot_train_config())


def _unit_rows(A: np.ndarray):
    norms = np.linalg.norm(A, axis=-1, keepdims=True)
    safe = np.where(norms > 0, norms, 1.0)
    return A / safe, norms


def attn_distance(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Row-wise ||A/|A| - B/|B|||_2 (an all-zero row is left unnormalized)."""
    if A.shape != B.shape:
        raise ShapeError(f"activation shapes differ: {A.shape} vs {B.shape}")
    a, _ = _unit_rows(A)
    b, _ = _unit_rows(B)
    return np.linalg.norm(a - b, axis=-1)


def attn_distance_grad(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """d attn_distance / dA, row-wise; zero where the distance or |A| is zero."""
    a, norms = _unit_rows(A)
    b, _ = _unit_rows(B)
    d = a - b
    r = np.linalg.norm(d, axis=-1, keepdims=True)
    u = np.where(r > 0, d / np.where(r > 0, r, 1.0), 0.0)
    g = (u - a * np.sum(a * u, axis=-1, keepdims=True)) / np.where(norms > 0, norms, 1.0)
    return np.where(norms > 0, g, 0.0)


def attn_layer_indices(n_layers: int, k: int) -> range:
    """Indices of the last ``k`` hidden layers (the head is excluded)."""
    n_hidden = n_layers - 1
    if not 1 <= k <= n_hidden:
        raise ValueError(f"k={k} outside 1..{n_hidden} hidden layers")
    return range(n_hidden - k, n_hidden)


def attn_loss(trace_phi, trace_theta, lam: float, k: int = 1) -> float:
    """lam times the summed normalized-activation distance over the last k hidden layers."""
    if len(trace_phi) != len(trace_theta):
        raise ShapeError("traces come from differently shaped models")
    total = 0.0
    for j in attn_layer_indices(len(trace_phi), k):
        a, b = np.asarray(trace_phi[j], dtype=np.float64), np.asarray(trace_theta[j], dtype=np.float64)
        total += float(attn_distance(a, b))
    return lam * total


def blindspot_step_loss(model_output, blindspot_output, label, trace_phi, trace_theta,
                        is_forget: bool, kind: str = "mae", lam: float = 50.0, k: int = 1) -> float:
    if not is_forget:
        return loss(model_output, label, kind)
    return loss(model_output, blindspot_output, kind) + attn_loss(trace_phi, trace_theta, lam, k)


def blindspot_batch(model: RegressionModel, blind: RegressionModel, X, y, is_forget,
                    kind: str, lam: float, k: int):
    """Mean combined loss over a mixed batch and its gradient w.r.t. the model params."""
    f = np.asarray(is_forget, dtype=bool)
    n = len(y)
    p, tr = forward_batch(model, X, capture=True)
    b, trb = forward_batch(blind, X, capture=True)
    per_sample = np.where(f, loss(p, b, kind), loss(p, y, kind))
    pred_grad = np.where(f, loss_grad(p, b, kind), loss_grad(p, y, kind)) / n
    act_grads = {}
    if lam > 0 and f.any():
        w = (lam * f / n)[:, None]
        for j in attn_layer_indices(model.spec.n_layers, k):
            per_sample = per_sample + lam * f * attn_distance(tr[j], trb[j])
            act_grads[j] = w * attn_distance_grad(tr[j], trb[j])
    g = backward(model, X, tr, pred_grad, act_grads)
    return float(per_sample.mean()), g


def blindspot_unlearn(original: RegressionModel, split: SplitDataset,
                      config: BlindspotConfig = BlindspotConfig(),
                      blindspot: RegressionModel | None = None) -> UnlearnOutcome:
    """Train (or reuse) the frozen blindspot helper, then descend the combined loss over D."""
    _require(split.retain, "retain set")
    _require(split.forget, "forget set")
    t0 = time.perf_counter()
    if blindspot is None:
        blindspot = train_blindspot(original.spec, split.retain, config)
    X = np.vstack([split.retain.X, split.forget.X])
    y = np.concatenate([split.retain.y, split.forget.y])
    f = np.concatenate([np.zeros(len(split.retain), bool), np.ones(len(split.forget), bool)])
    rng = np.random.default_rng([int(config.seed), 62])
    opt = OptimizerState(config.optimizer, config.unlearn_lr)
    params = np.array(original.params)
    current = original
    for _ in range(config.unlearn_epochs):
        for idx in minibatches(len(y), config.batch_size, rng):
            _, g = blindspot_batch(current, blindspot, X[idx], y[idx], f[idx],
                                   config.loss, config.lam, config.attn_layers)
            params = optimizer_step(opt, params, g)
            current = original.with_params(params)
    return UnlearnOutcome(current, "blindspot", config.to_dict(), time.perf_counter() - t0,
                          {"blindspot": blindspot})


# -- dispatch -----------------------------------------------------------------

METHODS = {
    "retrain": retrain,
    "finetune": finetune,
    "neggrad": neggrad,
    "gaussian_amnesiac": gaussian_amnesiac,
    "uniform_amnesiac": uniform_amnesiac,
    "blindspot": blindspot_unlearn,
}


def unlearn(method: str, original: RegressionModel, split: SplitDataset, config) -> UnlearnOutcome:
    try:
        fn = METHODS[method]
    except KeyError:
        raise ValueError(f"unknown unlearning method {method!r}") from None
    return fn(original, split, config)


def sequential_unlearn(original: RegressionModel, dataset: RegressionDataset, requests: Sequence[SplitSpec],
                       method: str, config) -> list[UnlearnOutcome]:
    """Chain one unlearning call per request, each starting from the previous result."""
    splits = split_sequence(dataset, requests)
    outcomes, current = [], original
    for s in splits:
        out = unlearn(method, current, s, config)
        outcomes.append(out)
        current = out.model
    return outcomes
