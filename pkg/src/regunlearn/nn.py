"""Dense MLP regression kernel with hand-written reverse-mode gradients.

Everything is float64 numpy. A model is an immutable (spec, flat params)
pair; training returns a new model rather than mutating the old one.
Layer weights are stored row-major with shape ``(input_dim, output_dim)`` so
that a batch ``X`` of shape ``(n, input_dim)`` maps to ``X @ W + b``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Iterator, Mapping, Sequence

import numpy as np

ACTIVATIONS = ("identity", "relu", "tanh")
LOSSES = ("mae", "mse")
OPTIMIZERS = ("sgd", "adam")


class ShapeError(ValueError):
    """Raised on dimension mismatches between tensors, specs and params."""


class UnsupportedArchitectureError(ValueError):
    pass


@dataclass(frozen=True)
class Layer:
    input_dim: int
    output_dim: int
    activation: str = "relu"

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError(f"layer dims must be positive, got {self.input_dim}x{self.output_dim}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_params(self) -> int:
        return self.input_dim * self.output_dim + self.output_dim


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple[Layer, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ValueError("a model needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.output_dim != b.input_dim:
                raise ShapeError(f"layer chain broken: {a.output_dim} -> {b.input_dim}")
        if self.layers[-1].output_dim != 1:
            raise ShapeError("final layer must have output_dim 1 (scalar regression)")

    @classmethod
    def mlp(cls, sizes: Sequence[int], activation: str = "relu") -> "ModelSpec":
        """``mlp([8, 32, 16, 1])``: hidden layers use ``activation``, the head is identity."""
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        layers = []
        for j, (i, o) in enumerate(zip(sizes, sizes[1:])):
            act = "identity" if j == len(sizes) - 2 else activation
            layers.append(Layer(int(i), int(o), act))
        return cls(tuple(layers))

    @property
    def input_dim(self) -> int:
        return self.layers[0].input_dim

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def n_params(self) -> int:
        return sum(layer.n_params for layer in self.layers)

    @cached_property
    def param_layout(self) -> list[tuple[int, int]]:
        """(weight offset, bias offset) per layer into the flat parameter vector."""
        out, off = [], 0
        for layer in self.layers:
            out.append((off, off + layer.input_dim * layer.output_dim))
            off += layer.n_params
        return out

    def to_dict(self) -> dict:
        return {
            "layers": [
                {"input_dim": l.input_dim, "output_dim": l.output_dim, "activation": l.activation}
                for l in self.layers
            ]
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        return cls(tuple(Layer(int(l["input_dim"]), int(l["output_dim"]), l["activation"]) for l in d["layers"]))


@dataclass(frozen=True, eq=False)
class RegressionModel:
    spec: ModelSpec
    params: np.ndarray

    def __post_init__(self):
        p = np.array(self.params, dtype=np.float64, copy=True).ravel()
        if p.size != self.spec.n_params:
            raise ShapeError(f"spec needs {self.spec.n_params} params, got {p.size}")
        p.flags.writeable = False
        object.__setattr__(self, "params", p)

    def layer_params(self, j: int) -> tuple[np.ndarray, np.ndarray]:
        layer = self.spec.layers[j]
        w_off, b_off = self.spec.param_layout[j]
        W = self.params[w_off:b_off].reshape(layer.input_dim, layer.output_dim)
        return W, self.params[b_off:b_off + layer.output_dim]

    def with_params(self, params: np.ndarray) -> "RegressionModel":
        return RegressionModel(self.spec, params)

    def predict(self, X) -> np.ndarray:
        return forward_batch(self, X)[0]

    def __eq__(self, other):
        if not isinstance(other, RegressionModel):
            return NotImplemented
        return self.spec == other.spec and np.array_equal(self.params, other.params)

    __hash__ = None


def init_model(spec: ModelSpec, seed: int, stream: int = 0) -> RegressionModel:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.

    ``stream`` separates independent initializations drawn from one seed.
    """
    rng = np.random.default_rng([int(seed), int(stream)])
    chunks = []
    for layer in spec.layers:
        bound = 1.0 / np.sqrt(layer.input_dim)
        chunks.append(rng.uniform(-bound, bound, size=layer.n_params))
    return RegressionModel(spec, np.concatenate(chunks))


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _activation_slope(a: np.ndarray, kind: str) -> np.ndarray | float:
    # expressed through the post-activation value
    if kind == "relu":
        return (a > 0).astype(np.float64)
    if kind == "tanh":
        return 1.0 - a * a
    return 1.0


def _as_batch(model: RegressionModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != model.spec.input_dim:
        raise ShapeError(f"expected inputs of width {model.spec.input_dim}, got shape {X.shape}")
    return X


def forward_batch(model: RegressionModel, X, capture: bool = False):
    """Predictions of shape (n,) and, if ``capture``, the per-layer post-activations."""
    h = _as_batch(model, X)
    trace = []
    for j, layer in enumerate(model.spec.layers):
        W, b = model.layer_params(j)
        h = _activate(h @ W + b, layer.activation)
        trace.append(h)
    return h[:, 0], (trace if capture else None)


def forward(model: RegressionModel, x, capture: bool = False):
    """Single-sample forward pass returning ``(prediction, trace or None)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"forward takes one input vector, got shape {x.shape}")
    pred, trace = forward_batch(model, x, capture=True)
    if not capture:
        return float(pred[0]), None
    return float(pred[0]), [a[0] for a in trace]


def loss(prediction, label, kind: str = "mae"):
    """Elementwise regression loss; scalars in, scalar out."""
    d = np.asarray(prediction, dtype=np.float64) - np.asarray(label, dtype=np.float64)
    if kind == "mae":
        out = np.abs(d)
    elif kind == "mse":
        out = d * d
    else:
        raise ValueError(f"unknown loss {kind!r}")
    return float(out) if out.ndim == 0 else out


def loss_grad(prediction, label, kind: str = "mae") -> np.ndarray:
    d = np.asarray(prediction, dtype=np.float64) - np.asarray(label, dtype=np.float64)
    if kind == "mae":
        return np.sign(d)
    if kind == "mse":
        return 2.0 * d
    raise ValueError(f"unknown loss {kind!r}")


def backward(model: RegressionModel, X, trace, pred_grad, act_grads=None, input_grad: bool = False):
    """Reverse pass through a captured forward pass.

    ``pred_grad`` is dL/d(prediction) per sample; ``act_grads`` optionally maps a
    layer index to extra dL/d(post-activation) injected at that layer. Returns
    the flat parameter gradient, plus dL/dX when ``input_grad`` is set.
    """
    X = _as_batch(model, X)
    spec = model.spec
    out = np.zeros(spec.n_params)
    delta = np.asarray(pred_grad, dtype=np.float64).reshape(-1, 1)
    for j in range(spec.n_layers - 1, -1, -1):
        layer = spec.layers[j]
        a = trace[j]
        if act_grads is not None and j in act_grads:
            delta = delta + act_grads[j]
        delta = delta * _activation_slope(a, layer.activation)
        inp = X if j == 0 else trace[j - 1]
        w_off, b_off = spec.param_layout[j]
        out[w_off:b_off] = (inp.T @ delta).ravel()
        out[b_off:b_off + layer.output_dim] = delta.sum(axis=0)
        if j > 0 or input_grad:
            W, _ = model.layer_params(j)
            delta = delta @ W.T
    if input_grad:
        return out, delta
    return out


def grad(model: RegressionModel, X, y, kind: str = "mae") -> np.ndarray:
    """Gradient of the mean batch loss with respect to the flat params."""
    X = _as_batch(model, X)
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    if y.shape != (X.shape[0],):
        raise ShapeError(f"{X.shape[0]} inputs but labels of shape {y.shape}")
    pred, trace = forward_batch(model, X, capture=True)
    return backward(model, X, trace, loss_grad(pred, y, kind) / X.shape[0])


def penultimate_grads(model: RegressionModel, X, y, kind: str = "mae"):
    """Per-sample gradients w.r.t. the final layer's (weights, bias).

    Returns ``(grads, losses, last_hidden)`` with ``grads`` of shape
    (n, hidden_dim + 1). The head is assumed affine up to its activation.
    """
    spec = model.spec
    if spec.n_layers < 2:
        raise UnsupportedArchitectureError("penultimate gradients need at least one hidden layer")
    X = _as_batch(model, X)
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    pred, trace = forward_batch(model, X, capture=True)
    head = spec.layers[-1]
    slope = np.broadcast_to(_activation_slope(trace[-1], head.activation), trace[-1].shape)[:, 0]
    dz = loss_grad(pred, y, kind) * slope
    hidden = trace[-2]
    grads = np.hstack([hidden * dz[:, None], dz[:, None]])
    return grads, loss(pred, y, kind), hidden


def per_sample_penultimate_grad(model: RegressionModel, x, y, kind: str = "mae") -> np.ndarray:
    g, _, _ = penultimate_grads(model, np.asarray(x, dtype=np.float64)[None, :], [y], kind)
    return g[0]


@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0

    def __post_init__(self):
        if self.kind not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")


def optimizer_step(state: OptimizerState, params: np.ndarray, gradient: np.ndarray) -> np.ndarray:
    """Return updated params; advances the moment estimates held in ``state``."""
    params = np.asarray(params, dtype=np.float64)
    gradient = np.asarray(gradient, dtype=np.float64)
    if params.shape != gradient.shape:
        raise ShapeError(f"params {params.shape} vs gradient {gradient.shape}")
    state.t += 1
    if state.kind == "sgd":
        return params - state.learning_rate * gradient
    if state.m is None:
        state.m = np.zeros_like(params)
        state.v = np.zeros_like(params)
    state.m = state.beta1 * state.m + (1 - state.beta1) * gradient
    state.v = state.beta2 * state.v + (1 - state.beta2) * gradient * gradient
    m_hat = state.m / (1 - state.beta1 ** state.t)
    v_hat = state.v / (1 - state.beta2 ** state.t)
    return params - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 0.01
    batch_size: int = 32
    loss: str = "mae"
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        if int(self.epochs) < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if int(self.batch_size) < 1:
            raise ValueError("batch size must be >= 1")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def new_optimizer(self) -> OptimizerState:
        return OptimizerState(self.optimizer, self.learning_rate)

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "loss": self.loss,
            "optimizer": self.optimizer,
            "seed": self.seed,
        }


def minibatches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def as_arrays(data):
    """Accept a dataset-like object with ``X``/``y`` or an ``(X, y)`` pair."""
    if hasattr(data, "X") and hasattr(data, "y"):
        X, y = data.X, data.y
    else:
        X, y = data
    return np.asarray(X, dtype=np.float64), np.asarray(y, dtype=np.float64)


def fit(model: RegressionModel, data, config: TrainConfig, ascent: bool = False) -> RegressionModel:
    """Continue mini-batch training from ``model``; ``ascent`` flips the update sign."""
    X, y = as_arrays(data)
    if X.shape[0] == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng([int(config.seed), 1])
    opt = config.new_optimizer()
    params = np.array(model.params)
    sign = -1.0 if ascent else 1.0
    current = model
    for _ in range(config.epochs):
        for idx in minibatches(X.shape[0], config.batch_size, rng):
            g = grad(current, X[idx], y[idx], config.loss)
            params = optimizer_step(opt, params, sign * g)
            current = model.with_params(params)
    return current


def train(spec: ModelSpec, data, config: TrainConfig) -> RegressionModel:
    """Fresh seeded init followed by ``config.epochs`` epochs of training."""
    return fit(init_model(spec, config.seed), data, config)
