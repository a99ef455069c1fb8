"""Privacy attacks on regression models.

Membership inference with an RBF-kernel SVM over (loss, final-layer
gradient, last hidden activation) features; gradient-descent model
inversion; and backdoor attack accuracy.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import SplitDataset
from .nn import RegressionModel, backward, forward_batch, loss_grad, penultimate_grads
from .svm import smo


@dataclass(frozen=True)
class AttackFeatureVector:
    loss: float
    penultimate_grad: np.ndarray
    penultimate_act: np.ndarray

    def concat(self) -> np.ndarray:
        return np.concatenate([[self.loss], self.penultimate_grad, self.penultimate_act])


def rbf_kernel(a, b, gamma: float) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"vector shapes differ: {a.shape} vs {b.shape}")
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    d = a - b
    return float(np.exp(-gamma * np.dot(d, d)))


def rbf_matrix(A: np.ndarray, B: np.ndarray, gamma: float) -> np.ndarray:
    sq = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return np.exp(-gamma * np.maximum(sq, 0.0))


def feature_matrix(model: RegressionModel, X, y, kind: str = "mae") -> np.ndarray:
    """One attack feature row per sample: [loss, final-layer grads, last hidden activations]."""
    g, losses, hidden = penultimate_grads(model, X, y, kind)
    return np.hstack([np.atleast_1d(losses)[:, None], g, hidden])


def extract_features(model: RegressionModel, x, y: float, kind: str = "mae") -> AttackFeatureVector:
    row = feature_matrix(model, np.asarray(x, dtype=np.float64)[None, :], [y], kind)[0]
    h = (row.size - 2) // 2
    return AttackFeatureVector(float(row[0]), row[1:h + 2], row[h + 2:])


@dataclass
class AttackerModel:
    support_vectors: np.ndarray
    dual_coef: np.ndarray  # alpha_i * y_i
    bias: float
    gamma: float
    C: float
    mean: np.ndarray
    std: np.ndarray
    kept: np.ndarray  # feature mask; zero-variance columns are dropped

    def standardize(self, F) -> np.ndarray:
        F = np.atleast_2d(np.asarray(F, dtype=np.float64))
        return (F[:, self.kept] - self.mean) / self.std

    def decision(self, F) -> np.ndarray:
        Z = self.standardize(F)
        return rbf_matrix(Z, self.support_vectors, self.gamma) @ self.dual_coef + self.bias

    def predict_member(self, F) -> np.ndarray:
        return self.decision(F) >= 0


def train_attacker(member_features, nonmember_features, C: float = 1.0, gamma: float | None = None,
                   tol: float = 1e-3) -> AttackerModel:
    """Fit the member (+1) vs non-member (-1) RBF SVM on z-scored features."""
    M = np.atleast_2d(np.asarray(member_features, dtype=np.float64))
    N = np.atleast_2d(np.asarray(nonmember_features, dtype=np.float64))
    if M.shape[0] < 2 or N.shape[0] < 2:
        raise ValueError("need at least 2 examples per class")
    F = np.vstack([M, N])
    y = np.concatenate([np.ones(len(M)), -np.ones(len(N))])
    mean, std = F.mean(0), F.std(0)
    kept = std > 0
    Z = (F[:, kept] - mean[kept]) / std[kept]
    if gamma is None:
        dim = Z.shape[1]
        gamma = 1.0 / (dim * Z.var(0).mean()) if dim else 1.0
    K = rbf_matrix(Z, Z, gamma)
    res = smo(K, y, C=C, tol=tol)
    sv = res.alpha > 0
    return AttackerModel(Z[sv], (res.alpha * y)[sv], res.bias, float(gamma), C,
                         mean[kept], std[kept], kept)


def attack_probability(attacker: AttackerModel, forget_features) -> float:
    """Fraction of forget samples the attacker calls members."""
    F = np.asarray(forget_features, dtype=np.float64)
    if F.size == 0:
        raise ValueError("no forget features")
    return float(np.mean(attacker.predict_member(F)))


def membership_attack(model: RegressionModel, split: SplitDataset, kind: str = "mae",
                      max_per_class: int = 400, seed: int = 0, C: float = 1.0,
                      gamma: float | None = None) -> float:
    """Train on retain (members) vs the whole test set (non-members), score the forget set.

    Classes are balanced by seeded subsampling to at most ``max_per_class``.
    """
    rng = np.random.default_rng([int(seed), 81])
    test = split.test
    n = min(len(split.retain), len(test), max_per_class)
    mem = np.sort(rng.choice(len(split.retain), size=n, replace=False))
    non = np.sort(rng.choice(len(test), size=n, replace=False))
    member = feature_matrix(model, split.retain.X[mem], split.retain.y[mem], kind)
    nonmember = feature_matrix(model, test.X[non], test.y[non], kind)
    attacker = train_attacker(member, nonmember, C=C, gamma=gamma)
    return attack_probability(attacker, feature_matrix(model, split.forget.X, split.forget.y, kind))


# -- inversion ----------------------------------------------------------------

@dataclass(frozen=True)
class InversionConfig:
    steps: int = 500
    learning_rate: float = 0.1
    clamp: tuple[float, float] = (0.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


def invert_model(model: RegressionModel, target_label: float, config: InversionConfig = InversionConfig()):
    """Clamped gradient descent on the input to minimize (pred - target)^2.

    Returns the final input and the loss trajectory (initial loss first).
    """
    lo, hi = config.clamp
    rng = np.random.default_rng([int(config.seed), 91])
    x = rng.uniform(lo, hi, size=(1, model.spec.input_dim))
    losses = []
    for step in range(config.steps + 1):
        pred, trace = forward_batch(model, x, capture=True)
        losses.append(float((pred[0] - target_label) ** 2))
        if step == config.steps:
            break
        _, gx = backward(model, x, trace, loss_grad(pred, [target_label], "mse"), input_grad=True)
        x = np.clip(x - config.learning_rate * gx, lo, hi)
    return x[0], losses


def write_pgm(path, x, side: int | None = None) -> Path:
    """8-bit binary PGM of a flattened image in [0, 1]."""
    x = np.asarray(x, dtype=np.float64).ravel()
    side = side or int(round(np.sqrt(x.size)))
    if side * side != x.size:
        raise ValueError("input is not a square image")
    pixels = np.round(np.clip(x, 0.0, 1.0) * 255).astype(np.uint8)
    path = Path(path)
    path.write_bytes(f"P5\n{side} {side}\n255\n".encode("ascii") + pixels.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).astype(np.float64) / 255.0


# -- backdoor -----------------------------------------------------------------

@dataclass
class BackdoorReport:
    attack_accuracy: float
    tolerance: float
    n_patched: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def backdoor_attack_accuracy(model: RegressionModel, patched_inputs, target_label: float = 1.0,
                             tolerance: float = 0.5) -> BackdoorReport:
    X = np.asarray(patched_inputs, dtype=np.float64)
    if X.size == 0:
        raise ValueError("no patched inputs")
    pred, _ = forward_batch(model, X)
    hits = int(np.sum(np.abs(pred - target_label) <= tolerance))
    return BackdoorReport(hits / len(pred), tolerance, len(pred))
