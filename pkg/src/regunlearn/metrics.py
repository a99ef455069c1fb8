"""Unlearning-quality metrics.

Retain/forget error, the empirical 1-D Wasserstein-1 distance, prediction
differences for density plots, relearn time and the Anamnesis Index (AIN).
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import RegressionDataset, SplitDataset
from .nn import RegressionModel, TrainConfig, as_arrays, forward_batch, grad, loss, minibatches, optimizer_step


class UndefinedAINError(ValueError):
    """AIN with a zero relearn time for the retrained model."""


@dataclass
class EvaluationReport:
    err_Dtr: float
    err_Dtf: float
    att_prob: float | None = None
    w_dist: float = 0.0
    ain: float | None = None
    wall_time_seconds: float = 0.0

    def __post_init__(self):
        for name in ("err_Dtr", "err_Dtf", "w_dist"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")
        if self.att_prob is not None and not 0.0 <= self.att_prob <= 1.0:
            raise ValueError(f"att_prob {self.att_prob} outside [0, 1]")
        if self.ain is not None and (not math.isfinite(self.ain) or self.ain < 0):
            raise ValueError(f"bad AIN {self.ain}")

    def metrics_dict(self) -> dict:
        """Deterministic fields only (no timing)."""
        d = asdict(self)
        d.pop("wall_time_seconds")
        return d

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvaluationReport":
        return cls(**{k: d[k] for k in ("err_Dtr", "err_Dtf", "att_prob", "w_dist", "ain") if k in d},
                   wall_time_seconds=d.get("wall_time_seconds", 0.0))


def error_on(model: RegressionModel, samples, kind: str = "mae") -> float:
    """Mean per-sample loss."""
    X, y = as_arrays(samples)
    if y.size == 0:
        raise ValueError("cannot evaluate error on an empty set")
    pred, _ = forward_batch(model, X)
    return float(np.mean(loss(pred, y, kind)))


def w1_distance(samples_p: Sequence[float], samples_q: Sequence[float]) -> float:
    """Exact W1 between two empirical distributions: integral of |F_p - F_q|."""
    p = np.sort(np.asarray(samples_p, dtype=np.float64).ravel())
    q = np.sort(np.asarray(samples_q, dtype=np.float64).ravel())
    if p.size == 0 or q.size == 0:
        raise ValueError("W1 needs two non-empty samples")
    support = np.sort(np.concatenate([p, q]))
    widths = np.diff(support)
    cdf_p = np.searchsorted(p, support[:-1], side="right") / p.size
    cdf_q = np.searchsorted(q, support[:-1], side="right") / q.size
    return float(np.sum(np.abs(cdf_p - cdf_q) * widths))


@dataclass
class PredictionDiffs:
    values: np.ndarray
    method: str = ""

    def to_csv(self) -> str:
        return values_csv(self.values, self.method or "diff")


def values_csv(values, header: str) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([header])
    for v in values:
        w.writerow([format(float(v), ".17g")])
    return buf.getvalue()


def prediction_diffs(model_a: RegressionModel, model_b: RegressionModel, samples,
                     method: str = "", relative: bool = False) -> PredictionDiffs:
    """pred_a - pred_b per sample; ``relative`` divides by max(|pred_b|, 1e-9)."""
    X, _ = as_arrays(samples)
    if X.shape[0] == 0:
        raise ValueError("no samples")
    a, _ = forward_batch(model_a, X)
    b, _ = forward_batch(model_b, X)
    d = a - b
    if relative:
        d = d / np.maximum(np.abs(b), 1e-9)
    return PredictionDiffs(d, method)


# -- relearn time / AIN -------------------------------------------------------

@dataclass
class RelearnCurve:
    losses: list = field(default_factory=list)
    step_budget: int = 0

    def to_csv(self, header: str = "forget_loss") -> str:
        return values_csv(self.losses, header)


def relearn_threshold(reference_forget_loss: float, alpha_percent: float) -> float:
    return (1.0 + alpha_percent / 100.0) * reference_forget_loss


def steps_to_threshold(curve: Sequence[float], reference_forget_loss: float, alpha_percent: float,
                       step_budget: int, initial: float | None = None) -> int | None:
    """First step whose recorded loss is within the alpha band; None if never within budget.

    ``curve[t-1]`` is the forget loss after step t; ``initial`` is the loss
    before any step (already inside the band means 0 steps).
    """
    thr = relearn_threshold(reference_forget_loss, alpha_percent)
    if initial is not None and initial <= thr:
        return 0
    for t, v in enumerate(curve, start=1):
        if t > step_budget:
            break
        if v <= thr:
            return t
    return None


@dataclass(frozen=True)
class AINConfig:
    alpha_percent: float = 5.0
    step_budget: int = 2000
    learning_rate: float = 1e-3
    batch_size: int = 32
    loss: str = "mae"
    optimizer: str = "adam"
    seed: int = 0

    def train_config(self) -> TrainConfig:
        return TrainConfig(1, self.learning_rate, self.batch_size, self.loss, self.optimizer, self.seed)


def relearn_time(model: RegressionModel, full: RegressionDataset, forget: RegressionDataset,
                 reference_forget_loss: float, alpha_percent: float, config: TrainConfig,
                 step_budget: int):
    """Fine-tune a copy on the full training set until the forget loss re-enters the band.

    Returns ``(steps or None, RelearnCurve)``; exhausting the budget yields None.
    """
    if alpha_percent <= 0 or step_budget < 1:
        raise ValueError("alpha_percent must be > 0 and step_budget >= 1")
    X, y = as_arrays(full)
    Xf, yf = as_arrays(forget)
    thr = relearn_threshold(reference_forget_loss, alpha_percent)
    curve = RelearnCurve([], step_budget)
    if error_on(model, (Xf, yf), config.loss) <= thr:
        return 0, curve
    rng = np.random.default_rng([int(config.seed), 71])
    opt = config.new_optimizer()
    params = np.array(model.params)
    step = 0
    while step < step_budget:
        for idx in minibatches(len(y), config.batch_size, rng):
            params = optimizer_step(opt, params, grad(model.with_params(params), X[idx], y[idx], config.loss))
            step += 1
            v = error_on(model.with_params(params), (Xf, yf), config.loss)
            curve.losses.append(v)
            if v <= thr:
                return step, curve
            if step >= step_budget:
                break
    return None, curve


def compute_ain(rt_unlearned: int | None, rt_retrained: int | None) -> float | None:
    """Relearn-time ratio; None when either side exhausted its budget."""
    if rt_unlearned is None or rt_retrained is None:
        return None
    if rt_retrained == 0:
        raise UndefinedAINError("retrained model needs 0 relearn steps; AIN undefined")
    return rt_unlearned / rt_retrained


# -- composition --------------------------------------------------------------

def forget_eval_set(split: SplitDataset) -> RegressionDataset:
    # random/index forget rules leave no test-side forget samples
    return split.test_forget if len(split.test_forget) else split.forget


def evaluate(unlearned: RegressionModel, retrained: RegressionModel, original: RegressionModel,
             split: SplitDataset, attack: Callable[[RegressionModel, SplitDataset], float] | None = None,
             ain: AINConfig | None = None, loss_kind: str = "mae",
             wall_time_seconds: float = 0.0) -> EvaluationReport:
    """Fill every metric column for one unlearned model."""
    for m in (retrained, original):
        if m.spec.input_dim != unlearned.spec.input_dim:
            raise ValueError("models disagree on input_dim")
    tf = forget_eval_set(split)
    err_r = error_on(unlearned, split.test_retain, loss_kind)
    err_f = error_on(unlearned, tf, loss_kind)
    w = w1_distance(unlearned.predict(tf.X), retrained.predict(tf.X))
    att = attack(unlearned, split) if attack is not None else None
    ain_value = None
    if ain is not None:
        full = split.train
        ref = error_on(original, split.forget, ain.loss)
        tc = ain.train_config()
        rt_u, _ = relearn_time(unlearned, full, split.forget, ref, ain.alpha_percent, tc, ain.step_budget)
        rt_r, _ = relearn_time(retrained, full, split.forget, ref, ain.alpha_percent, tc, ain.step_budget)
        try:
            ain_value = compute_ain(rt_u, rt_r)
        except UndefinedAINError:
            ain_value = None
    return EvaluationReport(err_r, err_f, att, w, ain_value, wall_time_seconds)
