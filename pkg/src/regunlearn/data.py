"""Seeded synthetic regression data, forget/retain splits and backdoor poisoning."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import ndtr

# age-like label scale for the gaussian generator
LABEL_CENTER = 50.0
LABEL_SCALE = 15.0


class DegenerateSplitError(ValueError):
    """A split left the forget or the retain training partition empty."""


@dataclass(frozen=True)
class LabeledSample:
    x: np.ndarray
    y: float
    group_tag: int | None = None
    id: int = 0


@dataclass(frozen=True, eq=False)
class RegressionDataset:
    X: np.ndarray
    y: np.ndarray
    ids: np.ndarray | None = None
    group_tags: tuple | None = None

    def __post_init__(self):
        X = np.array(self.X, dtype=np.float64, copy=True)
        y = np.array(self.y, dtype=np.float64, copy=True).ravel()
        if X.ndim != 2:
            raise ValueError(f"X must be 2-D, got shape {X.shape}")
        if X.shape[0] != y.shape[0]:
            raise ValueError(f"{X.shape[0]} inputs vs {y.shape[0]} labels")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("dataset contains non-finite values")
        ids = np.arange(len(y)) if self.ids is None else np.array(self.ids, dtype=np.int64, copy=True)
        if ids.shape != y.shape:
            raise ValueError("ids length does not match dataset")
        tags = (None,) * len(y) if self.group_tags is None else tuple(
            None if t is None else int(t) for t in self.group_tags
        )
        if len(tags) != len(y):
            raise ValueError("group_tags length does not match dataset")
        for arr in (X, y, ids):
            arr.flags.writeable = False
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "group_tags", tags)

    def __len__(self):
        return self.y.shape[0]

    @property
    def input_dim(self) -> int:
        return self.X.shape[1]

    @property
    def samples(self) -> list[LabeledSample]:
        return [
            LabeledSample(self.X[i], float(self.y[i]), self.group_tags[i], int(self.ids[i]))
            for i in range(len(self))
        ]

    def subset(self, positions) -> "RegressionDataset":
        positions = np.asarray(positions, dtype=np.int64)
        return RegressionDataset(
            self.X[positions],
            self.y[positions],
            self.ids[positions],
            tuple(self.group_tags[i] for i in positions),
        )

    def with_labels(self, y) -> "RegressionDataset":
        return RegressionDataset(self.X, y, self.ids, self.group_tags)

    def __eq__(self, other):
        if not isinstance(other, RegressionDataset):
            return NotImplemented
        return (
            np.array_equal(self.X, other.X)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.ids, other.ids)
            and self.group_tags == other.group_tags
        )

    __hash__ = None


def concat(parts: Sequence[RegressionDataset]) -> RegressionDataset:
    return RegressionDataset(
        np.vstack([p.X for p in parts]),
        np.concatenate([p.y for p in parts]),
        np.concatenate([p.ids for p in parts]),
        sum((p.group_tags for p in parts), ()),
    )


# -- generators ---------------------------------------------------------------

def make_target_function(seed: int, d: int, label_shape: str = "gaussian") -> Callable[[np.ndarray], np.ndarray]:
    """The noiseless labelling function g used by :func:`generate_synthetic`.

    g is a mostly linear projection plus a small bank of sinusoidal ridges,
    standardized with constants estimated once from a fixed reference sample,
    then mapped to the requested label shape.
    """
    if label_shape not in ("gaussian", "uniform"):
        raise ValueError(f"unknown label shape {label_shape!r}")
    rng = np.random.default_rng([int(seed), 11])
    w = rng.normal(size=d)
    w /= np.linalg.norm(w)
    V = rng.normal(size=(d, 4)) / np.sqrt(d)
    phase = rng.uniform(0, 2 * np.pi, size=4)

    def raw(X):
        return 0.8 * X @ w + 0.6 * np.sin(X @ V + phase).mean(axis=1)

    ref = raw(np.random.default_rng([int(seed), 12]).normal(size=(20000, d)))
    mu, sd = float(ref.mean()), float(ref.std())

    def g(X):
        z = (raw(np.atleast_2d(np.asarray(X, dtype=np.float64))) - mu) / sd
        if label_shape == "gaussian":
            return LABEL_CENTER + LABEL_SCALE * z
        return 1.0 + 100.0 * ndtr(z)

    return g


def generate_synthetic(seed: int, N: int, d: int, noise_std: float = 1.0,
                       label_shape: str = "gaussian", n_groups: int = 0) -> RegressionDataset:
    """N points with x ~ N(0, I_d) and y = g(x) + noise.

    ``n_groups > 0`` assigns cohort tags 0..n_groups-1 uniformly at random.
    """
    if N < 10 or d < 1:
        raise ValueError(f"need N >= 10 and d >= 1, got N={N}, d={d}")
    if noise_std < 0:
        raise ValueError("noise_std must be non-negative")
    g = make_target_function(seed, d, label_shape)
    rng = np.random.default_rng([int(seed), 13])
    X = rng.normal(size=(N, d))
    y = g(X) + noise_std * rng.normal(size=N)
    tags = None
    if n_groups > 0:
        tags = tuple(int(t) for t in rng.integers(0, n_groups, size=N))
    return RegressionDataset(X, y, group_tags=tags)


def pattern_templates(seed: int, side: int, n_patterns: int) -> np.ndarray:
    """One distinct stroke template per pattern id, shape (n_patterns, side, side).

    Each template is two strokes (a 2-px row stripe, a 2-px column stripe or
    a 3x3 blob); rendered templates are pairwise distinct.
    """
    rng = np.random.default_rng([int(seed), 21])
    templates = np.zeros((n_patterns, side, side))
    seen = set()
    p = 0
    while p < n_patterns:
        t = np.zeros((side, side))
        for _ in range(2):
            kind = int(rng.integers(0, 3))
            a, b = (int(v) for v in rng.integers(1, side - 3, size=2))
            if kind == 0:
                t[a:a + 2, 1:side - 1] = 1.0
            elif kind == 1:
                t[1:side - 1, a:a + 2] = 1.0
            else:
                t[a:a + 3, b:b + 3] = 1.0
        key = t.tobytes()
        if key in seen:
            continue
        seen.add(key)
        templates[p] = t
        p += 1
    return templates


def generate_pattern_images(seed: int, N: int, side: int = 16, n_patterns: int = 10,
                            label_noise: float = 0.05, pixel_noise: float = 0.15,
                            template_seed: int = 0) -> RegressionDataset:
    """Flattened side x side images in [0, 1]; label = pattern id + noise, tag = pattern id.

    ``template_seed`` fixes the pattern shapes, so datasets drawn with
    different ``seed`` values share the same patterns.
    """
    if side < 8 or n_patterns < 2 or N < 1:
        raise ValueError(f"need side >= 8, n_patterns >= 2, N >= 1; got {side}, {n_patterns}, {N}")
    templates = pattern_templates(template_seed, side, n_patterns)
    rng = np.random.default_rng([int(seed), 22])
    pid = rng.integers(0, n_patterns, size=N)
    intensity = rng.uniform(0.7, 1.0, size=(N, 1, 1))
    shifts = rng.integers(-1, 2, size=(N, 2))
    imgs = np.empty((N, side, side))
    for i in range(N):
        imgs[i] = np.roll(templates[pid[i]], tuple(shifts[i]), axis=(0, 1))
    imgs = imgs * intensity + rng.uniform(0.0, pixel_noise, size=imgs.shape)
    imgs = np.clip(imgs, 0.0, 1.0)
    y = pid + label_noise * rng.normal(size=N)
    return RegressionDataset(imgs.reshape(N, side * side), y, group_tags=tuple(int(p) for p in pid))


# -- splitting ----------------------------------------------------------------

@dataclass(frozen=True)
class LabelBand:
    """Forget iff lo <= y < hi; ``None`` leaves a side open."""
    lo: float | None
    hi: float | None

    def __post_init__(self):
        lo = -math.inf if self.lo is None else float(self.lo)
        hi = math.inf if self.hi is None else float(self.hi)
        if not lo < hi:
            raise ValueError(f"band needs lo < hi, got [{self.lo}, {self.hi})")

    def mask(self, ds: RegressionDataset) -> np.ndarray:
        lo = -math.inf if self.lo is None else self.lo
        hi = math.inf if self.hi is None else self.hi
        return (ds.y >= lo) & (ds.y < hi)


@dataclass(frozen=True)
class RandomK:
    k: int
    seed: int = 0


@dataclass(frozen=True)
class GroupTag:
    tag: int

    def mask(self, ds: RegressionDataset) -> np.ndarray:
        return np.array([t == self.tag for t in ds.group_tags], dtype=bool)


@dataclass(frozen=True)
class IndexList:
    ids: tuple

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))

    def mask(self, ds: RegressionDataset) -> np.ndarray:
        return np.isin(ds.ids, np.asarray(self.ids, dtype=np.int64))


ForgetRule = LabelBand | RandomK | GroupTag | IndexList


@dataclass(frozen=True)
class SplitSpec:
    rule: ForgetRule
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError(f"test_fraction must lie in (0, 1), got {self.test_fraction}")


def rule_to_dict(rule: ForgetRule) -> dict:
    if isinstance(rule, LabelBand):
        return {"kind": "label_band", "lo": rule.lo, "hi": rule.hi}
    if isinstance(rule, RandomK):
        return {"kind": "random_k", "k": rule.k, "seed": rule.seed}
    if isinstance(rule, GroupTag):
        return {"kind": "group_tag", "tag": rule.tag}
    return {"kind": "index_list", "ids": list(rule.ids)}


def rule_from_dict(d: dict) -> ForgetRule:
    kind = d.get("kind")
    if kind == "label_band":
        return LabelBand(d.get("lo"), d.get("hi"))
    if kind == "random_k":
        return RandomK(int(d["k"]), int(d.get("seed", 0)))
    if kind == "group_tag":
        return GroupTag(int(d["tag"]))
    if kind == "index_list":
        return IndexList(tuple(d["ids"]))
    raise ValueError(f"unknown forget rule kind {kind!r}")


@dataclass(frozen=True)
class SplitDataset:
    retain: RegressionDataset
    forget: RegressionDataset
    test_retain: RegressionDataset
    test_forget: RegressionDataset

    @property
    def train(self) -> RegressionDataset:
        return concat([self.retain, self.forget])

    @property
    def test(self) -> RegressionDataset:
        return concat([self.test_retain, self.test_forget])


def train_test_positions(n: int, test_fraction: float, seed: int):
    order = np.random.default_rng([int(seed), 31]).permutation(n)
    n_test = int(round(test_fraction * n))
    if n_test < 1 or n_test >= n:
        raise DegenerateSplitError(f"test_fraction {test_fraction} leaves no train or no test data for N={n}")
    return np.sort(order[n_test:]), np.sort(order[:n_test])


def _forget_mask(rule: ForgetRule, ds: RegressionDataset, is_train: bool) -> np.ndarray:
    if isinstance(rule, RandomK):
        m = np.zeros(len(ds), dtype=bool)
        if is_train:
            if rule.k > len(ds):
                raise ValueError(f"RandomK k={rule.k} exceeds {len(ds)} training samples")
            m[np.random.default_rng([int(rule.seed), 32]).choice(len(ds), size=rule.k, replace=False)] = True
        return m
    return rule.mask(ds)


def split(dataset: RegressionDataset, spec: SplitSpec) -> SplitDataset:
    """Seeded train/test split first, then the forget rule on both sides.

    RandomK draws only from the training side, so its test-forget partition
    is empty.
    """
    train_pos, test_pos = train_test_positions(len(dataset), spec.test_fraction, spec.seed)
    train, test = dataset.subset(train_pos), dataset.subset(test_pos)
    f_train = _forget_mask(spec.rule, train, True)
    f_test = _forget_mask(spec.rule, test, False)
    if not f_train.any():
        raise DegenerateSplitError("forget partition is empty")
    if f_train.all():
        raise DegenerateSplitError("retain partition is empty")
    return SplitDataset(
        retain=train.subset(np.flatnonzero(~f_train)),
        forget=train.subset(np.flatnonzero(f_train)),
        test_retain=test.subset(np.flatnonzero(~f_test)),
        test_forget=test.subset(np.flatnonzero(f_test)),
    )


def split_sequence(dataset: RegressionDataset, specs: Sequence[SplitSpec]) -> list[SplitDataset]:
    """Cumulative splits for sequential requests sharing the first spec's test split.

    Request i forgets what rule i selects; its retain sets exclude everything
    selected by rules 1..i.
    """
    if not specs:
        raise ValueError("no unlearning requests")
    base = specs[0]
    train_pos, test_pos = train_test_positions(len(dataset), base.test_fraction, base.seed)
    train, test = dataset.subset(train_pos), dataset.subset(test_pos)
    gone_train = np.zeros(len(train), dtype=bool)
    gone_test = np.zeros(len(test), dtype=bool)
    out = []
    for i, s in enumerate(specs):
        f_train = _forget_mask(s.rule, train, True)
        f_test = _forget_mask(s.rule, test, False)
        if (f_train & gone_train).any():
            raise ValueError(f"request {i} overlaps an earlier request")
        if not f_train.any():
            raise DegenerateSplitError(f"request {i} selects no training samples")
        gone_train |= f_train
        gone_test |= f_test
        if gone_train.all():
            raise DegenerateSplitError("retain partition is empty")
        out.append(SplitDataset(
            retain=train.subset(np.flatnonzero(~gone_train)),
            forget=train.subset(np.flatnonzero(f_train)),
            test_retain=test.subset(np.flatnonzero(~gone_test)),
            test_forget=test.subset(np.flatnonzero(f_test)),
        ))
    return out


# -- backdoor -----------------------------------------------------------------

@dataclass(frozen=True)
class BackdoorSpec:
    poison_count: int = 100
    patch_size: int = 4
    patch_value: float = 1.0
    target_label: float = 1.0


def image_side(d: int) -> int:
    side = math.isqrt(d)
    if side * side != d:
        raise ValueError(f"input width {d} is not a square image")
    return side


def apply_patch(X: np.ndarray, spec: BackdoorSpec) -> np.ndarray:
    """Copy of ``X`` with the bottom-right patch written in (rows/cols from the end)."""
    X = np.array(X, dtype=np.float64, copy=True)
    side = image_side(X.shape[1])
    if spec.patch_size > side:
        raise ValueError("patch larger than image")
    imgs = X.reshape(-1, side, side)
    imgs[:, side - spec.patch_size:, side - spec.patch_size:] = spec.patch_value
    return imgs.reshape(X.shape)


def inject_backdoor(dataset: RegressionDataset, spec: BackdoorSpec, seed: int):
    """Patch ``poison_count`` random samples whose label is not already the target.

    Returns the poisoned dataset and the sorted ids of poisoned samples.
    """
    image_side(dataset.input_dim)
    eligible = np.flatnonzero(np.abs(dataset.y - spec.target_label) > 0.5)
    if spec.poison_count > eligible.size:
        raise ValueError(f"only {eligible.size} eligible samples for {spec.poison_count} poisons")
    chosen = np.sort(np.random.default_rng([int(seed), 41]).choice(eligible, spec.poison_count, replace=False))
    X = np.array(dataset.X)
    y = np.array(dataset.y)
    X[chosen] = apply_patch(X[chosen], spec)
    y[chosen] = spec.target_label
    return RegressionDataset(X, y, dataset.ids, dataset.group_tags), dataset.ids[chosen]


# -- label distribution -------------------------------------------------------

@dataclass(frozen=True)
class LabelGaussian:
    mu: float
    sigma: float


def fit_label_gaussian(labels: Iterable[float]) -> LabelGaussian:
    """Mean and population (divide-by-n) standard deviation."""
    y = np.asarray(list(labels), dtype=np.float64)
    if y.size < 2:
        raise ValueError("need at least 2 labels to fit a gaussian")
    return LabelGaussian(float(y.mean()), float(y.std()))


# -- import / export ----------------------------------------------------------

def _f(v: float) -> str:
    return format(float(v), ".17g")


def to_csv(ds: RegressionDataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "group_tag", "y"] + [f"x_{j}" for j in range(ds.input_dim)])
    for i in range(len(ds)):
        tag = ds.group_tags[i]
        w.writerow([int(ds.ids[i]), "" if tag is None else tag, _f(ds.y[i])] + [_f(v) for v in ds.X[i]])
    return buf.getvalue()


def from_csv(text: str) -> RegressionDataset:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0][:3] != ["id", "group_tag", "y"]:
        raise ValueError("not a dataset CSV (bad header)")
    body = rows[1:]
    d = len(rows[0]) - 3
    ids = [int(r[0]) for r in body]
    tags = [None if r[1] == "" else int(r[1]) for r in body]
    y = [float(r[2]) for r in body]
    X = np.array([[float(v) for v in r[3:]] for r in body], dtype=np.float64).reshape(len(body), d)
    return RegressionDataset(X, y, ids, tags)


def to_json(ds: RegressionDataset) -> str:
    return json.dumps({
        "ids": [int(i) for i in ds.ids],
        "group_tags": list(ds.group_tags),
        "y": [float(v) for v in ds.y],
        "X": [[float(v) for v in row] for row in ds.X],
    })


def from_json(text: str) -> RegressionDataset:
    d = json.loads(text)
    X = np.array(d["X"], dtype=np.float64).reshape(len(d["y"]), -1)
    return RegressionDataset(X, d["y"], d["ids"], d["group_tags"])
