"""Experiment configuration: JSON in, fully expanded snapshot out.

Defaults are expanded into the stored snapshot so a persisted run never
depends on library defaults, and the config hash is taken over the
canonical (sorted-key) JSON of that snapshot.
"""

from __future__ import annotations

import dataclasses
import hashlib
import inspect
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .data import (
    BackdoorSpec,
    IndexList,
    SplitSpec,
    generate_pattern_images,
    generate_synthetic,
    rule_from_dict,
    rule_to_dict,
)
from .metrics import AINConfig
from .nn import ModelSpec, TrainConfig
from .unlearn import FINETUNE_DEFAULTS, NEGGRAD_DEFAULTS, AmnesiacConfig, BlindspotConfig


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


GENERATORS = {"synthetic": generate_synthetic, "patterns": generate_pattern_images}
METHOD_NAMES = ("retrain", "finetune", "neggrad", "gaussian_amnesiac", "uniform_amnesiac", "blindspot")
SWEEP_AXES = {"lambda": "lam", "retain_fraction": "retain_fraction",
              "blindspot_epochs": "blindspot_epochs", "unlearn_epochs": "unlearn_epochs"}


def _generator_defaults(name: str) -> dict:
    sig = inspect.signature(GENERATORS[name])
    return {k: p.default for k, p in sig.parameters.items()
            if k != "seed" and p.default is not inspect.Parameter.empty}


def _build(cls, given: dict, base=None, what: str = ""):
    """Dataclass instance from ``given`` layered over ``base`` (or class defaults)."""
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(given) - names
    if unknown:
        raise ConfigError(f"{what}: unknown keys {sorted(unknown)}")
    start = {f.name: getattr(base, f.name) for f in dataclasses.fields(cls)} if base is not None else {}
    try:
        return cls(**{**start, **given})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{what}: {exc}") from None


@dataclass(frozen=True)
class DatasetConfig:
    generator: str = "synthetic"
    seed: int = 0
    options: dict = field(default_factory=dict)
    backdoor: BackdoorSpec | None = None
    backdoor_seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        gen = d.pop("generator", "synthetic")
        if gen not in GENERATORS:
            raise ConfigError(f"dataset: unknown generator {gen!r}")
        seed = int(d.pop("seed", 0))
        bd = d.pop("backdoor", None)
        bd_seed = int(d.pop("backdoor_seed", seed))
        defaults = _generator_defaults(gen)
        if gen == "synthetic":
            defaults = {"N": 2000, "d": 8, **defaults}
        else:
            defaults = {"N": 2000, **defaults}
        unknown = set(d) - set(defaults)
        if unknown:
            raise ConfigError(f"dataset: unknown options {sorted(unknown)} for generator {gen!r}")
        backdoor = _build(BackdoorSpec, bd, what="dataset.backdoor") if bd is not None else None
        if backdoor is not None and gen != "patterns":
            raise ConfigError("dataset: backdoor injection needs the 'patterns' generator")
        return cls(gen, seed, {**defaults, **d}, backdoor, bd_seed)

    def to_dict(self) -> dict:
        d = {"generator": self.generator, "seed": self.seed, **self.options}
        if self.backdoor is not None:
            d["backdoor"] = dataclasses.asdict(self.backdoor)
            d["backdoor_seed"] = self.backdoor_seed
        return d


def _method_config(method: str, given: dict, train: TrainConfig):
    if method == "retrain":
        return _build(TrainConfig, given, base=train, what="method_config")
    if method == "finetune":
        return _build(TrainConfig, given, base=replace(FINETUNE_DEFAULTS, seed=train.seed), what="method_config")
    if method == "neggrad":
        return _build(TrainConfig, given, base=replace(NEGGRAD_DEFAULTS, seed=train.seed), what="method_config")
    if method in ("gaussian_amnesiac", "uniform_amnesiac"):
        dist = "gaussian" if method == "gaussian_amnesiac" else "uniform"
        if given.get("distribution", dist) != dist:
            raise ConfigError(f"method_config: {method} needs distribution {dist!r}")
        return _build(AmnesiacConfig, {**given, "distribution": dist},
                      base=AmnesiacConfig(seed=train.seed), what="method_config")
    return _build(BlindspotConfig, given, base=BlindspotConfig(seed=train.seed), what="method_config")


@dataclass(frozen=True)
class MetricsConfig:
    attack: bool = True
    attack_max_per_class: int = 400
    attack_C: float = 1.0
    attack_gamma: float | None = None
    attack_seed: int = 0
    ain: AINConfig | None = None

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ain"] = dataclasses.asdict(self.ain) if self.ain is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict, seed: int) -> "MetricsConfig":
        d = dict(d)
        ain = d.pop("ain", None)
        d.setdefault("attack_seed", seed)
        out = _build(cls, d, what="metrics")
        if ain is not None:
            ain = _build(AINConfig, {} if ain is True else ain, base=AINConfig(seed=seed), what="metrics.ain")
        return replace(out, ain=ain)


@dataclass(frozen=True)
class InversionSettings:
    targets: tuple = (0.0, 1.0)
    steps: int = 500
    learning_rate: float = 0.1
    seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig
    split: SplitSpec
    model: ModelSpec
    train: TrainConfig
    method: str
    method_config: object
    metrics: MetricsConfig = MetricsConfig()
    inversion: InversionSettings = InversionSettings()
    out_dir: str | None = None
    poisoned_split: bool = False  # forget set = injected backdoor samples

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        allowed = {"dataset", "split", "model", "train", "method", "method_config",
                   "metrics", "inversion", "out_dir"}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
        for key in ("dataset", "split", "model", "method"):
            if key not in d:
                raise ConfigError(f"missing required key {key!r}")
        dataset = DatasetConfig.from_dict(d["dataset"])
        train = _build(TrainConfig, d.get("train", {}), what="train")

        s = dict(d["split"])
        rule = s.pop("rule", None)
        if rule is None:
            raise ConfigError("split: missing forget rule")
        poisoned = rule.get("kind") == "poisoned"
        if poisoned and dataset.backdoor is None:
            raise ConfigError("split: 'poisoned' rule needs a dataset.backdoor section")
        try:
            # placeholder id list; the real ids are known only after injection
            parsed = IndexList(()) if poisoned else rule_from_dict(rule)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"split.rule: {exc}") from None
        split = _build(SplitSpec, {**s, "rule": parsed}, what="split")

        m = d["model"]
        try:
            if "sizes" in m:
                model = ModelSpec.mlp(m["sizes"], m.get("activation", "relu"))
            else:
                model = ModelSpec.from_dict(m)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"model: {exc}") from None
        n_in = dataset.options.get("d", dataset.options.get("side", 0) ** 2)
        if model.input_dim != n_in:
            raise ConfigError(f"model input_dim {model.input_dim} does not match dataset width {n_in}")

        method = d["method"]
        if method not in METHOD_NAMES:
            raise ConfigError(f"unknown method {method!r}; expected one of {', '.join(METHOD_NAMES)}")
        mc = _method_config(method, dict(d.get("method_config", {})), train)
        metrics = MetricsConfig.from_dict(d.get("metrics", {}), train.seed)
        inv = dict(d.get("inversion", {}))
        if "targets" in inv:
            inv["targets"] = tuple(float(t) for t in inv["targets"])
        inversion = _build(InversionSettings, inv, what="inversion")
        return cls(dataset, split, model, train, method, mc, metrics, inversion,
                   d.get("out_dir"), poisoned)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON (offset {exc.pos}): {exc.msg}") from None
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        rule = {"kind": "poisoned"} if self.poisoned_split else rule_to_dict(self.split.rule)
        return {
            "dataset": self.dataset.to_dict(),
            "split": {"rule": rule, "test_fraction": self.split.test_fraction, "seed": self.split.seed},
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "method": self.method,
            "method_config": self.method_config.to_dict(),
            "metrics": self.metrics.to_dict(),
            "inversion": {**dataclasses.asdict(self.inversion), "targets": list(self.inversion.targets)},
            "out_dir": self.out_dir,
        }

    def config_hash(self) -> str:
        return config_hash(self.to_dict())

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Every seed in the config replaced by ``seed``."""
        d = self.to_dict()
        d["dataset"]["seed"] = seed
        if "backdoor_seed" in d["dataset"]:
            d["dataset"]["backdoor_seed"] = seed
        d["split"]["seed"] = seed
        d["train"]["seed"] = seed
        d["method_config"]["seed"] = seed
        d["metrics"]["attack_seed"] = seed
        if d["metrics"]["ain"] is not None:
            d["metrics"]["ain"]["seed"] = seed
        d["inversion"]["seed"] = seed
        return ExperimentConfig.from_dict(d)

    def with_out_dir(self, out_dir) -> "ExperimentConfig":
        return replace(self, out_dir=str(out_dir))

    def with_method_value(self, key: str, value) -> "ExperimentConfig":
        d = self.to_dict()
        d["method_config"][key] = value
        return ExperimentConfig.from_dict(d)


def config_hash(snapshot: dict) -> str:
    """sha256 of the canonical JSON, ignoring where outputs go."""
    body = {k: v for k, v in snapshot.items() if k != "out_dir"}
    text = json.dumps(body, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class SweepSpec:
    base: ExperimentConfig
    axis: str
    values: tuple

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(self.values))
        if self.axis not in SWEEP_AXES:
            raise ConfigError(f"unknown sweep axis {self.axis!r}; expected one of {', '.join(SWEEP_AXES)}")
        if not self.values:
            raise ConfigError("sweep axis needs at least one value")
        if self.base.method != "blindspot":
            raise ConfigError("sweep axes vary blindspot settings; base method must be 'blindspot'")
        for v in self.values:
            self.cell(v)  # validates the value

    @property
    def field_name(self) -> str:
        return SWEEP_AXES[self.axis]

    def cell(self, value) -> ExperimentConfig:
        if self.field_name.endswith("epochs"):
            if float(value) != int(value):
                raise ConfigError(f"{self.axis} must be an integer, got {value}")
            value = int(value)
        return self.base.with_method_value(self.field_name, value)
