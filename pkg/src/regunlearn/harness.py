"""Experiment runner: train, retrain, unlearn, evaluate and persist.

Every run writes into a staging directory that is moved into place only
after all stages succeed, so a failed run leaves no partial outputs.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import shutil
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import spearmanr

from . import __version__
from .attacks import InversionConfig, backdoor_attack_accuracy, invert_model, membership_attack, write_pgm
from .config import GENERATORS, ConfigError, ExperimentConfig, SweepSpec, config_hash
from .data import (
    IndexList,
    LabelBand,
    RegressionDataset,
    SplitDataset,
    SplitSpec,
    apply_patch,
    inject_backdoor,
    split,
    split_sequence,
)
from .metrics import EvaluationReport, error_on, evaluate, forget_eval_set, prediction_diffs, w1_distance
from .nn import ModelSpec, RegressionModel, train
from .unlearn import blindspot_unlearn, retrain_oracle, train_blindspot, unlearn

FORMAT_VERSION = 1
REPORT_COLUMNS = ("method", "err_Dtr", "err_Dtf", "att_prob", "w_dist", "ain", "wall_time")


class CheckpointFormatError(ValueError):
    """Checkpoint file is unreadable, truncated or inconsistent."""


class ExperimentError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    return format(float(v), ".17g")


def _csv_text(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def _write(path: Path, text: str):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


# -- checkpoints --------------------------------------------------------------

@dataclass
class Checkpoint:
    model: RegressionModel
    seed: int | None = None
    training_meta: dict = field(default_factory=dict)


def checkpoint_text(model: RegressionModel, seed: int | None = None, training_meta: dict | None = None) -> str:
    doc = {
        "format_version": FORMAT_VERSION,
        "spec": model.spec.to_dict(),
        "params": [float(v) for v in model.params],
        "seed": seed,
        "training_meta": training_meta or {},
    }
    return json.dumps(doc, sort_keys=True) + "\n"


def save_checkpoint(model: RegressionModel, path, seed: int | None = None,
                    training_meta: dict | None = None) -> Path:
    path = Path(path)
    _write(path, checkpoint_text(model, seed, training_meta))
    return path


def parse_checkpoint(text: str, source: str = "<string>") -> Checkpoint:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointFormatError(f"{source}: malformed JSON at offset {exc.pos} "
                                    f"(line {exc.lineno}, column {exc.colno}): {exc.msg}") from None
    if not isinstance(doc, dict):
        raise CheckpointFormatError(f"{source}: top level must be an object")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"{source}: unsupported format_version {version!r}")
    for key in ("spec", "params"):
        if key not in doc:
            raise CheckpointFormatError(f"{source}: missing {key!r}")
    try:
        spec = ModelSpec.from_dict(doc["spec"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointFormatError(f"{source}: bad spec: {exc}") from None
    params = doc["params"]
    if not isinstance(params, list) or len(params) != spec.n_params:
        n = len(params) if isinstance(params, list) else "non-list"
        raise CheckpointFormatError(f"{source}: spec needs {spec.n_params} params, file has {n}")
    model = RegressionModel(spec, np.asarray(params, dtype=np.float64))
    return Checkpoint(model, doc.get("seed"), doc.get("training_meta") or {})


def read_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointFormatError(f"{path}: not UTF-8 text at offset {exc.start}") from None
    return parse_checkpoint(text, str(path))


def load_checkpoint(path) -> RegressionModel:
    return read_checkpoint(path).model


# -- pipeline -----------------------------------------------------------------

@dataclass
class RunRecord:
    config_hash: str
    config: dict
    method: str
    checkpoints: dict
    report: EvaluationReport
    wall_times: dict
    version: str = __version__
    out_dir: str | None = None
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "config": self.config,
            "method": self.method,
            "checkpoints": self.checkpoints,
            "report": self.report.to_dict(),
            "wall_times": self.wall_times,
            "version": self.version,
            "extras": self.extras,
        }

    def report_row(self) -> list:
        r = self.report
        return [self.method, r.err_Dtr, r.err_Dtf, r.att_prob, r.w_dist, r.ain, self.wall_times.get("unlearn")]


@dataclass
class Prepared:
    config: ExperimentConfig
    dataset: RegressionDataset
    split: SplitDataset
    original: RegressionModel
    retrained: RegressionModel
    wall_times: dict
    poisoned_ids: np.ndarray | None = None


class _Stage:
    """Tags any exception raised inside the block with the stage name."""

    def __init__(self, name: str, times: dict | None = None):
        self.name, self.times = name, times

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        if self.times is not None:
            self.times[self.name] = time.perf_counter() - self.t0
        if exc is not None and not isinstance(exc, ExperimentError):
            raise ExperimentError(self.name, exc) from exc
        return False


def build_dataset(config: ExperimentConfig):
    """Generated dataset, plus the poisoned ids when a backdoor is configured."""
    dc = config.dataset
    ds = GENERATORS[dc.generator](dc.seed, **dc.options)
    if dc.backdoor is None:
        return ds, None
    return inject_backdoor(ds, dc.backdoor, dc.backdoor_seed)


def build_split(config: ExperimentConfig, dataset: RegressionDataset, poisoned_ids=None) -> SplitDataset:
    spec = config.split
    if config.poisoned_split:
        spec = replace(spec, rule=IndexList(tuple(poisoned_ids)))
    return split(dataset, spec)


def prepare(config: ExperimentConfig) -> Prepared:
    """Data, split, original model and retrained oracle."""
    times = {}
    with _Stage("data", times):
        ds, poisoned = build_dataset(config)
        sp = build_split(config, ds, poisoned)
    with _Stage("train_original", times):
        original = train(config.model, sp.train, config.train)
    with _Stage("retrain", times):
        retrained = retrain_oracle(config.model, sp, config.train)
    return Prepared(config, ds, sp, original, retrained, times, poisoned)


def apply_method(config: ExperimentConfig, prep: Prepared, times: dict):
    """Returns (unlearned model, blindspot model or None)."""
    if config.method == "retrain":
        # the oracle is deterministic in its config, so reuse it
        times["unlearn"] = times["retrain"]
        return prep.retrained, None
    if config.method == "blindspot":
        with _Stage("blindspot_train", times):
            blind = train_blindspot(config.model, prep.split.retain, config.method_config)
        with _Stage("unlearn", times):
            out = blindspot_unlearn(prep.original, prep.split, config.method_config, blindspot=blind)
        times["unlearn"] += times["blindspot_train"]
        return out.model, blind
    with _Stage("unlearn", times):
        out = unlearn(config.method, prep.original, prep.split, config.method_config)
    return out.model, None


def _attack_hook(config: ExperimentConfig):
    if not config.metrics.attack:
        return None
    m = config.metrics

    def hook(model, sp):
        return membership_attack(model, sp, config.train.loss, m.attack_max_per_class,
                                 m.attack_seed, m.attack_C, m.attack_gamma)
    return hook


def evaluate_run(config: ExperimentConfig, prep: Prepared, unlearned: RegressionModel, times: dict) -> EvaluationReport:
    with _Stage("evaluate", times):
        return evaluate(unlearned, prep.retrained, prep.original, prep.split,
                        attack=_attack_hook(config), ain=config.metrics.ain,
                        loss_kind=config.train.loss, wall_time_seconds=times["unlearn"])


class _Staging:
    """Files land in a hidden sibling directory and are moved into ``out`` on commit."""

    def __init__(self, out: Path):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.dir = Path(tempfile.mkdtemp(prefix=".staging-", dir=self.out))

    def path(self, name: str) -> Path:
        return self.dir / name

    def commit(self):
        for p in sorted(self.dir.iterdir()):
            os.replace(p, self.out / p.name)
        self.dir.rmdir()

    def discard(self):
        shutil.rmtree(self.dir, ignore_errors=True)


def _require_out(config: ExperimentConfig) -> Path:
    if not config.out_dir:
        raise ConfigError("no output directory (set out_dir or pass --out)")
    return Path(config.out_dir)


def _persist_run(config: ExperimentConfig, prep: Prepared, unlearned, blind, report, times, extras=None) -> RunRecord:
    out = _require_out(config)
    stage = _Staging(out)
    try:
        with _Stage("persist"):
            snapshot = config.to_dict()
            seed = config.train.seed
            models = {"original": prep.original, "retrained": prep.retrained}
            if blind is not None:
                models["blindspot"] = blind
            models["unlearned"] = unlearned
            ckpts = {}
            for name, model in models.items():
                fname = f"{name}.ckpt.json"
                save_checkpoint(model, stage.path(fname), seed,
                                {"role": name, "method": config.method, "config_hash": config.config_hash()})
                ckpts[name] = fname
            record = RunRecord(config.config_hash(), snapshot, config.method, ckpts, report,
                               dict(times), out_dir=str(out), extras=extras or {})
            _write(stage.path("report.json"), report_json(report))
            _write(stage.path("report.csv"), _csv_text(REPORT_COLUMNS, [record.report_row()]))
            diffs = prediction_diffs(unlearned, prep.retrained, forget_eval_set(prep.split), config.method)
            _write(stage.path(f"diffs_{config.method}.csv"), diffs.to_csv())
            _write(stage.path("record.json"), json.dumps(record.to_dict(), sort_keys=True, indent=2) + "\n")
        stage.commit()
    except BaseException:
        stage.discard()
        raise
    return record


def report_json(report: EvaluationReport) -> str:
    """Deterministic metrics only; wall times live in record.json."""
    return json.dumps(report.metrics_dict(), sort_keys=True, indent=2) + "\n"


def run_experiment(config: ExperimentConfig, prep: Prepared | None = None) -> RunRecord:
    """Train, retrain, unlearn, evaluate, persist. ``prep`` reuses shared models."""
    _require_out(config)
    prep = prep or prepare(config)
    times = dict(prep.wall_times)
    unlearned, blind = apply_method(config, prep, times)
    report = evaluate_run(config, prep, unlearned, times)
    return _persist_run(config, prep, unlearned, blind, report, times)


def load_run_record(directory) -> RunRecord:
    """Re-validate a stored run: hash, checkpoint files and checkpoint contents."""
    directory = Path(directory)
    d = json.loads((directory / "record.json").read_text(encoding="utf-8"))
    if config_hash(d["config"]) != d["config_hash"]:
        raise CheckpointFormatError(f"{directory}: stored config hash does not match its config")
    for name, fname in d["checkpoints"].items():
        p = directory / fname
        if not p.exists():
            raise CheckpointFormatError(f"{directory}: missing checkpoint {fname}")
        read_checkpoint(p)
    return RunRecord(d["config_hash"], d["config"], d["method"], d["checkpoints"],
                     EvaluationReport.from_dict(d["report"]), d["wall_times"], d.get("version", ""),
                     str(directory), d.get("extras", {}))


def find_records(directory) -> list[RunRecord]:
    directory = Path(directory)
    paths = sorted(p.parent for p in directory.rglob("record.json") if ".staging-" not in str(p))
    return [load_run_record(p) for p in paths]


def render_report(records: Sequence[RunRecord], fmt: str = "text") -> str:
    rows = [r.report_row() for r in records]
    if fmt == "csv":
        return _csv_text(REPORT_COLUMNS, rows)
    if fmt == "json":
        return json.dumps([dict(zip(REPORT_COLUMNS, row)) for row in rows], indent=2) + "\n"
    cells = [list(REPORT_COLUMNS)]
    for row in rows:
        cells.append([row[0]] + ["-" if v is None else f"{v:.4g}" for v in row[1:]])
    widths = [max(len(c[i]) for c in cells) for i in range(len(REPORT_COLUMNS))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(line, widths)).rstrip() for line in cells]
    return "\n".join(lines) + "\n"


# -- sweeps -------------------------------------------------------------------

@dataclass
class SweepCell:
    value: object
    record: RunRecord | None = None
    error: str | None = None


def run_sweep(sweep: SweepSpec, workers: int = 1) -> list[SweepCell]:
    """One run per axis value in the given order; a failed cell is recorded, not raised.

    Original and retrained models are trained once and shared read-only.
    """
    base = sweep.base
    out = _require_out(base)
    prep = prepare(base)

    def cell(value):
        cfg = sweep.cell(value).with_out_dir(out / f"{sweep.axis}={_fmt(value)}")
        try:
            return SweepCell(value, run_experiment(cfg, prep))
        except Exception as exc:  # one bad cell never aborts the rest
            return SweepCell(value, error=f"{type(exc).__name__}: {exc}")

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(cell, sweep.values))
    else:
        cells = [cell(v) for v in sweep.values]

    rows = []
    for c in cells:
        if c.record is not None:
            r = c.record.report
            rows.append([c.value, r.err_Dtr, r.err_Dtf, r.att_prob, r.w_dist, r.ain, ""])
        else:
            rows.append([c.value, None, None, None, None, None, c.error])
    header = (sweep.axis, "err_Dtr", "err_Dtf", "att_prob", "w_dist", "ain", "error")
    _write(out / "sweep.csv", _csv_text(header, rows))
    return cells


# -- progression --------------------------------------------------------------

def wasserstein_progression(config: ExperimentConfig, epoch_list: Sequence[int],
                            prep: Prepared | None = None) -> list[tuple[int, float]]:
    """W1 between blindspot-model and retrained predictions on D_f, per blindspot epoch count."""
    epochs = [int(n) for n in epoch_list]
    if not epochs or any(b <= a for a, b in zip(epochs, epochs[1:])) or epochs[0] < 1:
        raise ConfigError("epoch list must be non-empty, positive and strictly increasing")
    if config.method != "blindspot":
        raise ConfigError("progression needs a blindspot config")
    prep = prep or prepare(config)
    ref = prep.retrained.predict(prep.split.forget.X)
    curve = []
    for n in epochs:
        with _Stage(f"blindspot_epochs={n}"):
            b = train_blindspot(config.model, prep.split.retain, replace(config.method_config, blindspot_epochs=n))
            curve.append((n, w1_distance(b.predict(prep.split.forget.X), ref)))
    if config.out_dir:
        Path(config.out_dir).mkdir(parents=True, exist_ok=True)
        _write(Path(config.out_dir) / "progression.csv", _csv_text(("blindspot_epochs", "w1"), curve))
    return curve


def progression_spearman(curve) -> float:
    n, w = zip(*curve)
    return float(spearmanr(n, w).statistic)


# -- sequential requests ------------------------------------------------------

@dataclass
class SequentialStep:
    band: tuple
    report: EvaluationReport
    oracle_err_Dtr: float


def parse_bands(text: str) -> list[tuple[float | None, float | None]]:
    """``"lo:hi,lo:hi"``; an empty side is open (``":30"``)."""
    bands = []
    for part in text.split(","):
        part = part.strip()
        if part.count(":") != 1:
            raise ConfigError(f"band {part!r} is not lo:hi")
        lo, hi = part.split(":")
        try:
            band = (float(lo) if lo.strip() else None, float(hi) if hi.strip() else None)
            LabelBand(*band)
        except ValueError as exc:
            raise ConfigError(f"band {part!r}: {exc}") from None
        bands.append(band)
    return bands


def run_sequential(config: ExperimentConfig, bands: Sequence[tuple]) -> list[SequentialStep]:
    """One request per band, chained; request k is judged against an oracle without bands 1..k."""
    ivals = [(-math.inf if lo is None else lo, math.inf if hi is None else hi) for lo, hi in bands]
    ordered = sorted(ivals)
    if any(b[0] < a[1] for a, b in zip(ordered, ordered[1:])):
        raise ConfigError("bands overlap")
    with _Stage("data"):
        ds, _ = build_dataset(config)
        requests = [SplitSpec(LabelBand(lo, hi), config.split.test_fraction, config.split.seed) for lo, hi in bands]
        splits = split_sequence(ds, requests)
    with _Stage("train_original"):
        original = train(config.model, splits[0].train, config.train)
    hook = _attack_hook(config)
    steps, current = [], original
    for k, (band, sp) in enumerate(zip(bands, splits), start=1):
        with _Stage(f"request_{k}"):
            out = unlearn(config.method, current, sp, config.method_config)
            oracle = retrain_oracle(config.model, sp, config.train)
            rep = evaluate(out.model, oracle, original, sp, attack=hook, loss_kind=config.train.loss,
                           wall_time_seconds=out.wall_time_seconds)
            steps.append(SequentialStep(tuple(band), rep, error_on(oracle, sp.test_retain, config.train.loss)))
            current = out.model
    if config.out_dir:
        Path(config.out_dir).mkdir(parents=True, exist_ok=True)
        rows = [[k, s.band[0], s.band[1], s.report.err_Dtr, s.oracle_err_Dtr, s.report.err_Dtf, s.report.w_dist]
                for k, s in enumerate(steps, start=1)]
        _write(Path(config.out_dir) / "sequential.csv",
               _csv_text(("request", "lo", "hi", "err_Dtr", "oracle_err_Dtr", "err_Dtf", "w_dist"), rows))
    return steps


# -- attacks ------------------------------------------------------------------

def _unlearned_for(config: ExperimentConfig, prep: Prepared):
    times = dict(prep.wall_times)
    model, _ = apply_method(config, prep, times)
    return model


def run_attack(config: ExperimentConfig) -> dict:
    """Membership-attack probability on D_f for original, retrained and unlearned models."""
    prep = prepare(config)
    models = {"original": prep.original, "retrained": prep.retrained, "unlearned": _unlearned_for(config, prep)}
    m = config.metrics
    with _Stage("attack"):
        result = {name: membership_attack(model, prep.split, config.train.loss, m.attack_max_per_class,
                                          m.attack_seed, m.attack_C, m.attack_gamma)
                  for name, model in models.items()}
    if config.out_dir:
        Path(config.out_dir).mkdir(parents=True, exist_ok=True)
        _write(Path(config.out_dir) / "attack.json", json.dumps(result, sort_keys=True, indent=2) + "\n")
    return result


def run_inversion(config: ExperimentConfig) -> dict:
    """Invert original and unlearned models at each target; images go to ``*.pgm``."""
    side = math.isqrt(config.model.input_dim)
    if side * side != config.model.input_dim:
        raise ConfigError("inversion images need a square input width")
    out = _require_out(config)
    prep = prepare(config)
    models = {"original": prep.original, "unlearned": _unlearned_for(config, prep)}
    inv = config.inversion
    ic = InversionConfig(inv.steps, inv.learning_rate, seed=inv.seed)
    result = {}
    out.mkdir(parents=True, exist_ok=True)
    with _Stage("invert"):
        for name, model in models.items():
            for t in inv.targets:
                x, losses = invert_model(model, t, ic)
                fname = f"invert_{name}_t{_fmt(t)}.pgm"
                write_pgm(out / fname, x, side)
                result[f"{name}:{_fmt(t)}"] = {"image": fname, "initial_loss": losses[0], "final_loss": losses[-1]}
    _write(out / "inversion.json", json.dumps(result, sort_keys=True, indent=2) + "\n")
    return result


def patched_test_inputs(config: ExperimentConfig, prep: Prepared) -> np.ndarray:
    """Clean held-out images whose label is away from the target, with the trigger applied."""
    spec = config.dataset.backdoor
    tr = prep.split.test_retain
    keep = np.abs(tr.y - spec.target_label) > 0.5
    return apply_patch(tr.X[keep], spec)


def run_backdoor(config: ExperimentConfig) -> dict:
    """Attack accuracy of the trigger before unlearning, after it, and for the oracle."""
    if config.dataset.backdoor is None or not config.poisoned_split:
        raise ConfigError("backdoor runs need dataset.backdoor and split rule {'kind': 'poisoned'}")
    prep = prepare(config)
    unlearned = _unlearned_for(config, prep)
    spec = config.dataset.backdoor
    with _Stage("backdoor"):
        X = patched_test_inputs(config, prep)
        result = {name: backdoor_attack_accuracy(m, X, spec.target_label).attack_accuracy
                  for name, m in (("original", prep.original), ("retrained", prep.retrained),
                                  ("unlearned", unlearned))}
        result["n_patched"] = int(X.shape[0])
    if config.out_dir:
        Path(config.out_dir).mkdir(parents=True, exist_ok=True)
        _write(Path(config.out_dir) / "backdoor.json", json.dumps(result, sort_keys=True, indent=2) + "\n")
    return result
