"""Experiment configuration, artifact preparation and report persistence."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import store
from .data import CORRUPTIONS, CorruptionSpec, Dataset, DatasetSpec, corrupt, domain_stream, generate_dataset
from .engine import AdaptConfig, Batch, run_stream
from .fisher import FisherMap, estimate_fisher
from .metrics import RunReport, audit_windows, forgetting_probe
from .network import Architecture, Model, predict
from .training import train_source

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
OUTPUT_ROOT_ENV = "EATAC_OUTPUT_ROOT"
REGENERATION_ATTEMPTS = 5
LOSS_COLUMNS = ("entropy", "consistency", "minmax_entropy", "fisher")


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


class InvariantViolation(RuntimeError):
    """A run broke one of the harness's bookkeeping or state guarantees."""


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 10
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 64
    p_drop: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("train.epochs: must be non-negative")
        if not self.lr > 0:
            raise ConfigError("train.lr: must be positive")
        if self.batch_size < 2:
            raise ConfigError("train.batch_size: must be at least 2")


def default_corruptions(severity: int = 5, seed: int = 0) -> tuple[CorruptionSpec, ...]:
    """All kinds at one severity, noise first."""
    return tuple(CorruptionSpec(kind, severity, seed) for kind in CORRUPTIONS)


def _build(cls, section: str, values) -> object:
    if not isinstance(values, dict):
        raise ConfigError(f"{section}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"{section}: unknown field(s) {unknown}")
    try:
        return cls(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one run depends on; adaptation defaults are materialized on construction."""

    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    corruptions: tuple[CorruptionSpec, ...] = field(default_factory=default_corruptions)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    architecture: Architecture = field(default_factory=Architecture)
    train: TrainSettings = field(default_factory=TrainSettings)
    fisher_samples: int = 500
    batch_size: int = 64
    probe_every: int | None = None
    ece_bins: int = 15
    output_dir: str = "runs/experiment"
    checkpoint: str | None = None
    fisher: str | None = None
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version: unsupported value {self.schema_version!r}")
        if not self.corruptions:
            raise ConfigError("corruptions: the stream needs at least one domain")
        if (self.architecture.input_dim, self.architecture.num_classes) != \
                (self.dataset.input_dim, self.dataset.num_classes):
            raise ConfigError("architecture: input_dim/num_classes must match the dataset")
        if self.adapt.num_classes != self.dataset.num_classes:
            raise ConfigError("adapt.num_classes: must match dataset.num_classes")
        if self.batch_size < 1:
            raise ConfigError("batch_size: must be positive")
        if self.fisher_samples < 1:
            raise ConfigError("fisher_samples: must be positive")
        if self.probe_every is not None and self.probe_every < 1:
            raise ConfigError("probe_every: must be positive when set")
        if self.ece_bins < 1:
            raise ConfigError("ece_bins: must be positive")
        object.__setattr__(self, "corruptions", tuple(self.corruptions))
        object.__setattr__(self, "adapt", self.adapt.resolved())

    @classmethod
    def for_seed(cls, seed: int, **overrides) -> "ExperimentConfig":
        """Default experiment with every seed set to ``seed``."""
        label_noise = overrides.pop("label_noise", 0.0)
        severity = overrides.pop("severity", 5)
        kinds = overrides.pop("kinds", CORRUPTIONS)
        adapt = overrides.pop("adapt", {})
        return cls(
            dataset=DatasetSpec(seed=seed, label_noise=label_noise),
            corruptions=tuple(CorruptionSpec(k, severity, seed) for k in kinds),
            adapt=AdaptConfig(seed=seed, **adapt),
            train=TrainSettings(seed=seed),
            **overrides,
        )

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def with_adapt(self, **changes) -> "ExperimentConfig":
        """Swap adaptation settings; method-dependent defaults are re-derived."""
        base = {f.name: getattr(self.adapt, f.name) for f in dataclasses.fields(AdaptConfig)}
        if "method" in changes:
            for name in ("lr", "beta"):
                base[name] = None
        base.update(changes)
        return self.replace(adapt=AdaptConfig(**base))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config: expected a JSON object")
        d = dict(d)
        if "schema_version" not in d:
            raise ConfigError("schema_version: missing")
        unknown = sorted(set(d) - {f.name for f in dataclasses.fields(cls)})
        if unknown:
            raise ConfigError(f"config: unknown field(s) {unknown}")
        if "dataset" in d:
            d["dataset"] = _build(DatasetSpec, "dataset", d["dataset"])
        if "architecture" in d:
            d["architecture"] = _build(Architecture, "architecture", d["architecture"])
        if "train" in d:
            d["train"] = _build(TrainSettings, "train", d["train"])
        if "corruptions" in d:
            if not isinstance(d["corruptions"], list):
                raise ConfigError("corruptions: expected a list")
            d["corruptions"] = tuple(_build(CorruptionSpec, f"corruptions[{i}]", c)
                                     for i, c in enumerate(d["corruptions"]))
        if "adapt" in d:
            if not isinstance(d["adapt"], dict):
                raise ConfigError("adapt: expected an object")
            try:
                d["adapt"] = AdaptConfig.from_dict(d["adapt"])
            except (TypeError, ValueError) as exc:
                msg = str(exc)
                raise ConfigError(msg if msg.startswith("adapt") else f"adapt.{msg}") from exc
        try:
            return cls(**d)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config: {exc}") from exc

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: malformed JSON ({exc})") from exc
        return cls.from_dict(doc)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps())
        return path

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"config: cannot read {path} ({exc})") from exc
        return cls.loads(text)


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "."))


def resolve_output(path: str) -> Path:
    p = Path(path)
    return p if p.is_absolute() else output_root() / p


# -- artifacts ---------------------------------------------------------------

def source_accuracy_by_severity(model: Model, dataset: Dataset, kind: str, seed: int) -> list[float]:
    accs = []
    for sev in range(1, 6):
        xc = corrupt(dataset.test.x, CorruptionSpec(kind, sev, seed), dataset.scale)
        logits = predict(model, xc, stats="running").data
        accs.append(float(np.mean(np.argmax(logits, axis=1) == dataset.test.y)))
    return accs


def severity_violations(model: Model, dataset: Dataset, seed: int) -> dict[str, list[float]]:
    """Kinds whose frozen-model accuracy rises somewhere along the severity scale."""
    bad = {}
    for kind in CORRUPTIONS:
        accs = source_accuracy_by_severity(model, dataset, kind, seed)
        if any(b > a for a, b in zip(accs, accs[1:])):
            bad[kind] = accs
    return bad


@dataclass
class Artifacts:
    dataset: Dataset
    model: Model
    fisher: FisherMap
    lineage: dict


def prepare_source(cfg: ExperimentConfig) -> tuple[Dataset, Model, dict]:
    """Generate the data and train the source model, regenerating the data if severity is not monotone."""
    corruption_seed = cfg.corruptions[0].seed
    spec = cfg.dataset
    for attempt in range(REGENERATION_ATTEMPTS):
        dataset = generate_dataset(spec)
        model = train_source(dataset, cfg.architecture, epochs=cfg.train.epochs, seed=cfg.train.seed,
                             lr=cfg.train.lr, momentum=cfg.train.momentum,
                             batch_size=cfg.train.batch_size, p_drop=cfg.train.p_drop)
        bad = severity_violations(model, dataset, corruption_seed) if cfg.train.epochs > 0 else {}
        if not bad:
            lineage = {"dataset_seed": spec.seed, "requested_dataset_seed": cfg.dataset.seed,
                       "regenerations": attempt, "train_seed": cfg.train.seed,
                       "model_seed": model.seed}
            return dataset, model, lineage
        log.warning("severity not monotone for %s; regenerating dataset", sorted(bad))
        spec = dataclasses.replace(spec, seed=spec.seed + 7919)
    raise InvariantViolation(f"severity monotonicity still violated after {REGENERATION_ATTEMPTS} datasets")


def fisher_pool(dataset: Dataset, count: int) -> np.ndarray:
    return dataset.fisher.x[:count]


def prepare(cfg: ExperimentConfig, directory: Path | None = None) -> Artifacts:
    """Load checkpoint and Fisher map when available, producing (and saving) them otherwise."""
    directory = directory or resolve_output(cfg.output_dir)
    ckpt_path = Path(cfg.checkpoint) if cfg.checkpoint else directory / "checkpoint.json"
    fisher_path = Path(cfg.fisher) if cfg.fisher else directory / "fisher.json"
    if ckpt_path.exists():
        model, lineage = store.load_checkpoint(ckpt_path)
        dataset = generate_dataset(dataclasses.replace(cfg.dataset, seed=lineage["dataset_seed"]))
    elif cfg.checkpoint:
        raise FileNotFoundError(f"checkpoint {ckpt_path} does not exist")
    else:
        dataset, model, lineage = prepare_source(cfg)
        store.save_checkpoint(ckpt_path, model, lineage)
    if fisher_path.exists():
        fisher = store.load_fisher(fisher_path, model)
    elif cfg.fisher:
        raise FileNotFoundError(f"Fisher map {fisher_path} does not exist")
    else:
        fisher = estimate_fisher(model, fisher_pool(dataset, cfg.fisher_samples))
        store.save_fisher(fisher_path, fisher, model.adaptable_names())
    return Artifacts(dataset, model, fisher, lineage)


def build_stream(cfg: ExperimentConfig, dataset: Dataset) -> list[Batch]:
    stream = []
    for spec in cfg.corruptions:
        batches = domain_stream(dataset.test.x, dataset.test.y, spec, dataset.scale, cfg.batch_size)
        stream += [Batch(x, y, spec.name, j == 0) for j, (x, y) in enumerate(batches)]
    return stream


# -- running -----------------------------------------------------------------

def check_run_invariants(report: RunReport, origin: dict, model: Model, cfg: AdaptConfig) -> None:
    adaptable = set(model.adaptable_names())
    state = model.state_dict()
    for name, value in state.items():
        if name.split(".")[-1] in ("running_mean", "running_var") or name in adaptable:
            continue
        if not np.array_equal(value, origin[name]):
            raise InvariantViolation(f"frozen parameter {name} changed during adaptation")
    if cfg.scenario == "episodic" and any(not np.array_equal(state[k], origin[k]) for k in state):
        raise InvariantViolation("episodic run did not restore the source checkpoint")
    for b in report.batches:
        if b.backwards > b.selected * cfg.steps_per_batch:
            raise InvariantViolation(f"batch {b.index}: more backward passes than selected samples")
    if cfg.method in ("source", "norm-stats") and report.backwards:
        raise InvariantViolation("a forward-only method recorded backward passes")


def run_experiment(cfg: ExperimentConfig, artifacts: Artifacts | None = None,
                   directory: Path | None = None, write: bool = True) -> RunReport:
    """Stream every configured domain through the adaptation engine and persist the results."""
    directory = directory or resolve_output(cfg.output_dir)
    artifacts = artifacts or prepare(cfg, directory)
    model = artifacts.model.copy()
    origin = model.state_dict()
    probe = (artifacts.dataset.probe.x, artifacts.dataset.probe.y)
    before = forgetting_probe(model, *probe)
    report = run_stream(model, build_stream(cfg, artifacts.dataset), cfg.adapt, artifacts.fisher,
                        probe=probe, probe_every=cfg.probe_every, ece_bins=cfg.ece_bins)
    report.config = cfg.to_dict()
    report.probes.insert(0, {"after_batch": -1, "domain": "source", "end_of_domain": True,
                             "clean_accuracy": before})
    report.lineage = artifacts.lineage
    check_run_invariants(report, origin, model, cfg.adapt)
    if write:
        write_outputs(report, directory)
    return report


FISHER_SWEEP = (10, 50, 100, 500)


def fisher_sample_sweep(cfg: ExperimentConfig, counts: Sequence[int] = FISHER_SWEEP,
                        artifacts: Artifacts | None = None,
                        directory: Path | None = None) -> list[tuple[int, RunReport]]:
    """Rerun ``cfg`` with the importance map estimated from each pool size in ``counts``.

    The source model is shared; each run is written to ``<directory>/q<count>``.
    """
    directory = directory or resolve_output(cfg.output_dir)
    artifacts = artifacts or prepare(cfg, directory)
    available = len(artifacts.dataset.fisher.x)
    results = []
    for count in counts:
        if not 0 < count <= available:
            raise ConfigError(f"fisher_samples: {count} outside 1..{available} (size of the pool)")
        run_cfg = cfg.replace(fisher_samples=count)
        fisher = estimate_fisher(artifacts.model, fisher_pool(artifacts.dataset, count))
        swept = dataclasses.replace(artifacts, fisher=fisher)
        results.append((count, run_experiment(run_cfg, swept, directory=directory / f"q{count}")))
    return results


# -- persistence -------------------------------------------------------------

def _fmt(v) -> str:
    if v is None or v == "":
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _csv(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def report_document(report: RunReport) -> dict:
    doc = report.summary()
    if any(b.uncertain is not None for b in report.batches):
        doc["audit"] = audit_windows(report)
    doc["clean_accuracy_drop"] = report.probes[0]["clean_accuracy"] - report.probes[-1]["clean_accuracy"] \
        if report.probes else None
    return doc


def batches_csv(report: RunReport) -> str:
    cols = ["batch", "domain", "size", "accuracy", "mean_confidence", "selected", "forwards",
            "backwards", *[f"loss_{c}" for c in LOSS_COLUMNS], "uncertain", "sub_wrong_on_uncertain"]
    rows = []
    for b in report.batches:
        row = {"batch": b.index, "domain": b.domain, "size": b.size, "accuracy": b.accuracy,
               "mean_confidence": b.mean_confidence, "selected": b.selected, "forwards": b.forwards,
               "backwards": b.backwards, "uncertain": b.uncertain,
               "sub_wrong_on_uncertain": b.sub_wrong_on_uncertain}
        row.update({f"loss_{k}": float(v) for k, v in b.losses.items()})
        rows.append(row)
    return _csv(rows, cols)


def reliability_csv(report: RunReport) -> str:
    rows = [{"scope": "all", **r} for r in report.ece_bins.rows()]
    for name in report.domains():
        rows += [{"scope": name, **r} for r in report.domain_ece[name].rows()]
    return _csv(rows, ["scope", "bin", "lower", "upper", "count", "mean_confidence", "accuracy"])


def trajectory_csv(report: RunReport) -> str:
    return _csv(report.probes, ["after_batch", "domain", "end_of_domain", "clean_accuracy"])


OUTPUT_FILES = ("report.json", "batches.csv", "reliability.csv", "trajectory.csv", "config.json")


def write_outputs(report: RunReport, directory: Path) -> dict[str, Path]:
    directory.mkdir(parents=True, exist_ok=True)
    texts = {
        "report.json": json.dumps(report_document(report), sort_keys=True, indent=1) + "\n",
        "batches.csv": batches_csv(report),
        "reliability.csv": reliability_csv(report),
        "trajectory.csv": trajectory_csv(report),
        "config.json": json.dumps(report.config, sort_keys=True, indent=1) + "\n",
    }
    paths = {}
    for name, text in texts.items():
        paths[name] = directory / name
        paths[name].write_text(text)
    return paths


# -- comparison --------------------------------------------------------------

def load_report(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "report.json"
    try:
        return json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"inputs: cannot read report {path} ({exc})") from exc


def comparison_rows(reports: list[tuple[str, dict]]) -> tuple[list[dict], list[str]]:
    """One row per run; ``accuracy_delta`` is measured against the first run."""
    if not reports:
        raise ConfigError("inputs: at least one run is required")
    domains: list[str] = []
    for _, doc in reports:
        for d in doc["domains"]:
            if d["domain"] not in domains:
                domains.append(d["domain"])
    baseline = reports[0][1]["accuracy"]
    rows = []
    for name, doc in reports:
        row = {"run": name, "method": doc.get("method"), "scenario": doc.get("scenario"),
               "seed": doc.get("seed"), "samples": doc["samples"], "accuracy": doc["accuracy"],
               "accuracy_delta": doc["accuracy"] - baseline, "ece": doc["ece"],
               "forwards": doc["forwards"], "backwards": doc["backwards"],
               "clean_accuracy_drop": doc.get("clean_accuracy_drop")}
        for d in doc["domains"]:
            row[f"acc:{d['domain']}"] = d["accuracy"]
        rows.append(row)
    cols = ["run", "method", "scenario", "seed", "samples", "accuracy", "accuracy_delta", "ece",
            "forwards", "backwards", "clean_accuracy_drop", *[f"acc:{d}" for d in domains]]
    return rows, cols


def comparison_csv(reports: list[tuple[str, dict]]) -> str:
    rows, cols = comparison_rows(reports)
    return _csv(rows, cols)
