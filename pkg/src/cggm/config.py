"""YAML experiment configuration.

Every hyperparameter the pipeline uses appears here with its default, so a
config echo fully documents a run. One top-level ``seed`` drives CGGM
training, detector training, dataset splitting and generation.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .detector import DetectorConfig
from .flow_ingest import CsvSchema, WindowSpec
from .graph_store import LabelSchema
from .training import TrainingConfig


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    flows: Path | None
    schema: CsvSchema
    labels: LabelSchema
    window: WindowSpec
    training: TrainingConfig = field(default_factory=TrainingConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    balance_target: str | dict[str, float] = "uniform"
    train_fraction: float = 0.8
    on_error: str = "raise"
    out_dir: Path = Path("runs/default")
    seed: int = 0
    plot_perplexity: float = 30.0

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(
            self,
            seed=seed,
            training=dataclasses.replace(self.training, seed=seed),
            detector=dataclasses.replace(self.detector, seed=seed),
        )

    def resolved_target(self):
        """Balance target with class names mapped to label indices."""
        if isinstance(self.balance_target, str):
            return self.balance_target
        return {self.labels.index(k): float(v) for k, v in self.balance_target.items()}

    def to_dict(self) -> dict[str, Any]:
        training = dataclasses.asdict(self.training)
        training.pop("seed")
        detector = dataclasses.asdict(self.detector)
        detector.pop("seed")
        return {
            "seed": self.seed,
            "out_dir": str(self.out_dir),
            "input": {"flows": None if self.flows is None else str(self.flows), "on_error": self.on_error},
            "schema": {
                "src": self.schema.src,
                "dst": self.schema.dst,
                "label": self.schema.label,
                "features": list(self.schema.features),
            },
            "labels": self.labels.to_dict(),
            "window": {"window_size": self.window.window_size, "max_nodes": self.window.max_nodes},
            "split": {"train_fraction": self.train_fraction},
            "training": training,
            "detector": detector,
            "balance": {"target": self.balance_target},
            "plot": {"perplexity": self.plot_perplexity},
        }

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def _section(raw: dict, key: str) -> dict:
    value = raw.get(key) or {}
    if not isinstance(value, dict):
        raise ConfigError(f"section {key!r} must be a mapping")
    return value


def _build(cls, values: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where}: {exc}") from exc


def config_from_dict(raw: dict, base_dir: Path | None = None, check_paths: bool = True) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    known = {"seed", "out_dir", "input", "schema", "labels", "window", "split", "training", "detector", "balance", "plot"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    base_dir = Path(base_dir) if base_dir is not None else Path.cwd()
    seed = int(raw.get("seed", 0))

    inp = _section(raw, "input")
    flows = inp.get("flows")
    if flows is not None:
        flows = Path(flows)
        if not flows.is_absolute():
            flows = base_dir / flows
        if check_paths and not flows.exists():
            raise ConfigError(f"input file not found: {flows}")

    sch = _section(raw, "schema")
    try:
        schema = CsvSchema(sch["src"], sch["dst"], sch["label"], tuple(sch["features"]))
    except KeyError as exc:
        raise ConfigError(f"schema is missing {exc}") from exc
    if not schema.features:
        raise ConfigError("schema needs at least one feature column")

    lab = _section(raw, "labels")
    if "class_names" not in lab:
        raise ConfigError("labels.class_names is required")
    try:
        labels = LabelSchema(tuple(lab["class_names"]), bool(lab.get("binary_mode", False)))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    window = _build(WindowSpec, _section(raw, "window"), "window")
    training_values = dict(_section(raw, "training"))
    detector_values = dict(_section(raw, "detector"))
    for name, values in (("training", training_values), ("detector", detector_values)):
        if "seed" in values:
            raise ConfigError(f"{name}.seed is not allowed; use the top-level seed")
        values["seed"] = seed
    training = _build(TrainingConfig, training_values, "training")
    detector = _build(DetectorConfig, detector_values, "detector")

    target = _section(raw, "balance").get("target", "uniform")
    if isinstance(target, dict):
        for name in target:
            try:
                labels.index(name)
            except KeyError as exc:
                raise ConfigError(f"balance target names unknown class {name!r}") from exc
    elif target != "uniform":
        raise ConfigError(f"balance.target must be 'uniform' or a class->proportion mapping, got {target!r}")

    fraction = float(_section(raw, "split").get("train_fraction", 0.8))
    if not 0.0 < fraction < 1.0:
        raise ConfigError("split.train_fraction must lie in (0, 1)")
    on_error = inp.get("on_error", "raise")
    if on_error not in ("raise", "skip"):
        raise ConfigError("input.on_error must be 'raise' or 'skip'")

    out_dir = Path(raw.get("out_dir", "runs/default"))
    if not out_dir.is_absolute():
        out_dir = base_dir / out_dir
    return ExperimentConfig(
        flows,
        schema,
        labels,
        window,
        training,
        detector,
        target,
        fraction,
        on_error,
        out_dir,
        seed,
        float(_section(raw, "plot").get("perplexity", 30.0)),
    )


def load_config(path, check_paths: bool = True) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return config_from_dict(raw, path.parent, check_paths)
