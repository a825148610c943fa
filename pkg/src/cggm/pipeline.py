"""Glue between the stages: CSV to dataset, and the balanced-vs-imbalanced experiment."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

from .detector import DetectionReport, DetectorConfig, evaluate_detector, macro_f1, train_detector
from .fidelity import FidelityReport, compare_datasets
from .flow_ingest import CsvSchema, WindowSpec, build_snapshots, class_proportions, normalize_features, parse_flow_records
from .graph_store import LabelSchema, Provenance, SnapshotDataset, density_stats, split_dataset
from .training import (
    TrainingConfig,
    TrainResult,
    generate_balanced_dataset,
    generate_like,
    make_balance_plan,
    noise_like,
    train,
)

log = logging.getLogger(__name__)


def dataset_from_csv(source, schema: CsvSchema, labels: LabelSchema, window: WindowSpec, on_error: str = "raise") -> SnapshotDataset:
    records, skipped = parse_flow_records(source, schema, labels, on_error)
    if not records:
        return SnapshotDataset([], len(schema.features), labels, [])
    records, table = normalize_features(records)
    snaps = build_snapshots(records, window, labels)
    return SnapshotDataset(snaps, len(schema.features), labels, table)


@dataclass
class ExperimentResult:
    train_result: TrainResult
    balanced: SnapshotDataset
    proportions_before: dict
    proportions_after: dict
    report_balanced: DetectionReport
    report_imbalanced: DetectionReport
    real_density: float
    synthetic_density: float

    @property
    def macro_f1_balanced(self) -> float:
        return macro_f1(self.report_balanced)

    @property
    def macro_f1_imbalanced(self) -> float:
        return macro_f1(self.report_imbalanced)


def synthetic_part(ds: SnapshotDataset) -> SnapshotDataset:
    return ds.replace([s for s in ds if s.provenance is Provenance.SYNTHETIC])


def balance_experiment(
    real: SnapshotDataset,
    train_config: TrainingConfig,
    detector_config: DetectorConfig,
    train_fraction: float = 0.8,
    target="uniform",
) -> ExperimentResult:
    """Train CGGM on a real training split, balance it, and compare detectors on held-out real data."""
    seed = train_config.seed
    train_ds, test_ds = split_dataset(real, train_fraction, seed)
    result = train(train_ds, train_config)
    plan = make_balance_plan(train_ds, target)
    balanced = generate_balanced_dataset(train_ds, result.generator, plan, seed, result.rho)
    det_cfg = replace(detector_config, seed=seed)
    rep_bal = evaluate_detector(train_detector(balanced, det_cfg).model, test_ds)
    rep_imb = evaluate_detector(train_detector(train_ds, det_cfg).model, test_ds)
    synth = synthetic_part(balanced)
    return ExperimentResult(
        result,
        balanced,
        class_proportions(train_ds.active_labels(), real.label_schema),
        class_proportions(balanced.active_labels(), real.label_schema),
        rep_bal,
        rep_imb,
        density_stats(train_ds).mean_density,
        density_stats(synth).mean_density if len(synth) else float("nan"),
    )


def fidelity_vs_noise(real: SnapshotDataset, result: TrainResult, seed: int) -> tuple[FidelityReport, FidelityReport]:
    """Fidelity of label-matched synthetic snapshots and of pure noise, both against ``real``."""
    synth = generate_like(real, result.generator, seed, result.rho)
    return compare_datasets(real, synth), compare_datasets(real, noise_like(real, seed))
