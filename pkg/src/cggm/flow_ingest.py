"""Flow-record parsing and Traffic Dispersion Graph construction."""

from __future__ import annotations

import csv
import io
import logging
import math
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .graph_store import GraphSnapshot, LabelSchema, Provenance

log = logging.getLogger(__name__)


class SchemaError(ValueError):
    pass


class RowError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class FlowRecord:
    src_endpoint: str
    dst_endpoint: str
    features: tuple[float, ...]
    label: int


@dataclass(frozen=True)
class CsvSchema:
    """Column names for the endpoints, the label and the F feature columns."""

    src: str
    dst: str
    label: str
    features: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))
        if not self.features:
            raise SchemaError("schema needs at least one feature column")


@dataclass(frozen=True)
class WindowSpec:
    window_size: int
    max_nodes: int

    def __post_init__(self):
        if self.window_size < 1:
            raise ValueError(f"window_size must be >= 1, got {self.window_size}")
        if self.max_nodes < 2:
            raise ValueError(f"max_nodes must be >= 2, got {self.max_nodes}")


class ParseResult(NamedTuple):
    records: list[FlowRecord]
    skipped: int


def parse_flow_records(source, schema: CsvSchema, labels: LabelSchema, on_error: str = "raise") -> ParseResult:
    """Read labelled flows from a CSV path, text or byte stream.

    ``on_error`` is ``"raise"`` (fail on the first bad row) or ``"skip"``
    (drop it and count it). Feature values are not rescaled here.
    """
    if on_error not in ("raise", "skip"):
        raise ValueError(f"on_error must be 'raise' or 'skip', got {on_error!r}")
    if isinstance(source, (str, Path)):
        with open(source, newline="", encoding="utf-8") as fh:
            return _parse(fh, schema, labels, on_error)
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(source)
    if isinstance(source, (io.RawIOBase, io.BufferedIOBase)):
        source = io.TextIOWrapper(source, encoding="utf-8", newline="")
    return _parse(source, schema, labels, on_error)


def _parse(fh, schema: CsvSchema, labels: LabelSchema, on_error: str) -> ParseResult:
    reader = csv.reader(fh)
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaError("input has no header row") from None
    header = [h.strip() for h in header]
    cols = {}
    for name in (schema.src, schema.dst, schema.label, *schema.features):
        if name not in header:
            raise SchemaError(f"missing column {name!r}")
        cols[name] = header.index(name)
    feat_idx = [cols[c] for c in schema.features]

    records: list[FlowRecord] = []
    skipped = 0
    for row in reader:
        line = reader.line_num
        if not row:
            continue
        try:
            records.append(_row_to_record(row, cols, feat_idx, schema, labels, line))
        except RowError:
            if on_error == "raise":
                raise
            skipped += 1
    if skipped:
        log.warning("skipped %d unparsable flow rows", skipped)
    return ParseResult(records, skipped)


def _row_to_record(row, cols, feat_idx, schema, labels, line) -> FlowRecord:
    if len(row) <= max(cols.values()):
        raise RowError(line, f"expected at least {max(cols.values()) + 1} fields, got {len(row)}")
    feats = []
    for i in feat_idx:
        try:
            v = float(row[i])
        except ValueError:
            raise RowError(line, f"non-numeric feature {row[i]!r}") from None
        if not math.isfinite(v):
            raise RowError(line, f"non-finite feature {row[i]!r}")
        feats.append(v)
    try:
        label = labels.index(row[cols[schema.label]].strip())
    except KeyError as exc:
        raise RowError(line, str(exc)) from None
    return FlowRecord(row[cols[schema.src]].strip(), row[cols[schema.dst]].strip(), tuple(feats), label)


def normalize_features(records: Sequence[FlowRecord]) -> tuple[list[FlowRecord], list[tuple[float, float]]]:
    """Min-max scale every feature column to [0, 1]; constant columns become 0."""
    if not records:
        raise ValueError("cannot normalize an empty record set")
    feats = np.array([r.features for r in records], dtype=np.float64)
    lo = feats.min(axis=0)
    hi = feats.max(axis=0)
    span = hi - lo
    scaled = np.where(span > 0, (feats - lo) / np.where(span > 0, span, 1.0), 0.0)
    out = [replace(r, features=tuple(row.tolist())) for r, row in zip(records, scaled)]
    return out, [(float(a), float(b)) for a, b in zip(lo, hi)]


def denormalize_features(X: np.ndarray, table: Sequence[tuple[float, float]]) -> np.ndarray:
    lo = np.array([p[0] for p in table])
    hi = np.array([p[1] for p in table])
    return lo + np.asarray(X, dtype=np.float64) * (hi - lo)


def aggregate_node_features(incident_flows: Sequence[FlowRecord], num_features: int | None = None) -> np.ndarray:
    """Arithmetic mean of incident flow features (zeros when there are none)."""
    if not incident_flows:
        if num_features is None:
            raise ValueError("num_features is required for an empty incident set")
        return np.zeros(num_features)
    return np.mean([f.features for f in incident_flows], axis=0)


def assign_node_labels(incident_flows: Sequence[FlowRecord], labels: LabelSchema | None = None) -> int:
    """Majority label; ties go to the lowest-indexed non-normal class."""
    if not incident_flows:
        return 0
    counts = Counter(f.label for f in incident_flows)
    best = max(counts.values())
    tied = sorted(c for c, k in counts.items() if k == best)
    non_normal = [c for c in tied if c != 0]
    return non_normal[0] if non_normal else tied[0]


def class_proportions(labels_or_counts, labels: LabelSchema | None = None) -> dict:
    """Per-class fraction of a labelled collection.

    Accepts a sequence of labels or a ``{class: count}`` mapping. With a
    schema, every schema class appears in the result (possibly as 0.0).
    """
    if isinstance(labels_or_counts, dict):
        counts = {k: int(v) for k, v in labels_or_counts.items()}
    else:
        counts = dict(Counter(np.asarray(labels_or_counts).tolist()))
    total = sum(counts.values())
    if total == 0:
        raise ValueError("class proportions of an empty collection are undefined")
    if labels is not None:
        for c in range(labels.num_classes):
            counts.setdefault(c, 0)
    return {k: counts[k] / total for k in sorted(counts)}


def _window_snapshot(window: Sequence[FlowRecord], spec: WindowSpec, num_features: int) -> GraphSnapshot:
    index: dict[str, int] = {}
    for r in window:
        for ep in (r.src_endpoint, r.dst_endpoint):
            if ep not in index and len(index) < spec.max_nodes:
                index[ep] = len(index)
    n = spec.max_nodes
    A = np.zeros((n, n), dtype=np.float32)
    incident: list[list[FlowRecord]] = [[] for _ in range(len(index))]
    for r in window:
        i = index.get(r.src_endpoint)
        j = index.get(r.dst_endpoint)
        if i is None or j is None:
            continue
        if i != j:
            A[i, j] = 1.0
        incident[i].append(r)
        if j != i:
            incident[j].append(r)
    X = np.zeros((n, num_features), dtype=np.float32)
    C = np.zeros(n, dtype=np.int64)
    for i, flows in enumerate(incident):
        X[i] = aggregate_node_features(flows, num_features)
        C[i] = assign_node_labels(flows)
    return GraphSnapshot(A, X, C, len(index), Provenance.REAL)


def build_snapshots(records: Sequence[FlowRecord], spec: WindowSpec, labels: LabelSchema | None = None) -> list[GraphSnapshot]:
    """Cut records into windows of ``window_size`` flows and build one TDG per window.

    The trailing partial window is dropped. Endpoints beyond ``max_nodes`` in a
    window are discarded together with every flow that touches them.
    """
    if not records:
        return []
    num_features = len(records[0].features)
    k = spec.window_size
    n_windows = len(records) // k
    return [_window_snapshot(records[w * k : (w + 1) * k], spec, num_features) for w in range(n_windows)]

