"""Snapshot data model, noise sampling, density statistics and the .cggmds container."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

MAGIC = b"CGGMDS"
FORMAT_VERSION = 1


class Provenance(str, Enum):
    REAL = "real"
    NOISY = "noisy"
    SYNTHETIC = "synthetic"


class ContainerError(ValueError):
    """Base class for .cggmds read failures."""


class VersionMismatchError(ContainerError):
    pass


class CorruptContainerError(ContainerError):
    pass


class ShapeMismatchError(ContainerError):
    pass


@dataclass(frozen=True)
class LabelSchema:
    """Ordered class identifiers; index 0 is the normal class.

    With ``binary_mode`` every non-normal class name maps to label 1.
    """

    class_names: tuple[str, ...]
    binary_mode: bool = False

    def __post_init__(self):
        names = tuple(str(n) for n in self.class_names)
        object.__setattr__(self, "class_names", names)
        if not names:
            raise ValueError("label schema needs at least one class")
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate class names in {names}")

    @property
    def num_classes(self) -> int:
        if self.binary_mode:
            return 2
        return len(self.class_names)

    @property
    def display_names(self) -> tuple[str, ...]:
        if self.binary_mode:
            return (self.class_names[0], "anomalous")
        return self.class_names

    def index(self, name: str) -> int:
        try:
            i = self.class_names.index(str(name))
        except ValueError:
            raise KeyError(f"unknown class label {name!r}") from None
        if self.binary_mode:
            return 0 if i == 0 else 1
        return i

    def to_dict(self) -> dict:
        return {"class_names": list(self.class_names), "binary_mode": self.binary_mode}

    @classmethod
    def from_dict(cls, d: dict) -> "LabelSchema":
        return cls(tuple(d["class_names"]), bool(d.get("binary_mode", False)))


@dataclass
class GraphSnapshot:
    """One (A, X, C) graph for a time window.

    ``A`` is binary for real and synthetic snapshots; noisy snapshots keep the
    real-valued adjacency pre-matrix that the generator downsamples later.
    Rows at or beyond ``active_nodes`` are padding.
    """

    A: np.ndarray
    X: np.ndarray
    C: np.ndarray
    active_nodes: int
    provenance: Provenance = Provenance.REAL

    def __post_init__(self):
        self.A = np.ascontiguousarray(self.A, dtype=np.float32)
        self.X = np.ascontiguousarray(self.X, dtype=np.float32)
        self.C = np.ascontiguousarray(self.C, dtype=np.int64)
        self.provenance = Provenance(self.provenance)
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise ValueError(f"adjacency must be square, got {self.A.shape}")
        if self.X.ndim != 2 or self.X.shape[0] != n:
            raise ValueError(f"feature matrix shape {self.X.shape} does not match N={n}")
        if self.C.shape != (n,):
            raise ValueError(f"label vector shape {self.C.shape} does not match N={n}")
        if not 0 <= self.active_nodes <= n:
            raise ValueError(f"active_nodes={self.active_nodes} outside [0, {n}]")
        if self.provenance is not Provenance.NOISY and not _is_binary(self.A):
            raise ValueError("adjacency entries must be 0 or 1")

    @property
    def num_nodes(self) -> int:
        return self.A.shape[0]

    @property
    def num_features(self) -> int:
        return self.X.shape[1]

    @property
    def active_labels(self) -> np.ndarray:
        return self.C[: self.active_nodes]

    @property
    def active_features(self) -> np.ndarray:
        return self.X[: self.active_nodes]

    def equals(self, other: "GraphSnapshot") -> bool:
        return (
            self.active_nodes == other.active_nodes
            and self.provenance == other.provenance
            and _bit_equal(self.A, other.A)
            and _bit_equal(self.X, other.X)
            and np.array_equal(self.C, other.C)
        )


@dataclass
class SnapshotDataset:
    snapshots: list[GraphSnapshot]
    num_features: int
    label_schema: LabelSchema
    normalization_table: list[tuple[float, float]] = field(default_factory=list)

    def __post_init__(self):
        self.snapshots = list(self.snapshots)
        sizes = {s.num_nodes for s in self.snapshots}
        if len(sizes) > 1:
            raise ValueError(f"snapshots disagree on N: {sorted(sizes)}")
        for s in self.snapshots:
            if s.num_features != self.num_features:
                raise ValueError(f"snapshot has F={s.num_features}, dataset declares F={self.num_features}")
            if s.C.size and s.C.max() >= self.label_schema.num_classes:
                raise ValueError("snapshot label outside the label schema")
        self.normalization_table = [(float(lo), float(hi)) for lo, hi in self.normalization_table]

    def __len__(self) -> int:
        return len(self.snapshots)

    def __iter__(self) -> Iterator[GraphSnapshot]:
        return iter(self.snapshots)

    def __getitem__(self, i: int) -> GraphSnapshot:
        return self.snapshots[i]

    @property
    def num_nodes(self) -> int:
        if not self.snapshots:
            raise ValueError("empty dataset has no node count")
        return self.snapshots[0].num_nodes

    @property
    def num_classes(self) -> int:
        return self.label_schema.num_classes

    def replace(self, snapshots: Sequence[GraphSnapshot]) -> "SnapshotDataset":
        return SnapshotDataset(list(snapshots), self.num_features, self.label_schema, list(self.normalization_table))

    def active_labels(self) -> np.ndarray:
        if not self.snapshots:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([s.active_labels for s in self.snapshots])

    def active_features(self) -> np.ndarray:
        if not self.snapshots:
            return np.zeros((0, self.num_features), dtype=np.float32)
        return np.concatenate([s.active_features for s in self.snapshots], axis=0)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.active_labels(), minlength=self.num_classes)

    def equals(self, other: "SnapshotDataset") -> bool:
        return (
            self.num_features == other.num_features
            and self.label_schema == other.label_schema
            and self.normalization_table == other.normalization_table
            and len(self) == len(other)
            and all(a.equals(b) for a, b in zip(self.snapshots, other.snapshots))
        )


@dataclass
class DensityStats:
    per_snapshot_density: list[float]
    mean_density: float


def _is_binary(a: np.ndarray) -> bool:
    return bool(np.all((a == 0) | (a == 1)))


def _bit_equal(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()


def measure_density(A) -> float:
    """Fraction of non-zero entries, nnz(A) / N^2."""
    a = np.asarray(A)
    if not _is_binary(a):
        raise ValueError("density is defined for binary adjacency matrices")
    return float(np.count_nonzero(a)) / a.size


def density_stats(snapshots: Sequence[GraphSnapshot] | SnapshotDataset) -> DensityStats:
    dens = [measure_density(s.A) for s in snapshots]
    mean = math.fsum(dens) / len(dens) if dens else 0.0
    return DensityStats(dens, mean)


def sample_noise_graph(
    num_nodes: int,
    num_features: int,
    label_schema: LabelSchema,
    density_hint: float = 0.0,
    seed: int | np.random.Generator | None = None,
    law: str = "uniform",
) -> GraphSnapshot:
    """Draw a noisy graph G_o.

    ``A`` holds i.i.d. uniform [0, 1) scores rather than edges; binarisation to
    the target density happens in the generator. ``density_hint`` is carried
    for validation only. Pass an ``np.random.Generator`` to continue a stream.
    """
    if num_nodes < 1 or num_features < 1:
        raise ValueError(f"invalid noise graph shape N={num_nodes}, F={num_features}")
    if not 0.0 <= density_hint <= 1.0:
        raise ValueError(f"density_hint must lie in [0, 1], got {density_hint}")
    if law != "uniform":
        raise ValueError(f"unsupported noise law {law!r}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    X = rng.random((num_nodes, num_features), dtype=np.float32)
    A = rng.random((num_nodes, num_nodes), dtype=np.float32)
    C = rng.integers(0, label_schema.num_classes, size=num_nodes)
    return GraphSnapshot(A, X, C, num_nodes, Provenance.NOISY)


def split_dataset(ds: SnapshotDataset, train_fraction: float, seed: int) -> tuple[SnapshotDataset, SnapshotDataset]:
    """Seeded shuffle split; the training part gets round(fraction * len) snapshots."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    if len(ds) < 2:
        raise ValueError("need at least 2 snapshots to split")
    n_train = min(max(int(round(train_fraction * len(ds))), 1), len(ds) - 1)
    order = np.random.default_rng(seed).permutation(len(ds))
    train_idx = sorted(order[:n_train].tolist())
    test_idx = sorted(order[n_train:].tolist())
    return ds.replace([ds[i] for i in train_idx]), ds.replace([ds[i] for i in test_idx])


# --- container -------------------------------------------------------------
#
# layout (little-endian):
#   6 bytes  b"CGGMDS"
#   1 byte   format version as ASCII digit ("1")
#   4 bytes  uint32 header length H
#   H bytes  UTF-8 JSON header (sorted keys)
#   per snapshot: A float32[N*N], X float32[N*F], C int32[N], all row-major


def _header(ds: SnapshotDataset) -> bytes:
    n = ds.num_nodes if len(ds) else 0
    meta = {
        "format_version": FORMAT_VERSION,
        "num_nodes": n,
        "num_features": ds.num_features,
        "snapshot_count": len(ds),
        "label_schema": ds.label_schema.to_dict(),
        "normalization_table": [list(p) for p in ds.normalization_table],
        "snapshots": [{"active_nodes": s.active_nodes, "provenance": s.provenance.value} for s in ds],
    }
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")


def dataset_to_bytes(ds: SnapshotDataset) -> bytes:
    header = _header(ds)
    parts = [MAGIC, str(FORMAT_VERSION).encode("ascii"), struct.pack("<I", len(header)), header]
    for s in ds:
        parts.append(s.A.astype("<f4").tobytes())
        parts.append(s.X.astype("<f4").tobytes())
        parts.append(s.C.astype("<i4").tobytes())
    return b"".join(parts)


def save_dataset(ds: SnapshotDataset, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dataset_to_bytes(ds))
    return path


def dataset_from_bytes(raw: bytes) -> SnapshotDataset:
    if len(raw) < 11 or raw[:6] != MAGIC:
        raise CorruptContainerError("missing CGGMDS magic bytes")
    version = raw[6:7]
    if version != str(FORMAT_VERSION).encode("ascii"):
        raise VersionMismatchError(f"container version {version!r}, reader supports {FORMAT_VERSION}")
    (hlen,) = struct.unpack("<I", raw[7:11])
    if 11 + hlen > len(raw):
        raise CorruptContainerError("header extends past end of file")
    try:
        meta = json.loads(raw[11 : 11 + hlen].decode("utf-8"))
        n = int(meta["num_nodes"])
        f = int(meta["num_features"])
        count = int(meta["snapshot_count"])
        schema = LabelSchema.from_dict(meta["label_schema"])
        table = [tuple(p) for p in meta["normalization_table"]]
        snap_meta = meta["snapshots"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CorruptContainerError(f"unreadable header: {exc}") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise VersionMismatchError(f"header declares version {meta.get('format_version')}")
    if len(snap_meta) != count or (table and len(table) != f) or n < 0 or f < 1:
        raise ShapeMismatchError("header shape fields are inconsistent")

    block = 4 * (n * n + n * f + n)
    body = raw[11 + hlen :]
    if len(body) < block * count:
        raise CorruptContainerError(f"payload truncated: {len(body)} bytes, expected {block * count}")
    if len(body) > block * count:
        raise ShapeMismatchError(f"payload has {len(body) - block * count} unexpected trailing bytes")

    snaps = []
    off = 0
    for sm in snap_meta:
        A = np.frombuffer(body, "<f4", n * n, off).reshape(n, n).astype(np.float32)
        off += 4 * n * n
        X = np.frombuffer(body, "<f4", n * f, off).reshape(n, f).astype(np.float32)
        off += 4 * n * f
        C = np.frombuffer(body, "<i4", n, off).astype(np.int64)
        off += 4 * n
        snaps.append(GraphSnapshot(A, X, C, int(sm["active_nodes"]), Provenance(sm["provenance"])))
    return SnapshotDataset(snaps, f, schema, table)


def load_dataset(path) -> SnapshotDataset:
    return dataset_from_bytes(Path(path).read_bytes())
