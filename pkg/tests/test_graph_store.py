import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cggm.graph_store import (
    CorruptContainerError,
    GraphSnapshot,
    LabelSchema,
    Provenance,
    ShapeMismatchError,
    SnapshotDataset,
    VersionMismatchError,
    dataset_from_bytes,
    dataset_to_bytes,
    density_stats,
    load_dataset,
    measure_density,
    sample_noise_graph,
    save_dataset,
    split_dataset,
)

LABELS = LabelSchema(("normal", "attack"))


def make_dataset(count=2, n=4, f=5, seed=0, provenance=Provenance.REAL):
    rng = np.random.default_rng(seed)
    snaps = []
    for _ in range(count):
        A = (rng.random((n, n)) < 0.4).astype(np.float32)
        np.fill_diagonal(A, 0)
        if provenance is Provenance.NOISY:
            A = rng.random((n, n)).astype(np.float32)
        snaps.append(GraphSnapshot(A, rng.random((n, f)), rng.integers(0, 2, n), n, provenance))
    return SnapshotDataset(snaps, f, LABELS, [(0.0, float(i + 1)) for i in range(f)])


def test_density_examples():
    assert measure_density(np.zeros((4, 4))) == 0.0
    assert measure_density(np.eye(4)) == 0.25
    A = np.zeros((3, 3))
    A[0, 1] = A[1, 2] = A[2, 0] = 1
    assert abs(measure_density(A) - 1 / 3) <= 1e-9


def test_density_rejects_non_binary():
    with pytest.raises(ValueError):
        measure_density(np.full((2, 2), 0.5))


def test_density_stats_mean():
    ds = make_dataset(count=5)
    stats = density_stats(ds)
    assert abs(stats.mean_density - np.mean(stats.per_snapshot_density)) <= 1e-12


def test_noise_determinism_and_support():
    a = sample_noise_graph(6, 3, LABELS, seed=3)
    b = sample_noise_graph(6, 3, LABELS, seed=3)
    assert a.equals(b)
    assert a.provenance is Provenance.NOISY
    big = sample_noise_graph(1000, 8, LABELS, seed=0)
    assert big.X.min() >= 0 and big.X.max() < 1
    assert 0.45 <= big.X.mean() <= 0.55
    assert not np.array_equal(sample_noise_graph(5, 2, LABELS, seed=0).X, sample_noise_graph(5, 2, LABELS, seed=1).X)


def test_noise_bad_shapes():
    with pytest.raises(ValueError):
        sample_noise_graph(0, 3, LABELS, seed=0)
    with pytest.raises(ValueError):
        sample_noise_graph(3, 0, LABELS, seed=0)


def test_split_examples():
    ds = make_dataset(count=10)
    tr, te = split_dataset(ds, 0.8, seed=1)
    assert (len(tr), len(te)) == (8, 2)
    tr2, te2 = split_dataset(ds, 0.8, seed=1)
    assert tr.equals(tr2) and te.equals(te2)
    ids = {id(s) for s in tr} | {id(s) for s in te}
    assert ids == {id(s) for s in ds}
    assert not ({id(s) for s in tr} & {id(s) for s in te})


def test_split_too_small():
    with pytest.raises(ValueError):
        split_dataset(make_dataset(count=1), 0.5, 0)


@pytest.mark.parametrize("prov", list(Provenance))
def test_roundtrip_all_provenance(tmp_path, prov):
    ds = make_dataset(count=2, f=5, provenance=prov)
    back = load_dataset(save_dataset(ds, tmp_path / "d.cggmds"))
    assert back.equals(ds)
    assert back.num_features == 5
    assert back[0].provenance is prov


def test_roundtrip_partial_snapshot():
    ds = make_dataset(count=1, n=4)
    s = ds[0]
    A = s.A.copy()
    A[3, :] = A[:, 3] = 0
    X = s.X.copy()
    X[3] = 0
    C = s.C.copy()
    C[3] = 0
    part = ds.replace([GraphSnapshot(A, X, C, 3, Provenance.SYNTHETIC)])
    assert dataset_from_bytes(dataset_to_bytes(part)).equals(part)


def test_truncated_file(tmp_path):
    raw = dataset_to_bytes(make_dataset())
    with pytest.raises(CorruptContainerError):
        dataset_from_bytes(raw[:-3])
    with pytest.raises(CorruptContainerError):
        dataset_from_bytes(raw[:9])


def test_bad_magic_and_version():
    raw = dataset_to_bytes(make_dataset())
    with pytest.raises(CorruptContainerError):
        dataset_from_bytes(b"XXXXXX" + raw[6:])
    with pytest.raises(VersionMismatchError):
        dataset_from_bytes(raw[:6] + b"9" + raw[7:])


def test_trailing_bytes_is_shape_error():
    raw = dataset_to_bytes(make_dataset())
    with pytest.raises(ShapeMismatchError):
        dataset_from_bytes(raw + b"\0\0\0\0")


def test_corrupt_header_json():
    raw = dataset_to_bytes(make_dataset())
    (hlen,) = struct.unpack("<I", raw[7:11])
    bad = raw[:11] + b"{" * hlen + raw[11 + hlen :]
    with pytest.raises(CorruptContainerError):
        dataset_from_bytes(bad)


def test_errors_are_distinct_types():
    assert len({CorruptContainerError, VersionMismatchError, ShapeMismatchError}) == 3
    assert not issubclass(CorruptContainerError, VersionMismatchError)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(1, 4), st.integers(0, 3), st.integers(0, 2**31 - 1))
def test_roundtrip_property(n, f, count, seed):
    rng = np.random.default_rng(seed)
    snaps = [
        GraphSnapshot((rng.random((n, n)) < 0.5).astype(np.float32), rng.random((n, f)), rng.integers(0, 2, n), n)
        for _ in range(count)
    ]
    ds = SnapshotDataset(snaps, f, LABELS, [])
    assert dataset_from_bytes(dataset_to_bytes(ds)).equals(ds)


def test_snapshot_validation():
    with pytest.raises(ValueError):
        GraphSnapshot(np.full((2, 2), 0.5), np.zeros((2, 1)), np.zeros(2), 2)
    with pytest.raises(ValueError):
        GraphSnapshot(np.zeros((2, 2)), np.zeros((3, 1)), np.zeros(2), 2)
    with pytest.raises(ValueError):
        GraphSnapshot(np.zeros((2, 2)), np.zeros((2, 1)), np.zeros(2), 3)


def test_label_schema_binary_mode():
    s = LabelSchema(("Normal", "DoS", "Worms"), binary_mode=True)
    assert s.num_classes == 2
    assert s.index("Worms") == 1 and s.index("Normal") == 0
    with pytest.raises(KeyError):
        s.index("Unknown")
