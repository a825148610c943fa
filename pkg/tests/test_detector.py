import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from cggm.detector import (
    DetectorConfig,
    NodeClassifier,
    backbone_forward,
    classification_metrics,
    evaluate_detector,
    load_detector,
    macro_f1,
    predict_from_logits,
    save_detector,
    train_detector,
)
from cggm.graph_store import GraphSnapshot, LabelSchema, SnapshotDataset

from test_model import dense_gcn_oracle

LABELS = LabelSchema(("normal", "attack"))


def tiny_dataset(count=3, n=5, f=3, seed=0, labels=None):
    rng = np.random.default_rng(seed)
    snaps = []
    for _ in range(count):
        A = (rng.random((n, n)) < 0.4).astype(np.float32)
        np.fill_diagonal(A, 0)
        C = rng.integers(0, 2, n) if labels is None else np.asarray(labels)
        snaps.append(GraphSnapshot(A, rng.random((n, f)), C, n))
    return SnapshotDataset(snaps, f, LABELS)


def test_zero_weights_zero_logits():
    for backbone in ("gcn", "graphsage"):
        m = NodeClassifier(3, 2, hidden=4, backbone=backbone)
        with torch.no_grad():
            for p in m.parameters():
                p.zero_()
        assert torch.all(backbone_forward(torch.rand(4, 3), torch.ones(4, 4), m) == 0)


def test_graphsage_isolated_node_uses_self_only():
    m = NodeClassifier(2, 2, hidden=4, backbone="graphsage", seed=1)
    X = torch.tensor([[0.2, 0.7], [0.9, 0.1], [0.4, 0.4]])
    A = torch.tensor([[0, 1, 0], [1, 0, 0], [0, 0, 0]], dtype=torch.float32)
    out = m(X, A)
    h = torch.relu(torch.cat([X[2], torch.zeros(2)]) @ m.W1)
    expected = torch.cat([h, torch.zeros(4)]) @ m.W2
    assert torch.allclose(out[2], expected, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_gcn_backbone_matches_dense_oracle(n, seed):
    rng = np.random.default_rng(seed)
    m = NodeClassifier(3, 2, hidden=5, seed=seed % 1000).double()
    A = (rng.random((n, n)) < 0.4).astype(np.float64)
    X = rng.random((n, 3))
    W1 = m.W1.detach().numpy()
    W2 = m.W2.detach().numpy()
    expected = dense_gcn_oracle(A, dense_gcn_oracle(A, X, W1, "relu"), W2, "identity")
    got = m(torch.from_numpy(X), torch.from_numpy(A)).detach().numpy()
    np.testing.assert_allclose(got, expected, atol=1e-5)


def test_shape_mismatch():
    m = NodeClassifier(3, 2)
    with pytest.raises(ValueError):
        m(torch.zeros(4, 2), torch.zeros(4, 4))


def test_epochs_zero():
    res = train_detector(tiny_dataset(), DetectorConfig(epochs=0))
    assert res.history == []


def test_constant_target_learned():
    ds = tiny_dataset(count=1, labels=[0, 0, 0, 0, 0])
    res = train_detector(ds, DetectorConfig(epochs=100, seed=0))
    assert len(res.history) == 100
    assert res.history[-1] < 0.1


def test_history_recomputed_from_logits():
    ds = tiny_dataset(count=4)
    res = train_detector(ds, DetectorConfig(epochs=5, seed=3), record_logits=True)
    for epoch, entries in enumerate(res.logits):
        losses = []
        for idx, logits in entries:
            s = ds[idx]
            m = s.active_nodes
            losses.append(F.cross_entropy(torch.from_numpy(logits[:m]).double(), torch.from_numpy(s.C[:m])).item())
        assert abs(np.mean(losses) - res.history[epoch]) <= 1e-6


def test_training_deterministic():
    ds = tiny_dataset()
    a = train_detector(ds, DetectorConfig(epochs=3, seed=4))
    b = train_detector(ds, DetectorConfig(epochs=3, seed=4))
    assert a.history == b.history


def test_predict_examples():
    assert predict_from_logits([[0.1, 0.9]]).tolist() == [1]
    assert predict_from_logits([[0.5, 0.5]]).tolist() == [0]
    assert predict_from_logits([[0.1, 0.9], [0.2, 0.8]], active_nodes=1).tolist() == [1, 0]


@given(st.lists(st.lists(st.floats(-5, 5), min_size=3, max_size=3), min_size=1, max_size=6), st.floats(-100, 100))
def test_predict_shift_invariant(rows, shift):
    # integer-valued shifts avoid float rounding creating artificial ties
    shift = float(round(shift))
    logits = np.round(np.array(rows), 3)
    assert np.array_equal(predict_from_logits(logits), predict_from_logits(logits + shift))


def test_metrics_examples():
    perfect = classification_metrics([0, 1, 1, 0], [0, 1, 1, 0], 2)
    assert (perfect.accuracy, perfect.recall, perfect.precision, perfect.f1, perfect.far) == (1, 1, 1, 1, 0)
    r = classification_metrics([1, 0, 1, 0], [1, 0, 0, 0], 2)
    assert r.accuracy == 0.75 and r.recall == 0.5 and r.precision == 1.0 and r.far == 0
    assert abs(r.f1 - 2 / 3) <= 1e-3
    assert classification_metrics([0, 0, 1], [1, 1, 1], 2).far == 1.0
    with pytest.raises(ValueError):
        classification_metrics([0, 1], [0], 2)


def test_zero_denominator_flagged():
    r = classification_metrics([0, 0], [0, 0], 2)
    assert r.recall == 0 and r.precision == 0
    assert "recall" in r.undefined and "precision" in r.undefined


def _recompute(cm):
    k = len(cm)
    total = cm.sum()
    rows = []
    for c in range(k):
        tp = cm[c, c]
        fn = cm[c].sum() - tp
        fp = cm[:, c].sum() - tp
        tn = total - tp - fn - fp
        rec = tp / (tp + fn) if tp + fn else 0.0
        prec = tp / (tp + fp) if tp + fp else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        far = fp / (fp + tn) if fp + tn else 0.0
        rows.append((rec, prec, f1, far))
    return np.trace(cm) / total, rows


@settings(max_examples=80, deadline=None)
@given(st.integers(2, 4), st.integers(1, 40), st.integers(0, 2**31 - 1))
def test_metrics_consistent_with_confusion(k, n, seed):
    rng = np.random.default_rng(seed)
    y_true = rng.integers(0, k, n)
    y_pred = rng.integers(0, k, n)
    rep = classification_metrics(y_true, y_pred, k)
    cm = rep.confusion_matrix
    assert cm.sum() == n
    assert np.array_equal(cm.sum(axis=1), np.bincount(y_true, minlength=k))
    acc, rows = _recompute(cm)
    assert abs(rep.accuracy - acc) <= 1e-12
    if k == 2:
        expected = rows[1]
    else:
        expected = tuple(np.mean([r[i] for r in rows]) for i in range(4))
    got = (rep.recall, rep.precision, rep.f1, rep.far)
    assert all(abs(a - b) <= 1e-12 for a, b in zip(got, expected))
    assert abs(macro_f1(rep) - np.mean([r[2] for r in rows])) <= 1e-12


def test_report_outputs(tmp_path):
    rep = classification_metrics([0, 1, 1], [0, 1, 0], 2, ["normal", "attack"])
    rep.write(tmp_path, "detection")
    lines = (tmp_path / "detection.csv").read_text().splitlines()
    assert lines[0].startswith("class,support") and lines[-1].startswith("aggregate,3")
    assert (tmp_path / "detection_confusion.csv").read_text().splitlines()[1] == "normal,1,0"
    assert "accuracy" in (tmp_path / "detection_summary.txt").read_text()


def test_detector_checkpoint_roundtrip(tmp_path):
    ds = tiny_dataset()
    model = train_detector(ds, DetectorConfig(backbone="graphsage", hidden=8, epochs=2)).model
    back = load_detector(save_detector(tmp_path / "det.ckpt", model))
    assert back.backbone == "graphsage"
    assert all(torch.equal(a, b) for a, b in zip(model.parameters(), back.parameters()))
    assert evaluate_detector(back, ds).accuracy == evaluate_detector(model, ds).accuracy
