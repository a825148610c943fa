import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cggm.graph_store import LabelSchema, Provenance, measure_density, sample_noise_graph
from cggm.model import (
    Discriminator,
    Generator,
    discriminator_score,
    downsample_adjacency,
    gcn_layer,
    generator_forward,
    label_condition_embedding,
    load_checkpoint,
    multi_head_attention,
    save_checkpoint,
    synthesize_features,
)

T = torch.tensor
LABELS = LabelSchema(("normal", "dos", "worms"))


def dense_gcn_oracle(A, X, W, act):
    """Loop-level evaluation of sigma(D^-1/2 (A+I) D^-1/2 X W)."""
    n = A.shape[0]
    a_hat = [[A[i][j] + (1.0 if i == j else 0.0) for j in range(n)] for i in range(n)]
    deg = [sum(row) for row in a_hat]
    XW = X @ W
    out = np.zeros_like(XW)
    for i in range(n):
        for j in range(n):
            out[i] += a_hat[i][j] / math.sqrt(deg[i] * deg[j]) * XW[j]
    return {"relu": lambda v: np.maximum(v, 0), "identity": lambda v: v, "sigmoid": lambda v: 1 / (1 + np.exp(-v))}[act](out)


def test_gcn_examples():
    out = gcn_layer(T([[0.0]]), T([[0.7]]), T([[1.0]]), "identity")
    assert torch.allclose(out, T([[0.7]]))
    out = gcn_layer(T([[0.0, 1.0], [1.0, 0.0]]), T([[2.0], [4.0]]), T([[1.0]]), "identity")
    assert torch.allclose(out, T([[3.0], [3.0]]))
    assert torch.all(gcn_layer(torch.eye(3), torch.zeros(3, 2), torch.ones(2, 2), "relu") == 0)


def test_gcn_shape_mismatch():
    with pytest.raises(ValueError):
        gcn_layer(torch.zeros(2, 2), torch.zeros(3, 1), torch.ones(1, 1))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 8), st.integers(1, 4), st.integers(1, 4), st.sampled_from(["relu", "identity", "sigmoid"]), st.integers(0, 2**31 - 1))
def test_gcn_matches_dense_oracle(n, fin, fout, act, seed):
    rng = np.random.default_rng(seed)
    A = (rng.random((n, n)) < 0.4).astype(np.float64)
    X = rng.normal(size=(n, fin))
    W = rng.normal(size=(fin, fout))
    got = gcn_layer(torch.from_numpy(A), torch.from_numpy(X), torch.from_numpy(W), act).numpy()
    np.testing.assert_allclose(got, dense_gcn_oracle(A, X, W, act), atol=1e-5)


def test_attention_examples():
    X = T([[1.0, 2.0]])
    W = torch.eye(2)
    Z, w = multi_head_attention(X, W, W, W, 1)
    assert torch.allclose(w, T([[[1.0]]]))
    assert torch.allclose(Z, X)

    X = T([[1.0], [3.0]])
    zero = torch.zeros(1, 1)
    Z, w = multi_head_attention(X, zero, zero, torch.eye(1), 1)
    assert torch.allclose(w, torch.full((1, 2, 2), 0.5))
    assert torch.allclose(Z, T([[2.0], [2.0]]))


def test_attention_head_must_divide():
    X = torch.ones(3, 4)
    W = torch.eye(4)
    with pytest.raises(ValueError):
        multi_head_attention(X, W, W, W, 3)


def test_attention_scale_switch():
    g = torch.Generator().manual_seed(0)
    X = torch.randn(5, 4, generator=g)
    W = torch.randn(4, 4, generator=g)
    _, w_head = multi_head_attention(X, W, W, W, 2, "head")
    _, w_full = multi_head_attention(X, W, W, W, 2, "full")
    q = (X @ W).reshape(5, 2, 2).transpose(0, 1)
    logits = q @ q.transpose(1, 2)
    assert torch.allclose(w_head, torch.softmax(logits / math.sqrt(2), -1), atol=1e-6)
    assert torch.allclose(w_full, torch.softmax(logits / 2.0, -1), atol=1e-6)


def test_attention_masks_padding_keys():
    g = torch.Generator().manual_seed(1)
    X = torch.randn(4, 2, generator=g)
    W = torch.randn(2, 2, generator=g)
    _, w = multi_head_attention(X, W, W, W, 1, active_nodes=3)
    assert torch.all(w[:, :, 3] == 0)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 10), st.sampled_from([(4, 1), (4, 2), (4, 4), (6, 3)]), st.integers(0, 2**31 - 1))
def test_attention_rows_sum_to_one(n, fh, seed):
    f, h = fh
    g = torch.Generator().manual_seed(seed)
    X = torch.randn(n, f, generator=g) * 5
    Ws = [torch.randn(f, f, generator=g) for _ in range(3)]
    _, w = multi_head_attention(X, *Ws, h)
    assert w.shape == (h, n, n)
    assert torch.allclose(w.sum(-1), torch.ones(h, n), atol=1e-6)


def test_embedding_examples():
    C = torch.tensor([0, 1, 2])
    assert torch.all(label_condition_embedding(C, torch.zeros(3, 2), torch.zeros(2)) == 0)
    assert torch.all(label_condition_embedding(C, torch.zeros(3, 2), -torch.ones(2)) == 0)
    W = torch.randn(3, 2)
    rows = label_condition_embedding(torch.tensor([2, 2, 2]), W, torch.zeros(2))
    assert torch.equal(rows[0], rows[1]) and torch.equal(rows[1], rows[2])
    with pytest.raises(ValueError):
        label_condition_embedding(torch.tensor([3]), W, torch.zeros(2))


@given(st.permutations(list(range(6))))
def test_embedding_permutation_equivariant(perm):
    g = torch.Generator().manual_seed(0)
    W = torch.randn(3, 4, generator=g)
    b = torch.randn(4, generator=g)
    C = torch.tensor([0, 1, 2, 1, 0, 2])
    p = torch.tensor(perm)
    assert torch.equal(label_condition_embedding(C[p], W, b), label_condition_embedding(C, W, b)[p])
    assert torch.all(label_condition_embedding(C, W, b) >= 0)


def test_synthesize_examples():
    Z = torch.tensor([[-0.5, 1.5]])
    assert torch.equal(synthesize_features(Z, torch.zeros(1, 2)), torch.tensor([[0.0, 1.0]]))
    assert torch.allclose(synthesize_features(torch.full((2, 2), 0.5), torch.full((2, 2), 0.2)), torch.full((2, 2), 0.7))
    assert synthesize_features(T([[0.9]]), T([[0.9]])).item() == 1.0
    with pytest.raises(ValueError):
        synthesize_features(torch.zeros(2, 2), torch.zeros(2, 3))


def test_downsample_examples():
    pre = np.random.default_rng(0).permutation(16).reshape(4, 4).astype(float)
    assert downsample_adjacency(pre, 0.0).sum() == 0
    assert downsample_adjacency(pre, 1.0).sum() == 16
    got = downsample_adjacency(pre, 0.25)
    np.testing.assert_array_equal(got, (pre >= 12).astype(np.float32))


def test_downsample_ties_row_major():
    got = downsample_adjacency(np.ones((2, 2)), 0.5)
    np.testing.assert_array_equal(got, [[1, 1], [0, 0]])


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 12), st.floats(0, 1), st.floats(0, 1), st.integers(0, 2**31 - 1))
def test_downsample_density_and_monotone(n, r1, r2, seed):
    lo, hi = sorted((r1, r2))
    pre = np.random.default_rng(seed).random((n, n))
    a_lo = downsample_adjacency(pre, lo)
    a_hi = downsample_adjacency(pre, hi)
    # the implementation tolerates float noise of 1e-9 in rho * N^2
    assert measure_density(a_lo) == math.ceil(lo * n * n - 1e-9) / (n * n)
    assert np.all(a_lo <= a_hi)


def test_generator_forward_examples():
    g = Generator(4, 3, heads=2, generator=torch.Generator().manual_seed(0))
    noisy = sample_noise_graph(10, 4, LABELS, seed=5)
    labels = np.array([0, 1, 2, 0, 1, 2, 0, 1, 2, 0])
    a = generator_forward(noisy, labels, g, 0.2)
    b = generator_forward(noisy, labels, g, 0.2)
    assert a.equals(b)
    assert a.provenance is Provenance.SYNTHETIC
    assert a.X.min() >= 0 and a.X.max() <= 1
    assert measure_density(a.A) == math.ceil(0.2 * 100) / 100
    assert np.array_equal(a.C, labels)


def test_generator_forward_partial_is_masked():
    g = Generator(2, 2, generator=torch.Generator().manual_seed(0))
    noisy = sample_noise_graph(5, 2, LABELS, seed=0)
    s = generator_forward(noisy, np.ones(5, dtype=int), g, 0.5, active_nodes=3)
    assert s.active_nodes == 3
    assert np.all(s.A[3:] == 0) and np.all(s.A[:, 3:] == 0) and np.all(s.X[3:] == 0) and np.all(s.C[3:] == 0)


def _snapshot(seed=0, n=6, f=2):
    noisy = sample_noise_graph(n, f, LABELS, seed=seed)
    g = Generator(f, 3, generator=torch.Generator().manual_seed(seed))
    return generator_forward(noisy, noisy.C, g, 0.3)


def test_discriminator_zero_params_scores_zero():
    d = Discriminator(2, 3)
    with torch.no_grad():
        for p in d.parameters():
            p.zero_()
    snap = _snapshot()
    assert discriminator_score(snap, d.embed(snap.C), d) == 0.0


def test_discriminator_deterministic_and_linear_in_last_layer():
    d = Discriminator(2, 3, generator=torch.Generator().manual_seed(3))
    snap = _snapshot()
    with torch.no_grad():
        d.b_3.zero_()
        cs = d.embed(snap.C)
        s1 = discriminator_score(snap, cs, d)
        assert s1 == discriminator_score(snap, cs, d)
        d.W_3.mul_(2)
        s2 = discriminator_score(snap, cs, d)
    assert s1 != 0
    assert abs(s2 - 2 * s1) <= 1e-6 * max(1.0, abs(s1))


def test_discriminator_shape_mismatch():
    d = Discriminator(2, 3)
    snap = _snapshot()
    with pytest.raises(ValueError):
        discriminator_score(snap, torch.zeros(snap.num_nodes, 3), d)


def test_checkpoint_roundtrip(tmp_path):
    g = Generator(4, 2, heads=2, gcn_layers=2, generator=torch.Generator().manual_seed(0))
    d = Discriminator(4, 2, heads=2, gcn_layers=2, hidden=8, generator=torch.Generator().manual_seed(1))
    ck = load_checkpoint(save_checkpoint(tmp_path / "m.ckpt", g, d, 0.125, "vanilla"))
    assert ck.rho == 0.125 and ck.gan_mode == "vanilla"
    for a, b in ((g, ck.generator), (d, ck.discriminator)):
        sa, sb = a.state_dict(), b.state_dict()
        assert sa.keys() == sb.keys()
        assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert ck.generator.heads == 2 and ck.generator.residual == g.residual


def test_checkpoint_bad_magic(tmp_path):
    from cggm.model import CheckpointError, load_weights

    p = tmp_path / "x.ckpt"
    p.write_bytes(b"garbage")
    with pytest.raises(CheckpointError):
        load_weights(p)
