"""Conditional graph generator and critic.

The generator maps a noisy graph to a synthetic one: the adjacency
pre-matrix is binarised to a target density, a GCN unit propagates the noise
features over that structure, multi-head self-attention mixes node
representations, and a ReLU label embedding is added so that each node's
features follow its requested class.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .graph_store import GraphSnapshot, Provenance

ACTIVATIONS = {
    "relu": torch.relu,
    "sigmoid": torch.sigmoid,
    "identity": lambda x: x,
}


def normalized_adjacency(A: torch.Tensor) -> torch.Tensor:
    """D^-1/2 (A + I) D^-1/2 with D the row degrees of A + I."""
    a_hat = A + torch.eye(A.shape[0], dtype=A.dtype, device=A.device)
    d_inv_sqrt = a_hat.sum(dim=1).rsqrt()
    return d_inv_sqrt[:, None] * a_hat * d_inv_sqrt[None, :]


def gcn_layer(A: torch.Tensor, X: torch.Tensor, W: torch.Tensor, activation: str = "relu", A_norm=None) -> torch.Tensor:
    if A.shape[0] != A.shape[1] or X.shape[0] != A.shape[0] or X.shape[1] != W.shape[0]:
        raise ValueError(f"shape mismatch: A {tuple(A.shape)}, X {tuple(X.shape)}, W {tuple(W.shape)}")
    if A_norm is None:
        A_norm = normalized_adjacency(A)
    return ACTIVATIONS[activation](A_norm @ (X @ W))


def multi_head_attention(X, W_q, W_k, W_v, heads: int, scale: str = "head", active_nodes: int | None = None):
    """Scaled dot-product self-attention over nodes, split into ``heads`` feature slices.

    Returns ``(Z, weights)`` where ``weights`` has shape (heads, N, N) and each
    row sums to one. ``scale="head"`` divides logits by sqrt(F/h),
    ``scale="full"`` by sqrt(F). Keys past ``active_nodes`` are masked out.
    """
    n, f = X.shape
    if heads < 1 or f % heads:
        raise ValueError(f"head count {heads} does not divide feature width {f}")
    d = f // heads
    q = (X @ W_q).reshape(n, heads, d).transpose(0, 1)
    k = (X @ W_k).reshape(n, heads, d).transpose(0, 1)
    v = (X @ W_v).reshape(n, heads, d).transpose(0, 1)
    denom = math.sqrt(d if scale == "head" else f)
    logits = q @ k.transpose(1, 2) / denom
    if active_nodes is not None and 0 < active_nodes < n:
        logits = logits.masked_fill(torch.arange(n) >= active_nodes, float("-inf"))
    weights = torch.softmax(logits, dim=-1)
    Z = (weights @ v).transpose(0, 1).reshape(n, f)
    return Z, weights


def label_condition_embedding(C: torch.Tensor, W_em: torch.Tensor, b_em: torch.Tensor) -> torch.Tensor:
    num_classes = W_em.shape[0]
    C = torch.as_tensor(C, dtype=torch.long)
    if C.numel() and (C.min() < 0 or C.max() >= num_classes):
        raise ValueError(f"label outside [0, {num_classes})")
    onehot = torch.nn.functional.one_hot(C, num_classes).to(W_em.dtype)
    return torch.relu(onehot @ W_em + b_em)


def synthesize_features(Z: torch.Tensor, C_star: torch.Tensor) -> torch.Tensor:
    if Z.shape != C_star.shape:
        raise ValueError(f"shape mismatch: {tuple(Z.shape)} vs {tuple(C_star.shape)}")
    return torch.clamp(Z + C_star, 0.0, 1.0)


def downsample_adjacency(A_pre, rho: float) -> np.ndarray:
    """Keep the ceil(rho * N^2) largest pre-matrix entries as edges.

    Ties are resolved in favour of the earlier row-major position, so the
    selected set grows monotonically with ``rho``.
    """
    a = np.asarray(A_pre, dtype=np.float64)
    # tolerance keeps float products such as 0.1 * 400 from rounding up
    k = math.ceil(rho * a.size - 1e-9)
    k = min(max(k, 0), a.size)
    flat = a.ravel()
    order = np.argsort(-flat, kind="stable")
    out = np.zeros(a.size, dtype=np.float32)
    out[order[:k]] = 1.0
    return out.reshape(a.shape)


def mask_padding(snapshot: GraphSnapshot) -> GraphSnapshot:
    """Zero rows and columns past ``active_nodes`` and reset their labels."""
    m = snapshot.active_nodes
    A = snapshot.A.copy()
    X = snapshot.X.copy()
    C = snapshot.C.copy()
    A[m:, :] = 0
    A[:, m:] = 0
    X[m:] = 0
    C[m:] = 0
    return GraphSnapshot(A, X, C, m, snapshot.provenance)


def _uniform(shape, bound, generator):
    return nn.Parameter(torch.empty(shape).uniform_(-bound, bound, generator=generator))


class Generator(nn.Module):
    def __init__(
        self,
        num_features: int,
        num_classes: int,
        heads: int = 1,
        gcn_layers: int = 1,
        gcn_activation: str = "identity",
        attention_scale: str = "head",
        generator: torch.Generator | None = None,
        residual: bool = True,
    ):
        super().__init__()
        f = num_features
        if heads < 1 or f % heads:
            raise ValueError(f"head count {heads} does not divide F={f}")
        self.num_features = f
        self.num_classes = num_classes
        self.heads = heads
        self.gcn_activation = gcn_activation
        self.attention_scale = attention_scale
        self.residual = residual
        bound = 1.0 / math.sqrt(f)
        self.W_gcn = nn.ParameterList([_uniform((f, f), bound, generator) for _ in range(gcn_layers)])
        self.W_q = _uniform((f, f), bound, generator)
        self.W_k = _uniform((f, f), bound, generator)
        self.W_v = _uniform((f, f), bound, generator)
        # non-negative start keeps every class/feature unit of the ReLU embedding alive
        self.W_em = nn.Parameter(torch.empty(num_classes, f).uniform_(0.0, 0.1, generator=generator))
        self.b_em = nn.Parameter(torch.zeros(f))

    def embed(self, C) -> torch.Tensor:
        return label_condition_embedding(C, self.W_em, self.b_em)

    def features(self, A: torch.Tensor, X: torch.Tensor, C) -> torch.Tensor:
        A_norm = normalized_adjacency(A)
        h = X
        for W in self.W_gcn:
            h = gcn_layer(A, h, W, self.gcn_activation, A_norm=A_norm)
        Z, _ = multi_head_attention(h, self.W_q, self.W_k, self.W_v, self.heads, self.attention_scale)
        if self.residual:
            # node-level variation survives the attention average only through this path
            Z = Z + h
        return synthesize_features(Z, self.embed(C))

    def forward(self, A_pre, X_o, C, rho: float):
        """Return ``(A_g, X_g)``; ``A_g`` is a constant binary tensor."""
        A_g = torch.from_numpy(downsample_adjacency(_to_numpy(A_pre), rho)).to(self.W_q.dtype)
        X_o = torch.as_tensor(X_o, dtype=self.W_q.dtype)
        return A_g, self.features(A_g, X_o, C)


def _to_numpy(a) -> np.ndarray:
    if isinstance(a, torch.Tensor):
        return a.detach().cpu().numpy()
    return np.asarray(a)


def generator_forward(
    noisy: GraphSnapshot, condition_labels, gen: Generator, rho: float, active_nodes: int | None = None
) -> GraphSnapshot:
    """Turn a noisy snapshot into a synthetic one carrying ``condition_labels``."""
    labels = np.asarray(condition_labels, dtype=np.int64)
    with torch.no_grad():
        A_g, X_g = gen(noisy.A, noisy.X, torch.from_numpy(labels), rho)
    snap = GraphSnapshot(
        A_g.numpy().astype(np.float32),
        X_g.numpy().astype(np.float32),
        labels,
        noisy.num_nodes,
        Provenance.SYNTHETIC,
    )
    if active_nodes is not None and active_nodes < snap.num_nodes:
        snap.active_nodes = active_nodes
        snap = mask_padding(snap)
    return snap


class Discriminator(nn.Module):
    """Critic mirroring the generator trunk on concat(X, C*), followed by three affine layers.

    Node representations are mean-pooled over active nodes. The output is an
    unbounded score; vanilla GAN mode applies the sigmoid inside the loss.
    """

    def __init__(
        self,
        num_features: int,
        num_classes: int,
        heads: int = 1,
        gcn_layers: int = 1,
        hidden: int = 16,
        gcn_activation: str = "relu",
        attention_scale: str = "head",
        generator: torch.Generator | None = None,
        residual: bool = True,
    ):
        super().__init__()
        f = num_features
        w = 2 * f
        if heads < 1 or w % heads:
            raise ValueError(f"head count {heads} does not divide trunk width {w}")
        self.num_features = f
        self.num_classes = num_classes
        self.heads = heads
        self.gcn_activation = gcn_activation
        self.attention_scale = attention_scale
        self.residual = residual
        b = 1.0 / math.sqrt(w)
        self.W_em = _uniform((num_classes, f), 1.0 / math.sqrt(num_classes), generator)
        self.b_em = _uniform((f,), 1.0 / math.sqrt(num_classes), generator)
        self.W_gcn = nn.ParameterList([_uniform((w, w), b, generator) for _ in range(gcn_layers)])
        self.W_q = _uniform((w, w), b, generator)
        self.W_k = _uniform((w, w), b, generator)
        self.W_v = _uniform((w, w), b, generator)
        bh = 1.0 / math.sqrt(hidden)
        self.W_1 = _uniform((w, hidden), b, generator)
        self.b_1 = _uniform((hidden,), b, generator)
        self.W_2 = _uniform((hidden, hidden), bh, generator)
        self.b_2 = _uniform((hidden,), bh, generator)
        self.W_3 = _uniform((hidden, 1), bh, generator)
        self.b_3 = _uniform((1,), bh, generator)

    def embed(self, C) -> torch.Tensor:
        return label_condition_embedding(C, self.W_em, self.b_em)

    def trunk(self, A, X, C_star, active_nodes: int | None = None) -> torch.Tensor:
        """Pooled graph embedding fed to the affine output stack."""
        A = torch.as_tensor(A, dtype=self.W_q.dtype)
        X = torch.as_tensor(X, dtype=self.W_q.dtype)
        if X.shape != C_star.shape:
            raise ValueError(f"shape mismatch: X {tuple(X.shape)} vs C* {tuple(C_star.shape)}")
        T = torch.cat([X, C_star], dim=1)
        A_norm = normalized_adjacency(A)
        h = T
        for W in self.W_gcn:
            h = gcn_layer(A, h, W, self.gcn_activation, A_norm=A_norm)
        m = h.shape[0] if active_nodes is None else max(int(active_nodes), 1)
        z, _ = multi_head_attention(h, self.W_q, self.W_k, self.W_v, self.heads, self.attention_scale, m)
        h = z + h if self.residual else z
        return h[:m].mean(dim=0)

    def head(self, pooled: torch.Tensor) -> torch.Tensor:
        return ((pooled @ self.W_1 + self.b_1) @ self.W_2 + self.b_2) @ self.W_3 + self.b_3

    def forward(self, A, X, C_star, active_nodes: int | None = None):
        """Return ``(score, pooled_embedding)``."""
        pooled = self.trunk(A, X, C_star, active_nodes)
        return self.head(pooled).squeeze(-1), pooled


def discriminator_score(snapshot: GraphSnapshot, C_star: torch.Tensor, disc: Discriminator) -> float:
    with torch.no_grad():
        score, _ = disc(snapshot.A, snapshot.X, C_star, snapshot.active_nodes)
    return float(score)


# --- checkpoints -------------------------------------------------------------
#
# layout (little-endian):
#   9 bytes  b"CGGMCKPT1"
#   4 bytes  uint32 header length H
#   H bytes  UTF-8 JSON header: {"meta": {...}, "tensors": [[name, shape], ...]}
#   float32 blocks, one per tensor in header order, row-major

CKPT_MAGIC = b"CGGMCKPT1"


class CheckpointError(ValueError):
    pass


def save_weights(path, state: dict[str, torch.Tensor], meta: dict, magic: bytes = CKPT_MAGIC) -> Path:
    names = list(state)
    header = {"meta": meta, "tensors": [[k, list(state[k].shape)] for k in names]}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        for k in names:
            fh.write(state[k].detach().cpu().numpy().astype("<f4").tobytes())
    return path


def load_weights(path, magic: bytes = CKPT_MAGIC) -> tuple[dict[str, torch.Tensor], dict]:
    raw = Path(path).read_bytes()
    if raw[: len(magic)] != magic:
        raise CheckpointError(f"{path}: not a {magic.decode()} checkpoint")
    off = len(magic)
    if len(raw) < off + 4:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<I", raw[off : off + 4])
    off += 4
    try:
        header = json.loads(raw[off : off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    off += hlen
    state = {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        if off + 4 * count > len(raw):
            raise CheckpointError(f"{path}: truncated tensor {name}")
        arr = np.frombuffer(raw, "<f4", count, off).reshape(shape).astype(np.float32)
        state[name] = torch.from_numpy(arr.copy())
        off += 4 * count
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return state, header["meta"]


@dataclass
class CGGMCheckpoint:
    generator: Generator
    discriminator: Discriminator
    rho: float
    gan_mode: str


def _model_meta(gen: Generator, disc: Discriminator, rho: float, gan_mode: str) -> dict:
    return {
        "num_features": gen.num_features,
        "num_classes": gen.num_classes,
        "heads": gen.heads,
        "gcn_layers": len(gen.W_gcn),
        "generator_activation": gen.gcn_activation,
        "discriminator_activation": disc.gcn_activation,
        "attention_scale": gen.attention_scale,
        "critic_hidden": disc.W_1.shape[1],
        "generator_residual": gen.residual,
        "discriminator_residual": disc.residual,
        "rho": rho,
        "gan_mode": gan_mode,
    }


def save_checkpoint(path, gen: Generator, disc: Discriminator, rho: float, gan_mode: str) -> Path:
    state = {f"generator.{k}": v for k, v in gen.state_dict().items()}
    state.update({f"discriminator.{k}": v for k, v in disc.state_dict().items()})
    return save_weights(path, state, _model_meta(gen, disc, rho, gan_mode))


def load_checkpoint(path) -> CGGMCheckpoint:
    state, meta = load_weights(path)
    gen = Generator(
        meta["num_features"],
        meta["num_classes"],
        meta["heads"],
        meta["gcn_layers"],
        meta["generator_activation"],
        meta["attention_scale"],
        residual=meta.get("generator_residual", True),
    )
    disc = Discriminator(
        meta["num_features"],
        meta["num_classes"],
        meta["heads"],
        meta["gcn_layers"],
        meta["critic_hidden"],
        meta["discriminator_activation"],
        meta["attention_scale"],
        residual=meta.get("discriminator_residual", True),
    )
    gen.load_state_dict({k[len("generator.") :]: v for k, v in state.items() if k.startswith("generator.")})
    disc.load_state_dict({k[len("discriminator.") :]: v for k, v in state.items() if k.startswith("discriminator.")})
    return CGGMCheckpoint(gen, disc, float(meta["rho"]), meta["gan_mode"])
