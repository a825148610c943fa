"""Adversarial training of the conditional graph generator and class balancing."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .graph_store import (
    GraphSnapshot,
    LabelSchema,
    Provenance,
    SnapshotDataset,
    density_stats,
    sample_noise_graph,
)
from .model import ACTIVATIONS, Discriminator, Generator, downsample_adjacency, generator_forward

log = logging.getLogger(__name__)

GAN_MODES = ("wgan_clip", "vanilla")
OPTIMIZERS = ("adam", "rmsprop", "sgd", "momentum")


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, message: str):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch


@dataclass
class TrainingConfig:
    epochs: int = 200
    snapshots_to_generate: int = 1
    lambda_1: float = 1.0
    lambda_2: float = 10.0
    clip_bound: float = 0.01
    learning_rate: float = 5e-4
    critic_steps: int = 5
    seed: int = 0
    gan_mode: str = "wgan_clip"
    generator_optimizer: str = "adam"
    critic_optimizer: str = "sgd"
    heads: int = 1
    gcn_layers: int = 1
    critic_hidden: int = 16
    generator_activation: str = "identity"
    critic_activation: str = "relu"
    attention_scale: str = "head"
    noise_law: str = "uniform"
    target_density: float | None = None

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.lambda_1 < 0 or self.lambda_2 < 0:
            raise ValueError("loss weights must be non-negative")
        if self.lambda_1 + self.lambda_2 <= 0:
            raise ValueError("lambda_1 + lambda_2 must be positive")
        if self.clip_bound <= 0:
            raise ValueError("clip_bound must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.critic_steps < 1:
            raise ValueError("critic_steps must be >= 1")
        if self.gan_mode not in GAN_MODES:
            raise ValueError(f"gan_mode must be one of {GAN_MODES}")
        for name in ("generator_optimizer", "critic_optimizer"):
            if getattr(self, name) not in OPTIMIZERS:
                raise ValueError(f"{name} must be one of {OPTIMIZERS}")
        for name in ("generator_activation", "critic_activation"):
            if getattr(self, name) not in ACTIVATIONS:
                raise ValueError(f"{name} must be one of {tuple(ACTIVATIONS)}")
        if self.attention_scale not in ("head", "full"):
            raise ValueError("attention_scale must be 'head' or 'full'")
        if self.noise_law != "uniform":
            raise ValueError(f"unsupported noise law {self.noise_law!r}")
        if self.target_density is not None and not 0.0 <= self.target_density <= 1.0:
            raise ValueError("target_density must lie in [0, 1]")
        if self.heads < 1 or self.gcn_layers < 1 or self.critic_hidden < 1 or self.snapshots_to_generate < 1:
            raise ValueError("heads, gcn_layers, critic_hidden and snapshots_to_generate must be positive")


@dataclass(frozen=True)
class LossBreakdown:
    l_gan: float
    l_1: float
    l_2: float
    l_total: float


HISTORY_COLUMNS = ("epoch", "l_gan", "l_1", "l_2", "l_total")


def _check_nonempty(*seqs):
    for s in seqs:
        if s is None or len(s) == 0:
            raise ValueError("score lists must be non-empty")


def adversarial_loss(real_scores, fake_scores, gan_mode: str = "wgan_clip"):
    """Critic objective (to be maximised) on raw scores.

    vanilla: mean log sigmoid(real) + mean log(1 - sigmoid(fake));
    wgan_clip: mean(real) - mean(fake). Works on floats or tensors.
    """
    _check_nonempty(real_scores, fake_scores)
    r = torch.as_tensor(real_scores, dtype=torch.float64) if not torch.is_tensor(real_scores) else real_scores
    f = torch.as_tensor(fake_scores, dtype=torch.float64) if not torch.is_tensor(fake_scores) else fake_scores
    if gan_mode == "wgan_clip":
        out = r.mean() - f.mean()
    elif gan_mode == "vanilla":
        out = F.logsigmoid(r).mean() + F.logsigmoid(-f).mean()
    else:
        raise ValueError(f"unknown gan_mode {gan_mode!r}")
    return out if torch.is_tensor(real_scores) or torch.is_tensor(fake_scores) else float(out)


def generator_adversarial_term(fake_scores, gan_mode: str = "wgan_clip"):
    """The part of the adversarial objective the generator minimises."""
    _check_nonempty(fake_scores)
    f = fake_scores if torch.is_tensor(fake_scores) else torch.as_tensor(fake_scores, dtype=torch.float64)
    if gan_mode == "wgan_clip":
        out = -f.mean()
    elif gan_mode == "vanilla":
        out = F.logsigmoid(-f).mean()
    else:
        raise ValueError(f"unknown gan_mode {gan_mode!r}")
    return out if torch.is_tensor(fake_scores) else float(out)


def reconstruction_loss(X_r, X_g):
    """Mean absolute error between real and generated features."""
    if tuple(X_r.shape) != tuple(X_g.shape):
        raise ValueError(f"shape mismatch: {tuple(X_r.shape)} vs {tuple(X_g.shape)}")
    if torch.is_tensor(X_r) or torch.is_tensor(X_g):
        return (torch.as_tensor(X_r) - torch.as_tensor(X_g)).abs().mean()
    return float(np.mean(np.abs(np.asarray(X_r, dtype=np.float64) - np.asarray(X_g, dtype=np.float64))))


def latent_distance_loss(emb_real, emb_fake):
    """Mean squared difference between pooled critic embeddings."""
    if tuple(np.shape(emb_real)) != tuple(np.shape(emb_fake)):
        raise ValueError(f"shape mismatch: {tuple(np.shape(emb_real))} vs {tuple(np.shape(emb_fake))}")
    if torch.is_tensor(emb_real) or torch.is_tensor(emb_fake):
        return ((torch.as_tensor(emb_real) - torch.as_tensor(emb_fake)) ** 2).mean()
    d = np.asarray(emb_real, dtype=np.float64) - np.asarray(emb_fake, dtype=np.float64)
    return float(np.mean(d * d))


def total_generator_loss(l_gan, l_1, l_2, config: TrainingConfig | None = None, *, lambda_1=None, lambda_2=None):
    """Weighted generator objective lambda_1 * l_gan + lambda_2 * (l_1 + l_2).

    Tensors in, tensor out (for backprop); floats in, ``LossBreakdown`` out.
    """
    lam1 = config.lambda_1 if lambda_1 is None else lambda_1
    lam2 = config.lambda_2 if lambda_2 is None else lambda_2
    if lam1 < 0 or lam2 < 0:
        raise ValueError("loss weights must be non-negative")
    total = lam1 * l_gan + lam2 * (l_1 + l_2)
    if any(torch.is_tensor(v) for v in (l_gan, l_1, l_2)):
        return total
    return LossBreakdown(float(l_gan), float(l_1), float(l_2), float(total))


@torch.no_grad()
def clip_weights(disc: torch.nn.Module, c: float) -> torch.nn.Module:
    if c <= 0:
        raise ValueError("clip bound must be positive")
    for p in disc.parameters():
        p.clamp_(-c, c)
    return disc


# --- balancing ---------------------------------------------------------------


@dataclass
class BalancePlan:
    per_class_generation_counts: dict[int, int]
    snapshots_needed: int
    nodes_per_snapshot: int

    @property
    def total_nodes(self) -> int:
        return sum(self.per_class_generation_counts.values())

    def condition_labels(self) -> list[np.ndarray]:
        """Label vectors (one per synthetic snapshot, last one possibly short)."""
        queue = np.concatenate(
            [np.full(k, c, dtype=np.int64) for c, k in sorted(self.per_class_generation_counts.items()) if k > 0]
            or [np.zeros(0, dtype=np.int64)]
        )
        n = self.nodes_per_snapshot
        return [queue[i : i + n] for i in range(0, len(queue), n)]


def make_balance_plan(real: SnapshotDataset, target: str | Mapping[int, float] = "uniform") -> BalancePlan:
    """Per-class node deficits relative to a uniform or proportional target."""
    counts = real.class_counts()
    k = len(counts)
    n = real.num_nodes
    if isinstance(target, str):
        if target != "uniform":
            raise ValueError(f"unknown balance target {target!r}")
        if (counts > 0).sum() <= 1:
            log.warning("dataset has a single populated class; nothing to balance")
            return BalancePlan({c: 0 for c in range(k)}, 0, n)
        gen = counts.max() - counts
    else:
        props = np.array([float(target.get(c, 0.0)) for c in range(k)])
        if np.any(props < 0) or props.sum() <= 0:
            raise ValueError("target proportions must be non-negative and not all zero")
        props = props / props.sum()
        with np.errstate(divide="ignore"):
            need = np.where(props > 0, counts / np.where(props > 0, props, 1.0), 0.0)
        if np.any((props == 0) & (counts > 0)):
            raise ValueError("a class with zero target proportion already has nodes")
        total = need.max()
        gen = np.maximum(np.ceil(total * props - 1e-9).astype(np.int64) - counts, 0)
    plan = {c: int(g) for c, g in enumerate(gen)}
    return BalancePlan(plan, math.ceil(sum(plan.values()) / n), n)


# --- training ----------------------------------------------------------------


@dataclass
class TrainResult:
    generator: Generator
    discriminator: Discriminator
    history: list[LossBreakdown]
    critic_gaps: list[float] = field(default_factory=list)
    rho: float = 0.0


def _make_optimizer(name: str, params, lr: float):
    if name == "adam":
        return torch.optim.Adam(params, lr=lr, betas=(0.5, 0.999))
    if name == "rmsprop":
        return torch.optim.RMSprop(params, lr=lr)
    if name == "sgd":
        return torch.optim.SGD(params, lr=lr)
    if name == "momentum":
        return torch.optim.SGD(params, lr=lr, momentum=0.9)
    raise ValueError(f"unknown optimizer {name!r}")


def build_models(num_features: int, num_classes: int, config: TrainingConfig) -> tuple[Generator, Discriminator]:
    g = torch.Generator().manual_seed(config.seed)
    gen = Generator(
        num_features, num_classes, config.heads, config.gcn_layers, config.generator_activation, config.attention_scale, g
    )
    disc = Discriminator(
        num_features,
        num_classes,
        config.heads,
        config.gcn_layers,
        config.critic_hidden,
        config.critic_activation,
        config.attention_scale,
        g,
    )
    clip_weights(disc, config.clip_bound)
    return gen, disc


def _critic_loss(d_real, d_fake, gan_mode):
    return -adversarial_loss(d_real.reshape(1), d_fake.reshape(1), gan_mode)


def train(
    real: SnapshotDataset,
    config: TrainingConfig,
    on_critic_step: Callable[[Discriminator], None] | None = None,
) -> TrainResult:
    """Alternate critic and generator updates, one real snapshot per batch.

    Each batch draws ``critic_steps`` fresh noise graphs for the critic (clipping
    after every step), then ``snapshots_to_generate`` more whose generator
    losses are averaged into a single generator step. Fake samples are
    conditioned on the labels of the paired real snapshot.
    """
    if len(real) == 0:
        raise ValueError("cannot train on an empty dataset")
    rho = config.target_density if config.target_density is not None else density_stats(real).mean_density
    gen, disc = build_models(real.num_features, real.num_classes, config)
    history: list[LossBreakdown] = []
    gaps: list[float] = []
    if config.epochs == 0:
        return TrainResult(gen, disc, history, gaps, rho)

    rng = np.random.default_rng(config.seed)
    opt_g = _make_optimizer(config.generator_optimizer, gen.parameters(), config.learning_rate)
    opt_d = _make_optimizer(config.critic_optimizer, disc.parameters(), config.learning_rate)
    n, f = real.num_nodes, real.num_features
    schema = real.label_schema
    tensors = [(torch.from_numpy(s.A), torch.from_numpy(s.X), torch.from_numpy(s.C), s.active_nodes) for s in real]

    for epoch in range(config.epochs):
        sums = np.zeros(3)
        gap_sum = 0.0
        order = rng.permutation(len(real))
        for idx in order:
            A_r, X_r, C_r, m = tensors[idx]
            for _ in range(config.critic_steps):
                noise = sample_noise_graph(n, f, schema, rho, rng, config.noise_law)
                with torch.no_grad():
                    A_g, X_g = gen(noise.A, noise.X, C_r, rho)
                    X_g = _mask_rows(X_g, m)
                d_real, _ = disc(A_r, X_r, disc.embed(C_r), m)
                d_fake, _ = disc(A_g, X_g, disc.embed(C_r), m)
                loss_d = _critic_loss(d_real, d_fake, config.gan_mode)
                opt_d.zero_grad()
                loss_d.backward()
                opt_d.step()
                clip_weights(disc, config.clip_bound)
                if on_critic_step is not None:
                    on_critic_step(disc)
            gap_sum += float(d_real.detach() - d_fake.detach())

            # the generator step averages over snapshots_to_generate noisy graphs
            parts = []
            for _ in range(config.snapshots_to_generate):
                noise = sample_noise_graph(n, f, schema, rho, rng, config.noise_law)
                parts.append(generator_objective(gen, disc, (A_r, X_r, C_r, m), noise, rho, config))
            k = len(parts)
            loss_g = sum(p[0] for p in parts) / k
            l_gan, l_1, l_2 = (sum(p[1][j] for p in parts) / k for j in range(3))
            opt_g.zero_grad()
            loss_g.backward()
            opt_g.step()
            sums += [l_gan.item(), l_1.item(), l_2.item()]

        means = sums / len(real)
        entry = total_generator_loss(*means.tolist(), config)
        if not all(math.isfinite(v) for v in asdict(entry).values()):
            raise DivergenceError(epoch, f"non-finite loss {entry}")
        history.append(entry)
        gaps.append(gap_sum / len(real))
        log.debug("epoch %d %s gap=%.3g", epoch, entry, gaps[-1])
    return TrainResult(gen, disc, history, gaps, rho)


def generator_objective(gen: Generator, disc: Discriminator, real_batch, noise: GraphSnapshot, rho: float, config: TrainingConfig):
    """Weighted generator loss for one real snapshot and one noisy graph.

    ``real_batch`` is ``(A_r, X_r, C_r, active_nodes)`` as tensors. Returns the
    differentiable total and the ``(l_gan, l_1, l_2)`` tensors.
    """
    A_r, X_r, C_r, m = real_batch
    dtype = gen.W_q.dtype
    A_g, X_g = gen(noise.A, torch.from_numpy(noise.X).to(dtype), C_r, rho)
    X_g = _mask_rows(X_g, m)
    d_fake, emb_fake = disc(A_g, X_g, disc.embed(C_r), m)
    with torch.no_grad():
        _, emb_real = disc(A_r.to(dtype), X_r.to(dtype), disc.embed(C_r), m)
    l_gan = generator_adversarial_term(d_fake.reshape(1), config.gan_mode)
    l_1 = reconstruction_loss(X_r[:m].to(dtype), X_g[:m])
    l_2 = latent_distance_loss(emb_real, emb_fake)
    return total_generator_loss(l_gan, l_1, l_2, config), (l_gan, l_1, l_2)


def _mask_rows(X: torch.Tensor, m: int) -> torch.Tensor:
    if m >= X.shape[0]:
        return X
    keep = (torch.arange(X.shape[0]) < m).to(X.dtype)[:, None]
    return X * keep


def history_to_csv(history: Sequence[LossBreakdown]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_COLUMNS)
    for e, h in enumerate(history):
        w.writerow([e, repr(h.l_gan), repr(h.l_1), repr(h.l_2), repr(h.l_total)])
    return buf.getvalue()


def write_history(path, history: Sequence[LossBreakdown]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(history_to_csv(history))
    return path


# --- generation --------------------------------------------------------------


def generate_snapshots(
    gen: Generator,
    label_vectors: Sequence[np.ndarray],
    num_nodes: int,
    schema: LabelSchema,
    rho: float,
    seed: int,
):
    """One synthetic snapshot per label vector; short vectors leave padded rows."""
    rng = np.random.default_rng(seed)
    out = []
    for labels in label_vectors:
        m = len(labels)
        full = np.zeros(num_nodes, dtype=np.int64)
        full[:m] = labels
        noise = sample_noise_graph(num_nodes, gen.num_features, schema, rho, rng)
        out.append(generator_forward(noise, full, gen, rho, active_nodes=m))
    return out


def generate_balanced_dataset(
    real: SnapshotDataset, gen: Generator, plan: BalancePlan, seed: int, rho: float | None = None
) -> SnapshotDataset:
    """Append synthetic snapshots enacting ``plan`` to the real ones."""
    if plan.total_nodes == 0:
        return real
    if rho is None:
        rho = density_stats(real).mean_density
    synth = generate_snapshots(gen, plan.condition_labels(), real.num_nodes, real.label_schema, rho, seed)
    return real.replace(list(real.snapshots) + synth)


def generate_like(real: SnapshotDataset, gen: Generator, seed: int, rho: float | None = None) -> SnapshotDataset:
    """Synthetic twin of ``real``: one snapshot per real snapshot with the same active labels."""
    if rho is None:
        rho = density_stats(real).mean_density
    labels = [s.active_labels for s in real]
    return real.replace(generate_snapshots(gen, labels, real.num_nodes, real.label_schema, rho, seed))


def noise_like(real: SnapshotDataset, seed: int) -> SnapshotDataset:
    """Pure-noise baseline with matched labels; adjacency binarised at the real density."""
    rho = density_stats(real).mean_density
    rng = np.random.default_rng(seed)
    out = []
    for s in real:
        noise = sample_noise_graph(real.num_nodes, real.num_features, real.label_schema, rho, rng)
        out.append(GraphSnapshot(downsample_adjacency(noise.A, rho), noise.X, s.C, s.active_nodes, Provenance.SYNTHETIC))
    return real.replace(out)
