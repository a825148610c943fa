"""Distribution distances between real and synthetic node features."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .graph_store import SnapshotDataset


def _sample(x, name) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64).ravel()
    if a.size == 0:
        raise ValueError(f"{name} is empty")
    return a


def _ecdfs(a: np.ndarray, b: np.ndarray):
    a = np.sort(a)
    b = np.sort(b)
    grid = np.concatenate([a, b])
    grid.sort(kind="mergesort")
    fa = np.searchsorted(a, grid, side="right") / a.size
    fb = np.searchsorted(b, grid, side="right") / b.size
    return grid, fa, fb


def wasserstein_1d(sample_a, sample_b) -> float:
    """Order-1 Wasserstein distance, the integral of |F_a - F_b| over the real line."""
    a = _sample(sample_a, "sample_a")
    b = _sample(sample_b, "sample_b")
    grid, fa, fb = _ecdfs(a, b)
    return float(np.sum(np.abs(fa[:-1] - fb[:-1]) * np.diff(grid)))


def ks_statistic(sample_a, sample_b) -> float:
    """Two-sample Kolmogorov-Smirnov statistic sup |F_a - F_b|."""
    a = _sample(sample_a, "sample_a")
    b = _sample(sample_b, "sample_b")
    _, fa, fb = _ecdfs(a, b)
    return float(np.max(np.abs(fa - fb)))


def median_bandwidth(a: np.ndarray, b: np.ndarray) -> float:
    pooled = np.concatenate([a, b], axis=0)
    if len(pooled) < 2:
        return 1.0
    med = float(np.median(pdist(pooled)))
    return med if med > 0 else 1.0


def mmd_rbf(sample_a, sample_b, bandwidth: float | None = None) -> float:
    """Biased (V-statistic) MMD with a Gaussian kernel, returned as sqrt(max(MMD^2, 0)).

    Without ``bandwidth`` the median pairwise distance of the pooled sample is used.
    """
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("MMD needs non-empty samples")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    sigma = median_bandwidth(a, b) if bandwidth is None else float(bandwidth)
    if sigma <= 0:
        raise ValueError("bandwidth must be positive")
    gamma = 1.0 / (2.0 * sigma * sigma)
    kaa = np.exp(-gamma * cdist(a, a, "sqeuclidean")).mean()
    kbb = np.exp(-gamma * cdist(b, b, "sqeuclidean")).mean()
    kab = np.exp(-gamma * cdist(a, b, "sqeuclidean")).mean()
    return float(np.sqrt(max(kaa + kbb - 2.0 * kab, 0.0)))


@dataclass
class FidelityReport:
    wasserstein_mean: float
    mmd: float
    ks_mean: float
    wasserstein_per_feature: list[float]
    ks_per_feature: list[float]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["feature", "wasserstein", "ks"])
        for i, (wd, ks) in enumerate(zip(self.wasserstein_per_feature, self.ks_per_feature)):
            w.writerow([i, repr(wd), repr(ks)])
        w.writerow(["mean", repr(self.wasserstein_mean), repr(self.ks_mean)])
        w.writerow(["mmd", repr(self.mmd), ""])
        return buf.getvalue()

    def summary(self) -> str:
        return (
            f"wasserstein {self.wasserstein_mean:.4f}\n"
            f"mmd         {self.mmd:.4f}\n"
            f"ks          {self.ks_mean:.4f}\n"
        )


def compare_features(real: np.ndarray, synthetic: np.ndarray, bandwidth: float | None = None) -> FidelityReport:
    real = np.asarray(real, dtype=np.float64)
    synthetic = np.asarray(synthetic, dtype=np.float64)
    if real.shape[1] != synthetic.shape[1]:
        raise ValueError(f"feature dimension mismatch: {real.shape[1]} vs {synthetic.shape[1]}")
    wd = [wasserstein_1d(real[:, j], synthetic[:, j]) for j in range(real.shape[1])]
    ks = [ks_statistic(real[:, j], synthetic[:, j]) for j in range(real.shape[1])]
    return FidelityReport(float(np.mean(wd)), mmd_rbf(real, synthetic, bandwidth), float(np.mean(ks)), wd, ks)


def compare_datasets(real: SnapshotDataset, synthetic: SnapshotDataset, bandwidth: float | None = None) -> FidelityReport:
    """Per-feature Wasserstein and KS plus joint MMD over active-node feature rows."""
    if real.num_features != synthetic.num_features:
        raise ValueError(f"feature dimension mismatch: {real.num_features} vs {synthetic.num_features}")
    return compare_features(real.active_features(), synthetic.active_features(), bandwidth)
