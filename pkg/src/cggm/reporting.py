"""Static report artifacts: t-SNE scatter plots and class-proportion tables."""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from sklearn.manifold import TSNE  # noqa: E402


def embed_tsne(features, seed: int = 0, perplexity: float = 30.0) -> np.ndarray:
    """2-D t-SNE coordinates; perplexity is capped below the sample count."""
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("t-SNE needs at least 2 samples")
    perp = min(float(perplexity), max((X.shape[0] - 1) / 3.0, 1.0))
    perp = min(perp, X.shape[0] - 1 - 1e-6)
    tsne = TSNE(n_components=2, perplexity=perp, init="pca", random_state=seed, method="exact" if len(X) < 200 else "barnes_hut")
    return tsne.fit_transform(X)


def emit_embedding_plot(
    features,
    labels,
    path,
    class_names: Sequence[str] | None = None,
    markers=None,
    seed: int = 0,
    perplexity: float = 30.0,
    title: str = "t-SNE of node features",
) -> tuple[np.ndarray, list[str]]:
    """Write a PNG scatter coloured by class; returns ``(coords, legend_labels)``.

    ``markers`` optionally splits points by a second key (e.g. real vs
    synthetic) drawn with different marker shapes.
    """
    labels = np.asarray(labels)
    if len(labels) != len(features):
        raise ValueError(f"{len(features)} feature rows but {len(labels)} labels")
    coords = embed_tsne(features, seed, perplexity)
    present = sorted(set(labels.tolist()))
    names = [class_names[c] if class_names is not None else str(c) for c in present]
    groups = [None] if markers is None else sorted(set(np.asarray(markers).tolist()))
    shapes = ["o", "^", "s", "x"]
    cmap = plt.get_cmap("tab10")

    fig, ax = plt.subplots(figsize=(6, 5))
    legend = []
    for gi, group in enumerate(groups):
        in_group = np.ones(len(labels), bool) if group is None else np.asarray(markers) == group
        for ci, (c, name) in enumerate(zip(present, names)):
            sel = in_group & (labels == c)
            if not sel.any():
                continue
            label = name if group is None else f"{name} ({group})"
            ax.scatter(coords[sel, 0], coords[sel, 1], s=10, alpha=0.7, color=cmap(ci % 10), marker=shapes[gi % len(shapes)], label=label)
            legend.append(label)
    ax.legend(loc="best", fontsize=8)
    ax.set_title(title)
    ax.set_xticks([])
    ax.set_yticks([])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return coords, legend


def proportions_csv(before: dict, after: dict, class_names: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "before", "after"])
    for c, name in enumerate(class_names):
        w.writerow([name, repr(float(before.get(c, 0.0))), repr(float(after.get(c, 0.0)))])
    return buf.getvalue()
