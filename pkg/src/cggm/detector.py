"""GNN node classifiers (GCN / GraphSAGE) and classification metrics."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .graph_store import GraphSnapshot, SnapshotDataset
from .model import gcn_layer, load_weights, normalized_adjacency, save_weights

log = logging.getLogger(__name__)

DETECTOR_MAGIC = b"CGGMDET1"
BACKBONES = ("gcn", "graphsage")


class NodeClassifier(nn.Module):
    """Two-layer GNN producing per-node class logits.

    gcn: ReLU(Â X W1) then Â H W2 with the normalised filter of ``gcn_layer``.
    graphsage: h <- W [h || mean of out-neighbours], ReLU between layers;
    an isolated node aggregates a zero vector.
    """

    def __init__(self, num_features: int, num_classes: int, hidden: int = 64, backbone: str = "gcn", seed: int = 0):
        super().__init__()
        if backbone not in BACKBONES:
            raise ValueError(f"backbone must be one of {BACKBONES}")
        self.backbone = backbone
        self.num_features = num_features
        self.num_classes = num_classes
        self.hidden = hidden
        g = torch.Generator().manual_seed(seed)
        fan = 2 if backbone == "graphsage" else 1
        self.W1 = nn.Parameter(_glorot(fan * num_features, hidden, g))
        self.W2 = nn.Parameter(_glorot(fan * hidden, num_classes, g))

    def forward(self, X, A) -> torch.Tensor:
        X = torch.as_tensor(X, dtype=self.W1.dtype)
        A = torch.as_tensor(A, dtype=self.W1.dtype)
        if X.shape[1] != self.num_features or A.shape != (X.shape[0], X.shape[0]):
            raise ValueError(f"shape mismatch: X {tuple(X.shape)}, A {tuple(A.shape)}")
        if self.backbone == "gcn":
            A_norm = normalized_adjacency(A)
            h = gcn_layer(A, X, self.W1, "relu", A_norm=A_norm)
            return gcn_layer(A, h, self.W2, "identity", A_norm=A_norm)
        deg = A.sum(dim=1, keepdim=True)
        mean_op = A / deg.clamp(min=1.0)
        h = torch.relu(torch.cat([X, mean_op @ X], dim=1) @ self.W1)
        return torch.cat([h, mean_op @ h], dim=1) @ self.W2


def _glorot(fan_in, fan_out, g):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return torch.empty(fan_in, fan_out).uniform_(-bound, bound, generator=g)


def backbone_forward(X, A, model: NodeClassifier) -> torch.Tensor:
    return model(X, A)


@dataclass
class DetectorConfig:
    backbone: str = "gcn"
    hidden: int = 64
    epochs: int = 60
    learning_rate: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ValueError(f"backbone must be one of {BACKBONES}")
        if self.hidden < 1 or self.epochs < 0 or self.learning_rate <= 0:
            raise ValueError("hidden and learning_rate must be positive, epochs non-negative")


@dataclass
class DetectorResult:
    model: NodeClassifier
    history: list[float]
    logits: list[list[np.ndarray]] = field(default_factory=list)


def masked_cross_entropy(logits: torch.Tensor, labels: torch.Tensor, active_nodes: int) -> torch.Tensor:
    return F.cross_entropy(logits[:active_nodes], labels[:active_nodes])


def train_detector(dataset: SnapshotDataset, config: DetectorConfig, record_logits: bool = False) -> DetectorResult:
    """Cross-entropy training, one optimiser step per snapshot.

    The logged epoch loss is the mean of the per-snapshot losses evaluated
    before each step. Snapshot order is reshuffled every epoch from ``seed``.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train a detector on an empty dataset")
    model = NodeClassifier(dataset.num_features, dataset.num_classes, config.hidden, config.backbone, config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    data = [
        (torch.from_numpy(s.X), torch.from_numpy(s.A), torch.from_numpy(s.C), s.active_nodes)
        for s in dataset
        if s.active_nodes > 0
    ]
    history: list[float] = []
    recorded: list[list[np.ndarray]] = []
    for epoch in range(config.epochs):
        total = 0.0
        epoch_logits = []
        for i in rng.permutation(len(data)):
            X, A, C, m = data[i]
            logits = model(X, A)
            loss = masked_cross_entropy(logits, C, m)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
            if record_logits:
                epoch_logits.append((int(i), logits.detach().numpy().copy()))
        mean = total / len(data)
        if not math.isfinite(mean):
            raise FloatingPointError(f"detector loss became non-finite at epoch {epoch}")
        history.append(mean)
        if record_logits:
            recorded.append(epoch_logits)
    return DetectorResult(model, history, recorded)


def predict(model: NodeClassifier, snapshot: GraphSnapshot) -> np.ndarray:
    with torch.no_grad():
        logits = model(snapshot.X, snapshot.A).numpy()
    return predict_from_logits(logits, snapshot.active_nodes)


def predict_from_logits(logits, active_nodes: int | None = None) -> np.ndarray:
    """Row argmax (first maximum wins); rows past ``active_nodes`` become 0."""
    logits = np.asarray(logits)
    pred = np.argmax(logits, axis=1).astype(np.int64)
    if active_nodes is not None:
        pred[active_nodes:] = 0
    return pred


def collect_predictions(model: NodeClassifier, dataset: SnapshotDataset) -> tuple[np.ndarray, np.ndarray]:
    y_true, y_pred = [], []
    for s in dataset:
        y_true.append(s.active_labels)
        y_pred.append(predict(model, s)[: s.active_nodes])
    return np.concatenate(y_true), np.concatenate(y_pred)


# --- metrics -----------------------------------------------------------------


@dataclass
class DetectionReport:
    accuracy: float
    recall: float
    precision: float
    f1: float
    far: float
    per_class: list[dict]
    confusion_matrix: np.ndarray
    micro: dict = field(default_factory=dict)
    undefined: list[str] = field(default_factory=list)
    class_names: list[str] = field(default_factory=list)

    def summary(self) -> str:
        lines = [
            f"accuracy  {self.accuracy:.4f}",
            f"recall    {self.recall:.4f}",
            f"precision {self.precision:.4f}",
            f"f1        {self.f1:.4f}",
            f"far       {self.far:.4f}",
        ]
        if self.undefined:
            lines.append("zero-denominator metrics (reported as 0): " + ", ".join(self.undefined))
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "support", "accuracy", "recall", "precision", "f1", "far"])
        for row in self.per_class:
            w.writerow([row["class"], row["support"]] + [repr(row[k]) for k in ("accuracy", "recall", "precision", "f1", "far")])
        support = int(self.confusion_matrix.sum())
        w.writerow(["aggregate", support] + [repr(v) for v in (self.accuracy, self.recall, self.precision, self.f1, self.far)])
        return buf.getvalue()

    def confusion_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        names = self.class_names or [str(i) for i in range(len(self.confusion_matrix))]
        w.writerow(["true\\pred"] + names)
        for name, row in zip(names, self.confusion_matrix):
            w.writerow([name] + [int(v) for v in row])
        return buf.getvalue()

    def write(self, directory, stem: str) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / f"{stem}.csv").write_text(self.to_csv())
        (d / f"{stem}_confusion.csv").write_text(self.confusion_csv())
        (d / f"{stem}_summary.txt").write_text(self.summary())


def _ratio(num, den, name, undefined):
    if den == 0:
        undefined.append(name)
        return 0.0
    return num / den


def _f1(p, r):
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def classification_metrics(y_true, y_pred, num_classes: int, class_names=None) -> DetectionReport:
    """Binary metrics with class 1 positive, macro averages for more classes."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"length mismatch: {y_true.shape} vs {y_pred.shape}")
    if y_true.size == 0:
        raise ValueError("no samples to evaluate")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    total = int(cm.sum())
    undefined: list[str] = []
    per_class = []
    for c in range(num_classes):
        tp = int(cm[c, c])
        fn = int(cm[c].sum()) - tp
        fp = int(cm[:, c].sum()) - tp
        tn = total - tp - fn - fp
        u: list[str] = []
        rec = _ratio(tp, tp + fn, "recall", u)
        prec = _ratio(tp, tp + fp, "precision", u)
        far = _ratio(fp, fp + tn, "far", u)
        per_class.append(
            {
                "class": class_names[c] if class_names else str(c),
                "support": tp + fn,
                "accuracy": (tp + tn) / total,
                "recall": rec,
                "precision": prec,
                "f1": _f1(prec, rec),
                "far": far,
                "undefined": u,
            }
        )
    accuracy = float(np.trace(cm)) / total
    if num_classes == 2:
        pos = per_class[1]
        recall, precision, f1, far = pos["recall"], pos["precision"], pos["f1"], pos["far"]
        undefined = [f"{m}" for m in pos["undefined"]]
    else:
        recall = float(np.mean([r["recall"] for r in per_class]))
        precision = float(np.mean([r["precision"] for r in per_class]))
        f1 = float(np.mean([r["f1"] for r in per_class]))
        far = float(np.mean([r["far"] for r in per_class]))
        undefined = [f"{m}[{r['class']}]" for r in per_class for m in r["undefined"]]
    tp_sum = int(np.trace(cm))
    micro = {"precision": tp_sum / total, "recall": tp_sum / total, "f1": tp_sum / total}
    return DetectionReport(
        accuracy, recall, precision, f1, far, per_class, cm, micro, undefined, list(class_names or [])
    )


def macro_f1(report: DetectionReport) -> float:
    return float(np.mean([r["f1"] for r in report.per_class]))


def evaluate_detector(model: NodeClassifier, dataset: SnapshotDataset) -> DetectionReport:
    y_true, y_pred = collect_predictions(model, dataset)
    return classification_metrics(y_true, y_pred, dataset.num_classes, list(dataset.label_schema.display_names))


def save_detector(path, model: NodeClassifier) -> Path:
    meta = {
        "backbone": model.backbone,
        "num_features": model.num_features,
        "num_classes": model.num_classes,
        "hidden": model.hidden,
    }
    return save_weights(path, dict(model.state_dict()), meta, DETECTOR_MAGIC)


def load_detector(path) -> NodeClassifier:
    state, meta = load_weights(path, DETECTOR_MAGIC)
    model = NodeClassifier(meta["num_features"], meta["num_classes"], meta["hidden"], meta["backbone"])
    model.load_state_dict(state)
    return model
