"""Seeded toy flow corpus: 19 hosts plus one command-and-control node per window.

Each window holds ``flows_per_window`` records. Normal hosts form a ring with
extra random normal flows; two of them beacon to the C2 endpoint with attack
flows. Beaconing hosts keep a normal majority, so every snapshot has exactly
one anomalous node out of 20 (a 95/5 node imbalance).
"""

from __future__ import annotations

import csv
import io

import numpy as np

from .flow_ingest import CsvSchema, WindowSpec
from .graph_store import LabelSchema

TOY_SCHEMA = CsvSchema("src_ip", "dst_ip", "label", ("dur", "sbytes", "dbytes", "rate"))
TOY_LABELS = LabelSchema(("normal", "attack"))
TOY_WINDOW = WindowSpec(window_size=40, max_nodes=20)

NORMAL_MEAN = np.array([0.40, 0.50, 0.45, 0.55])
ATTACK_MEAN = np.array([0.56, 0.36, 0.60, 0.42])
FEATURE_SD = 0.12


def toy_flows_csv(num_windows: int = 40, hosts: int = 19, flows_per_window: int = 40, seed: int = 7) -> str:
    rng = np.random.default_rng(seed)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([TOY_SCHEMA.src, TOY_SCHEMA.dst, TOY_SCHEMA.label, *TOY_SCHEMA.features])
    attack_flows = 2
    extra = flows_per_window - hosts - attack_flows
    if extra < 0:
        raise ValueError("window too small for the ring plus attack flows")
    for win in range(num_windows):
        names = [f"10.{win // 256}.{win % 256}.{i + 1}" for i in range(hosts)]
        c2 = f"172.16.{win % 256}.66"
        rows = []
        for i in range(hosts):
            rows.append((names[i], names[(i + 1) % hosts], "normal"))
        for _ in range(extra):
            s, d = rng.choice(hosts, size=2, replace=False)
            rows.append((names[s], names[d], "normal"))
        for s in rng.choice(hosts, size=attack_flows, replace=False):
            rows.append((names[s], c2, "attack"))
        for k in rng.permutation(len(rows)):
            src, dst, label = rows[k]
            mean = ATTACK_MEAN if label == "attack" else NORMAL_MEAN
            feats = np.clip(rng.normal(mean, FEATURE_SD), 0.0, 1.0)
            w.writerow([src, dst, label, *(f"{v:.6f}" for v in feats)])
    return buf.getvalue()


def toy_dataset(seed: int = 7):
    """Parse, normalise and window the toy CSV into a ``SnapshotDataset``."""
    from .pipeline import dataset_from_csv

    return dataset_from_csv(io.StringIO(toy_flows_csv(seed=seed)), TOY_SCHEMA, TOY_LABELS, TOY_WINDOW)
