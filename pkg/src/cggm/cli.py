"""Command-line entry point: ``cggm <verb> --config run.yaml``.

Run directory layout (under ``out_dir``)::

    config.yaml                      resolved configuration echo
    datasets/real.cggmds             all snapshots from the flow CSV
    datasets/train.cggmds            training split
    datasets/test.cggmds             held-out real split
    datasets/balanced.cggmds         training split plus synthetic snapshots
    checkpoints/cggm.ckpt            generator and critic weights
    checkpoints/detector.ckpt        detector trained on the balanced set
    checkpoints/detector_imbalanced.ckpt
    reports/graphs_summary.txt
    reports/loss_history.csv
    reports/proportions.csv
    reports/detection_{balanced,imbalanced}{.csv,_confusion.csv,_summary.txt}
    reports/fidelity.csv, fidelity_noise.csv, fidelity_summary.txt
    plots/tsne.png, plots/tsne_coords.csv

Exit codes: 0 success, 1 validation error, 2 runtime or divergence error.
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, ExperimentConfig, load_config
from .detector import evaluate_detector, load_detector, macro_f1, save_detector, train_detector
from .fidelity import compare_datasets
from .flow_ingest import RowError, SchemaError, class_proportions
from .graph_store import ContainerError, Provenance, density_stats, load_dataset, save_dataset, split_dataset
from .model import CheckpointError, load_checkpoint, save_checkpoint
from .pipeline import dataset_from_csv
from .reporting import emit_embedding_plot, proportions_csv
from .training import DivergenceError, generate_balanced_dataset, generate_like, make_balance_plan, noise_like, train, write_history

log = logging.getLogger("cggm")

VALIDATION_ERRORS = (ConfigError, SchemaError, RowError, ContainerError, CheckpointError, FileNotFoundError, KeyError, ValueError)
RUNTIME_ERRORS = (DivergenceError, FloatingPointError, RuntimeError)


class Run:
    """Paths inside one experiment directory."""

    def __init__(self, root: Path):
        self.root = Path(root)

    def dataset(self, name: str) -> Path:
        return self.root / "datasets" / f"{name}.cggmds"

    def checkpoint(self, name: str) -> Path:
        return self.root / "checkpoints" / f"{name}.ckpt"

    def report(self, name: str) -> Path:
        return self.root / "reports" / name

    def plot(self, name: str) -> Path:
        return self.root / "plots" / name

    def require(self, path: Path, hint: str) -> Path:
        if not path.exists():
            raise FileNotFoundError(f"{path} not found; run `{hint}` first")
        return path


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def _proportion_lines(props: dict, names) -> list[str]:
    return [f"  {names[c]:<16} {props.get(c, 0.0):.6f}" for c in range(len(names))]


def cmd_build_graphs(cfg: ExperimentConfig, run: Run) -> int:
    if cfg.flows is None:
        raise ConfigError("input.flows is required for build-graphs")
    ds = dataset_from_csv(cfg.flows, cfg.schema, cfg.labels, cfg.window, cfg.on_error)
    if len(ds) == 0:
        raise ValueError(f"{cfg.flows} yields no complete window of {cfg.window.window_size} records")
    save_dataset(ds, run.dataset("real"))
    if len(ds) >= 2:
        train_ds, test_ds = split_dataset(ds, cfg.train_fraction, cfg.seed)
        save_dataset(train_ds, run.dataset("train"))
        save_dataset(test_ds, run.dataset("test"))
    else:
        log.warning("a single snapshot cannot be split; train and test sets not written")
    names = cfg.labels.display_names
    props = class_proportions(ds.active_labels(), cfg.labels) if ds.active_labels().size else {}
    lines = [
        f"snapshots     {len(ds)}",
        f"nodes         {ds.num_nodes}",
        f"features      {ds.num_features}",
        f"mean_density  {density_stats(ds).mean_density!r}",
        "class_proportions",
        *_proportion_lines(props, names),
    ]
    text = "\n".join(lines) + "\n"
    _write(run.report("graphs_summary.txt"), text)
    print(text, end="")
    return 0


def cmd_train_cggm(cfg: ExperimentConfig, run: Run) -> int:
    train_ds = load_dataset(run.require(run.dataset("train"), "build-graphs"))
    result = train(train_ds, cfg.training)
    save_checkpoint(run.checkpoint("cggm"), result.generator, result.discriminator, result.rho, cfg.training.gan_mode)
    write_history(run.report("loss_history.csv"), result.history)
    if result.history:
        last = result.history[-1]
        print(f"trained {len(result.history)} epochs; final l_total {last.l_total:.6f}, rho {result.rho:.6f}")
    return 0


def cmd_generate_balance(cfg: ExperimentConfig, run: Run) -> int:
    train_path = run.require(run.dataset("train"), "build-graphs")
    train_ds = load_dataset(train_path)
    plan = make_balance_plan(train_ds, cfg.resolved_target())
    out = run.dataset("balanced")
    if plan.total_nodes == 0:
        log.warning("balance plan is all zeros; copying the training set unchanged")
        out.parent.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(train_path, out)
        balanced = train_ds
    else:
        ck = load_checkpoint(run.require(run.checkpoint("cggm"), "train-cggm"))
        balanced = generate_balanced_dataset(train_ds, ck.generator, plan, cfg.seed, ck.rho)
        save_dataset(balanced, out)
    names = cfg.labels.display_names
    before = class_proportions(_counts(train_ds))
    after = class_proportions(_counts(balanced))
    _write(run.report("proportions.csv"), proportions_csv(before, after, names))
    print("class            before    after")
    for c, name in enumerate(names):
        print(f"{name:<16} {before.get(c, 0.0):.4f}    {after.get(c, 0.0):.4f}")
    print(f"generated {plan.total_nodes} nodes in {plan.snapshots_needed} synthetic snapshots")
    return 0


def _counts(ds) -> dict[int, int]:
    return {c: int(k) for c, k in enumerate(ds.class_counts())}


def cmd_train_detector(cfg: ExperimentConfig, run: Run, on: str = "both") -> int:
    targets = {"balanced": ("balanced", "detector"), "imbalanced": ("train", "detector_imbalanced")}
    chosen = list(targets) if on == "both" else [on]
    for key in chosen:
        ds_name, ck_name = targets[key]
        hint = "generate-balance" if ds_name == "balanced" else "build-graphs"
        ds = load_dataset(run.require(run.dataset(ds_name), hint))
        result = train_detector(ds, cfg.detector)
        save_detector(run.checkpoint(ck_name), result.model)
        final = result.history[-1] if result.history else float("nan")
        print(f"{key}: {len(result.history)} epochs, final loss {final:.6f}")
    return 0


def cmd_evaluate(cfg: ExperimentConfig, run: Run) -> int:
    test_ds = load_dataset(run.require(run.dataset("test"), "build-graphs"))
    lines = []
    for key, ck_name in (("balanced", "detector"), ("imbalanced", "detector_imbalanced")):
        path = run.checkpoint(ck_name)
        if not path.exists():
            continue
        report = evaluate_detector(load_detector(path), test_ds)
        report.write(run.report(""), f"detection_{key}")
        lines.append(f"macro_f1_{key:<11} {macro_f1(report):.6f}")
    if not lines:
        raise FileNotFoundError("no detector checkpoints found; run `train-detector` first")

    train_ds = load_dataset(run.require(run.dataset("train"), "build-graphs"))
    ck_path = run.checkpoint("cggm")
    if ck_path.exists():
        ck = load_checkpoint(ck_path)
        synth = compare_datasets(train_ds, generate_like(train_ds, ck.generator, cfg.seed, ck.rho))
        noise = compare_datasets(train_ds, noise_like(train_ds, cfg.seed))
        _write(run.report("fidelity.csv"), synth.to_csv())
        _write(run.report("fidelity_noise.csv"), noise.to_csv())
        _write(run.report("fidelity_summary.txt"), "synthetic vs real\n" + synth.summary() + "noise vs real\n" + noise.summary())
        lines += [f"wasserstein_mean  {synth.wasserstein_mean:.6f} (noise {noise.wasserstein_mean:.6f})",
                  f"ks_mean           {synth.ks_mean:.6f} (noise {noise.ks_mean:.6f})",
                  f"mmd               {synth.mmd:.6f} (noise {noise.mmd:.6f})"]
    text = "\n".join(lines) + "\n"
    _write(run.report("evaluation_summary.txt"), text)
    print(text, end="")
    return 0


def cmd_plot(cfg: ExperimentConfig, run: Run, source: str = "balanced") -> int:
    hint = "generate-balance" if source == "balanced" else "build-graphs"
    ds = load_dataset(run.require(run.dataset(source), hint))
    feats = [s.active_features for s in ds]
    labels = np.concatenate([s.active_labels for s in ds])
    origin = np.concatenate([np.full(s.active_nodes, "synthetic" if s.provenance is Provenance.SYNTHETIC else "real") for s in ds])
    coords, legend = emit_embedding_plot(
        np.concatenate(feats),
        labels,
        run.plot("tsne.png"),
        cfg.labels.display_names,
        markers=origin,
        seed=cfg.seed,
        perplexity=cfg.plot_perplexity,
    )
    rows = ["x,y,label,origin"] + [f"{x!r},{y!r},{int(c)},{o}" for (x, y), c, o in zip(coords.tolist(), labels, origin)]
    _write(run.plot("tsne_coords.csv"), "\n".join(rows) + "\n")
    print(f"wrote {run.plot('tsne.png')} ({len(coords)} points; legend: {', '.join(legend)})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cggm", description="Conditional graph generation for imbalanced traffic-graph anomaly detection.")
    parser.add_argument("--config", required=True, help="experiment YAML file")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out-dir", default=None, help="override the run directory")
    parser.add_argument("--threads", type=int, default=1, help="torch intra-op threads (default 1 for determinism)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("build-graphs", help="parse flows into snapshot datasets and split them")
    sub.add_parser("train-cggm", help="adversarially train the generator on the training split")
    sub.add_parser("generate-balance", help="append synthetic snapshots to balance the training split")
    p = sub.add_parser("train-detector", help="train node classifiers on balanced and/or imbalanced data")
    p.add_argument("--on", choices=("balanced", "imbalanced", "both"), default="both")
    sub.add_parser("evaluate", help="detector metrics on held-out data plus feature fidelity")
    p = sub.add_parser("plot", help="t-SNE scatter of node features")
    p.add_argument("--source", choices=("balanced", "real", "train"), default="balanced")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        torch.set_num_threads(args.threads)
        cfg = load_config(args.config, check_paths=args.command == "build-graphs")
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        if args.out_dir is not None:
            cfg.out_dir = Path(args.out_dir)
        run = Run(cfg.out_dir)
        _write(run.root / "config.yaml", cfg.to_yaml())
        handlers = {
            "build-graphs": lambda: cmd_build_graphs(cfg, run),
            "train-cggm": lambda: cmd_train_cggm(cfg, run),
            "generate-balance": lambda: cmd_generate_balance(cfg, run),
            "train-detector": lambda: cmd_train_detector(cfg, run, args.on),
            "evaluate": lambda: cmd_evaluate(cfg, run),
            "plot": lambda: cmd_plot(cfg, run, args.source),
        }
        return handlers[args.command]()
    except RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
