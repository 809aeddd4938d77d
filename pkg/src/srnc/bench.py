"""Experiment runners, report tables and embedding export."""
from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .clustering import harden
from .gnn import GcnParams, gcn_forward
from .graphstore import (Graph, SbmShiftConfig, ShiftScenario, load_graph, make_openset_split,
                         normalize_adjacency, synth_sbm_shift, write_feature_bin)
from .metrics import (clustering_acc, macro_f1_paper, macro_f1_standard, micro_f1, nmi,
                      per_class_recall, label_histogram)
from .trainer import (SRNCResult, TrainConfig, _Context, pretrain_classifier, run_srnc,
                      run_wo_phi_ablation)

DATA_ENV = "SRNC_DATA"
# hidden-class counts of the open-set protocol
DEFAULT_HIDDEN = {"cora": 3, "citeseer": 3, "pubmed": 1}


@dataclass
class MetricReport:
    method: str
    seed: int
    scenario: str
    micro_f1: float
    macro_f1_paper: float
    macro_f1_standard: float
    clustering_acc: float = float("nan")
    nmi: float = float("nan")
    per_class_recall: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def row(self) -> dict:
        d = asdict(self)
        d["per_class_recall"] = " ".join(f"{r:.6f}" for r in self.per_class_recall)
        extra = d.pop("extra")
        d.update({f"x_{k}": v for k, v in sorted(extra.items())})
        return d


def _predict(theta: GcnParams, scenario: ShiftScenario) -> np.ndarray:
    return _Context(scenario).classify(theta, "target").data[scenario.test_nodes].argmax(axis=1)


def cluster_metrics(phi: GcnParams, graph: Graph):
    """ACC and NMI of hardened clusters against every labeled node (hidden classes included)."""
    _, q = gcn_forward(phi, normalize_adjacency(graph), graph.features)
    assign = harden(q)
    labeled = graph.labels >= 0
    return clustering_acc(assign[labeled], graph.labels[labeled]), nmi(assign[labeled], graph.labels[labeled])


def evaluate(theta: GcnParams, scenario: ShiftScenario, method: str, seed: int,
             phi: Optional[GcnParams] = None, name: str = "", **extra) -> MetricReport:
    pred = _predict(theta, scenario)
    truth = scenario.test_labels
    # the unknown class is scored only when some class is actually hidden
    n = scenario.num_outputs if scenario.hidden_classes else scenario.num_known
    acc = score = float("nan")
    if phi is not None:
        acc, score = cluster_metrics(phi, scenario.target_graph)
    return MetricReport(
        method=method, seed=seed, scenario=name or scenario.kind,
        micro_f1=micro_f1(pred, truth), macro_f1_paper=macro_f1_paper(pred, truth, n),
        macro_f1_standard=macro_f1_standard(pred, truth, n),
        clustering_acc=acc, nmi=score,
        per_class_recall=per_class_recall(pred, truth, n).tolist(), extra=dict(extra))


# --------------------------------------------------------------------------
# datasets


def resolve_dataset(dataset, data_root=None) -> Graph:
    """Load ``dataset`` given as a directory, or as a name under the data root.

    The root defaults to the ``SRNC_DATA`` environment variable.
    """
    if isinstance(dataset, Graph):
        return dataset
    path = Path(dataset)
    if not path.is_dir():
        root = data_root or os.environ.get(DATA_ENV)
        if not root:
            raise FileNotFoundError(
                f"dataset {dataset!r} is not a directory and {DATA_ENV} is unset")
        path = Path(root) / str(dataset).lower()
        if not path.is_dir():
            raise FileNotFoundError(f"dataset directory {path} not found")
    return load_graph(path)


def row_normalize(g: Graph) -> Graph:
    """Scale feature rows to sum 1 (bag-of-words preprocessing of the GCN reference setup)."""
    sums = np.abs(g.features).sum(axis=1, keepdims=True)
    feats = g.features / np.where(sums > 0, sums, 1.0)
    return replace(g, features=feats)


def pick_hidden(g: Graph, count: int, seed: int) -> tuple:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    return tuple(sorted(int(c) for c in rng.choice(g.num_classes, count, replace=False)))


def _map(fn: Callable, items: Sequence, threads: int) -> list:
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _srnc_reports(scenario, cfg, seed, name, with_clusters=True):
    result = run_srnc(scenario, cfg)
    full = evaluate(result.theta, scenario, "SRNC", seed,
                    result.phi if with_clusters else None, name,
                    episodes=len(result.logs) - 1, best_episode=result.best_episode)
    theta1 = GcnParams.from_arrays(result.episode_one["theta"])
    phi1 = GcnParams.from_arrays(result.episode_one["phi"])
    ep1 = evaluate(theta1, scenario, "SRNC-Ep.1", seed, phi1 if with_clusters else None, name)
    return result, full, ep1


# --------------------------------------------------------------------------
# runners


def run_openset_benchmark(dataset, hidden_classes=None, num_seeds: int = 10,
                          cfg: Optional[TrainConfig] = None, per_class_train: int = 20,
                          val_fraction: float = 0.15, data_root=None, threads: int = 1,
                          normalize_features: bool = True, methods=None,
                          seeds: Optional[Sequence[int]] = None) -> list:
    """Open-set protocol: per seed, GCN-IID reference, SRNC, SRNC-Ep.1 and SRNC-w.o.Phi.

    ``hidden_classes`` may be a class tuple (fixed), an int (that many classes
    drawn per seed) or None (the dataset default count, drawn per seed).
    """
    g = resolve_dataset(dataset, data_root)
    if normalize_features:
        g = row_normalize(g)
    name = g.name
    cfg = cfg or TrainConfig()
    methods = tuple(methods or ("GCN-IID", "SRNC", "SRNC-Ep.1", "SRNC-w.o.Phi"))
    seeds = list(seeds) if seeds is not None else list(range(num_seeds))

    def one(seed):
        if hidden_classes is None or isinstance(hidden_classes, int):
            count = DEFAULT_HIDDEN.get(name.lower(), 3) if hidden_classes is None else hidden_classes
            hidden = pick_hidden(g, count, seed)
        else:
            hidden = tuple(hidden_classes)
        sc = make_openset_split(g, hidden, per_class_train, val_fraction, seed)
        run_cfg = replace(cfg, seed=seed)
        out = []
        if "GCN-IID" in methods:
            iid = make_openset_split(g, (), per_class_train, val_fraction, seed)
            theta, _ = pretrain_classifier(iid, run_cfg)
            out.append(evaluate(theta, iid, "GCN-IID", seed, name=name))
        if "SRNC" in methods or "SRNC-Ep.1" in methods:
            _, full, ep1 = _srnc_reports(sc, run_cfg, seed, name)
            out += [r for r in (full, ep1) if r.method in methods]
        if "SRNC-w.o.Phi" in methods:
            res = run_wo_phi_ablation(sc, run_cfg)
            out.append(evaluate(res.theta, sc, "SRNC-w.o.Phi", seed, name=name, tau=res.tau))
        for r in out:
            r.extra["hidden"] = " ".join(map(str, hidden))
        return out

    return [r for chunk in _map(one, seeds, threads) for r in chunk]


def run_closeset_benchmark(scenario_source=None, num_seeds: int = 10,
                           cfg: Optional[TrainConfig] = None, threads: int = 1,
                           seeds: Optional[Sequence[int]] = None, name: str = "") -> list:
    """GCN vs SRNC (C = N) vs ablations on close-set scenarios.

    ``scenario_source`` is an ``SbmShiftConfig`` (re-seeded per run), a
    callable ``seed -> ShiftScenario`` or a fixed ``ShiftScenario``.
    """
    scenario_source = scenario_source or SbmShiftConfig()
    cfg = cfg or TrainConfig()
    seeds = list(seeds) if seeds is not None else list(range(num_seeds))

    def build(seed):
        if isinstance(scenario_source, SbmShiftConfig):
            return synth_sbm_shift(replace(scenario_source, seed=seed))
        if isinstance(scenario_source, ShiftScenario):
            return scenario_source
        return scenario_source(seed)

    def one(seed):
        sc = build(seed)
        label = name or sc.target_graph.name
        run_cfg = replace(cfg, seed=seed)
        theta, _ = pretrain_classifier(sc, run_cfg)
        out = [evaluate(theta, sc, "GCN", seed, name=label)]
        _, full, ep1 = _srnc_reports(sc, run_cfg, seed, label)
        out += [full, ep1]
        res = run_wo_phi_ablation(sc, run_cfg)
        out.append(evaluate(res.theta, sc, "SRNC-w.o.Phi", seed, name=label))
        return out

    return [r for chunk in _map(one, seeds, threads) for r in chunk]


def cluster_count_sensitivity(dataset, counts=(16, 7), hidden_classes=None, num_seeds: int = 10,
                              cfg: Optional[TrainConfig] = None, data_root=None,
                              threads: int = 1, seeds=None) -> list:
    """SRNC per cluster count on the same splits; method names are ``SRNC-C<count>``."""
    cfg = cfg or TrainConfig()
    out = []
    for c in counts:
        rows = run_openset_benchmark(dataset, hidden_classes, num_seeds, replace(cfg, num_clusters=c),
                                     data_root=data_root, threads=threads, methods=("SRNC",),
                                     seeds=seeds)
        for r in rows:
            r.method = f"SRNC-C{c}"
        out += rows
    return out


def run_cluster_ablation(dataset, hidden_classes=3, num_seeds: int = 10,
                         cfg: Optional[TrainConfig] = None, data_root=None, threads: int = 1,
                         seeds=None) -> list:
    """Cluster quality (ACC/NMI) of SRNC with and without the source KL regularizer."""
    g = row_normalize(resolve_dataset(dataset, data_root))
    cfg = cfg or TrainConfig()
    seeds = list(seeds) if seeds is not None else list(range(num_seeds))

    def one(seed):
        hidden = (pick_hidden(g, hidden_classes, seed) if isinstance(hidden_classes, int)
                  else tuple(hidden_classes))
        sc = make_openset_split(g, hidden, seed=seed)
        out = []
        for method, use_kl in (("SRNC", True), ("SRNC-w.o.Lphi_s", False)):
            result = run_srnc(sc, replace(cfg, seed=seed, use_source_kl=use_kl))
            out.append(evaluate(result.theta, sc, method, seed, result.phi, g.name))
        return out

    return [r for chunk in _map(one, seeds, threads) for r in chunk]


# --------------------------------------------------------------------------
# reports


def write_csv(reports, path) -> None:
    rows = [r.row() for r in reports]
    keys = []
    for row in rows:
        keys += [k for k in row if k not in keys]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def summarize(reports, metric: str = "micro_f1") -> dict:
    """Per (scenario, method): mean and sample std (ddof=1 when n > 1) in percent."""
    groups = {}
    for r in reports:
        groups.setdefault((r.scenario, r.method), []).append(getattr(r, metric))
    out = {}
    for key, vals in groups.items():
        v = 100.0 * np.asarray(vals, dtype=float)
        out[key] = (float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0, len(v))
    return out


def markdown_summary(reports, baseline: Optional[str] = None) -> str:
    """Markdown table: Micro-F1, both Macro-F1 columns and the drop versus ``baseline``."""
    micro = summarize(reports, "micro_f1")
    macro = summarize(reports, "macro_f1_paper")
    macro_std = summarize(reports, "macro_f1_standard")
    lines = ["| Dataset | Method | Micro-F1 | Macro-F1 (recall) | Macro-F1 (F1) | ΔF1 | n |",
             "|---|---|---|---|---|---|---|"]
    for (scen, method), (m, s, n) in micro.items():
        base = micro.get((scen, baseline)) if baseline else None
        delta = f"{base[0] - m:.1f}" if base else ""
        ma, sa, _ = macro[(scen, method)]
        mb, sb, _ = macro_std[(scen, method)]
        lines.append(f"| {scen} | {method} | {m:.1f} ± {s:.1f} | {ma:.1f} ± {sa:.1f} "
                     f"| {mb:.1f} ± {sb:.1f} | {delta} | {n} |")
    return "\n".join(lines) + "\n"


def label_histogram_rows(scenario: ShiftScenario) -> list:
    """(split, class, fraction) rows for train/val/test in the classifier's index space."""
    n = scenario.num_outputs
    rows = []
    for split, labels in (("train", scenario.train_labels), ("val", scenario.val_labels),
                          ("test", scenario.test_labels)):
        if len(labels) == 0:
            continue
        for c, frac in enumerate(label_histogram(labels, n)):
            rows.append((split, c, float(frac)))
    return rows


def write_label_histogram(scenario: ShiftScenario, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["split", "class", "fraction"])
        for split, c, frac in label_histogram_rows(scenario):
            writer.writerow([split, c, f"{frac:.6f}"])


def export_embeddings(params: GcnParams, graph: Graph, path) -> Path:
    """Write the first-layer node embeddings as features.bin plus ``<path>.labels.tsv``."""
    hidden, _ = gcn_forward(params, normalize_adjacency(graph), graph.features)
    path = Path(path)
    write_feature_bin(path, hidden.data)
    sidecar = path.with_name(path.name + ".labels.tsv")
    with open(sidecar, "w") as fh:
        for i, y in enumerate(graph.labels.tolist()):
            fh.write(f"{i}\t{y}\n")
    return path
