"""Command-line entry point: ``srnc validate|train|bench|export``.

Run settings live in a JSON config; flags only carry paths, seed counts,
thread counts and the suite name. Exit codes: 0 success, 2 data error,
3 numeric divergence, 4 config error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import subprocess
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .bench import (DEFAULT_HIDDEN, MetricReport, cluster_count_sensitivity, evaluate,
                    export_embeddings, markdown_summary, pick_hidden, resolve_dataset,
                    row_normalize, run_closeset_benchmark, run_openset_benchmark, write_csv,
                    write_label_histogram)
from .exceptions import ConfigError, DivergenceError, GraphFormatError, SRNCError
from .gnn import ModelConfig, load_checkpoint, params_from_tensors, params_to_tensors, save_checkpoint
from .graphstore import (Graph, SbmShiftConfig, load_graph, make_openset_split,
                         make_temporal_split, synth_sbm_shift)
from .trainer import TrainConfig, run_srnc, write_logs

log = logging.getLogger("srnc")

EXIT_OK, EXIT_DATA, EXIT_DIVERGENCE, EXIT_CONFIG = 0, 2, 3, 4
SCENARIO_KINDS = ("open_set", "sbm_shift", "temporal")
SUITES = ("openset", "closeset", "sensitivity")

SCENARIO_DEFAULTS = {
    "kind": "open_set",
    "hidden_classes": None,  # None: dataset default count drawn per seed; int: count; list: fixed
    "per_class_train": 20,
    "val_fraction": 0.15,
    "normalize_features": True,
    "sbm": {},
    "train_cutoff": None,
    "val_cutoff": None,
    "test_window": None,
}
BENCH_DEFAULTS = {
    "seeds": 10,
    "counts": [16, 7],
    "no_shift_control": True,
}
TOP_KEYS = ("data", "out", "scenario", "model", "train", "bench")


# --------------------------------------------------------------------------
# config


def _field_names(cls) -> set:
    return {f.name for f in dataclasses.fields(cls)}


def _reject_unknown(section: str, given: dict, allowed) -> None:
    if not isinstance(given, dict):
        raise ConfigError(f"{section}: expected an object, got {type(given).__name__}")
    extra = sorted(set(given) - set(allowed))
    if extra:
        raise ConfigError(f"{section}: unknown key(s) {', '.join(extra)}")


@dataclasses.dataclass
class RunConfig:
    """Parsed run configuration plus the raw document it came from."""

    raw: dict
    data: Optional[str]
    out: Optional[str]
    scenario: dict
    train: TrainConfig
    bench: dict

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        _reject_unknown("config", doc, TOP_KEYS)
        scen = doc.get("scenario", {})
        _reject_unknown("scenario", scen, SCENARIO_DEFAULTS)
        scen = {**SCENARIO_DEFAULTS, **scen}
        if scen["kind"] not in SCENARIO_KINDS:
            raise ConfigError(f"scenario.kind must be one of {SCENARIO_KINDS}, got {scen['kind']!r}")
        _reject_unknown("scenario.sbm", scen["sbm"], _field_names(SbmShiftConfig) - {"seed"})
        model = doc.get("model", {})
        _reject_unknown("model", model, _field_names(ModelConfig) - {"seed"})
        train = doc.get("train", {})
        _reject_unknown("train", train, _field_names(TrainConfig) - {"model"})
        bench = doc.get("bench", {})
        _reject_unknown("bench", bench, BENCH_DEFAULTS)
        try:
            mcfg = ModelConfig(**model)
            tcfg = TrainConfig(model=mcfg, **train)
            tcfg.validate()
            mcfg = replace(mcfg, seed=tcfg.seed)
            tcfg = replace(tcfg, model=mcfg)
            SbmShiftConfig(**scen["sbm"]).validate()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        return cls(raw=doc, data=doc.get("data"), out=doc.get("out"), scenario=scen,
                   train=tcfg, bench={**BENCH_DEFAULTS, **bench})


def load_run_config(path) -> RunConfig:
    if path is None:
        return RunConfig.from_dict({})
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return RunConfig.from_dict(doc)


def version_string() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "describe", "--tags", "--always", "--dirty"], cwd=here,
                             capture_output=True, text=True, timeout=10)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not JSON serializable: {type(x).__name__}")


def _write_run_info(out: Path, run: RunConfig, **extra) -> None:
    _write_json(out / "config.json", run.raw)
    _write_json(out / "run.json", {"version": version_string(), "seed": run.train.seed,
                                   "config": run.raw, **extra})


def _output_dir(args, run: RunConfig) -> Path:
    out = args.out or run.out
    if not out:
        raise ConfigError("no output directory: pass --out or set \"out\" in the config")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _data_source(args, run: RunConfig):
    return args.data or run.data


# --------------------------------------------------------------------------
# scenarios


def _sbm_config(run: RunConfig, seed: int) -> SbmShiftConfig:
    return SbmShiftConfig(**run.scenario["sbm"], seed=seed)


def _load(args, run: RunConfig) -> Graph:
    source = _data_source(args, run)
    if not source:
        raise ConfigError("this scenario needs a dataset: pass --data or set \"data\"")
    g = resolve_dataset(source)
    return row_normalize(g) if run.scenario["normalize_features"] else g


def build_scenario(args, run: RunConfig, seed: int):
    sc = run.scenario
    try:
        if sc["kind"] == "sbm_shift":
            return synth_sbm_shift(_sbm_config(run, seed))
        g = _load(args, run)
        if sc["kind"] == "temporal":
            if sc["train_cutoff"] is None or sc["val_cutoff"] is None or sc["test_window"] is None:
                raise ConfigError("temporal scenario needs train_cutoff, val_cutoff and test_window")
            return make_temporal_split(g, None, sc["train_cutoff"], sc["val_cutoff"],
                                       tuple(sc["test_window"]))
        hidden = sc["hidden_classes"]
        if hidden is None or isinstance(hidden, int):
            count = DEFAULT_HIDDEN.get(g.name.lower(), 3) if hidden is None else hidden
            hidden = pick_hidden(g, count, seed)
        return make_openset_split(g, tuple(hidden), sc["per_class_train"], sc["val_fraction"], seed)
    except (SRNCError, FileNotFoundError):
        raise
    except ValueError as exc:
        raise ConfigError(f"scenario: {exc}") from None


# --------------------------------------------------------------------------
# subcommands


def cmd_validate(args) -> int:
    g = load_graph(args.data)
    counts = np.bincount(g.labels[g.labels >= 0], minlength=g.num_classes)
    print(f"nodes={g.num_nodes} classes={g.num_classes}")
    print(f"edges={g.num_edges} features={g.num_features} labeled={int(counts.sum())}"
          f" times={'yes' if g.node_times is not None else 'no'}")
    print("class_counts=" + " ".join(str(int(c)) for c in counts))
    short = [c for c, n in enumerate(counts) if n < args.per_class_train]
    if short:
        print(f"split=infeasible per_class_train={args.per_class_train} "
              f"short_classes={' '.join(map(str, short))}")
    else:
        print(f"split=feasible per_class_train={args.per_class_train}")
    return EXIT_OK


def cmd_train(args) -> int:
    run = load_run_config(args.config)
    out = _output_dir(args, run)
    cfg = run.train
    scenario = build_scenario(args, run, cfg.seed)
    method = "SRNC-Ep.1" if cfg.max_episodes == 1 else "SRNC"
    result = run_srnc(scenario, cfg)
    name = scenario.target_graph.name
    report = evaluate(result.theta, scenario, method, cfg.seed, result.phi, name,
                      best_episode=result.best_episode)
    write_logs(result.logs, out / "episodes.jsonl")
    save_checkpoint(out / "model.ckpt", {**params_to_tensors(result.theta, "theta."),
                                         **params_to_tensors(result.phi, "phi.")})
    write_csv([report], out / "report.csv")
    (out / "report.md").write_text(markdown_summary([report]))
    write_label_histogram(scenario, out / "label_histogram.csv")
    _write_run_info(out, run, command="train", method=method,
                    hidden_classes=list(scenario.hidden_classes),
                    report=report.row(), mapping=result.mapping.to_json())
    print(f"{method} micro_f1={report.micro_f1:.4f} best_episode={result.best_episode} out={out}")
    return EXIT_OK


def _seed_list(args, run: RunConfig) -> list:
    n = args.seeds if args.seeds is not None else run.bench["seeds"]
    if n < 1:
        raise ConfigError("--seeds must be >= 1")
    return list(range(n))


def cmd_bench(args) -> int:
    run = load_run_config(args.config)
    out = _output_dir(args, run)
    seeds = _seed_list(args, run)
    cfg, sc = run.train, run.scenario
    suite = args.suite
    reports: list[MetricReport]
    if suite == "openset":
        hidden = sc["hidden_classes"]
        reports = run_openset_benchmark(
            _dataset_arg(args, run), tuple(hidden) if isinstance(hidden, list) else hidden,
            cfg=cfg, per_class_train=sc["per_class_train"], val_fraction=sc["val_fraction"],
            threads=args.threads, normalize_features=sc["normalize_features"], seeds=seeds)
        baseline = "GCN-IID"
    elif suite == "sensitivity":
        hidden = sc["hidden_classes"]
        reports = cluster_count_sensitivity(
            _dataset_arg(args, run), tuple(run.bench["counts"]),
            tuple(hidden) if isinstance(hidden, list) else hidden, cfg=cfg,
            threads=args.threads, seeds=seeds)
        baseline = None
    else:
        reports = _closeset_reports(args, run, seeds)
        baseline = "GCN"
    write_csv(reports, out / "results.csv")
    (out / "summary.md").write_text(markdown_summary(reports, baseline))
    _write_run_info(out, run, command="bench", suite=suite, seeds=seeds)
    print(markdown_summary(reports, baseline), end="")
    return EXIT_OK


def _dataset_arg(args, run: RunConfig):
    source = args.dataset or _data_source(args, run)
    if not source:
        raise ConfigError("bench needs a dataset: pass --dataset/--data or set \"data\"")
    return source


def _closeset_reports(args, run: RunConfig, seeds) -> list:
    cfg = run.train
    if run.scenario["kind"] == "temporal":
        scenario = build_scenario(args, run, cfg.seed)
        return run_closeset_benchmark(scenario, cfg=cfg, threads=args.threads, seeds=seeds,
                                      name="temporal")
    base = SbmShiftConfig(**run.scenario["sbm"])
    reports = run_closeset_benchmark(base, cfg=cfg, threads=args.threads, seeds=seeds,
                                     name="sbm-shift")
    if run.bench["no_shift_control"]:
        control = replace(base, label_prior_target=base.label_prior_source)
        reports += run_closeset_benchmark(control, cfg=cfg, threads=args.threads, seeds=seeds,
                                          name="sbm-noshift")
    return reports


def cmd_export(args) -> int:
    try:
        tensors = load_checkpoint(args.checkpoint)
    except ValueError as exc:
        raise GraphFormatError(str(exc), module="gnn") from None
    prefix = f"{args.which}."
    try:
        params = params_from_tensors(tensors, prefix)
    except KeyError:
        raise ConfigError(f"checkpoint has no {args.which!r} network") from None
    g = load_graph(args.data)
    if args.normalize_features:
        g = row_normalize(g)
    if params.in_dim != g.num_features:
        raise GraphFormatError(
            f"checkpoint expects {params.in_dim} features, dataset has {g.num_features}")
    path = export_embeddings(params, g, args.out)
    print(f"wrote {path} rows={g.num_nodes} cols={params.W1.data.shape[1]}")
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="srnc", description="Shift-robust node classification")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", help="check a dataset directory")
    v.add_argument("--data", required=True)
    v.add_argument("--per-class-train", type=int, default=20)
    v.set_defaults(func=cmd_validate)

    t = sub.add_parser("train", help="one SRNC run")
    t.add_argument("--config")
    t.add_argument("--data")
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    b = sub.add_parser("bench", help="multi-seed benchmark suite")
    b.add_argument("--suite", choices=SUITES, required=True)
    b.add_argument("--config")
    b.add_argument("--data")
    b.add_argument("--dataset", help="dataset directory or name under $SRNC_DATA")
    b.add_argument("--out")
    b.add_argument("--seeds", type=int)
    b.add_argument("--threads", type=int, default=1)
    b.set_defaults(func=cmd_bench)

    e = sub.add_parser("export", help="write node embeddings from a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--which", choices=("theta", "phi"), default="phi")
    e.add_argument("--no-normalize-features", dest="normalize_features", action="store_false")
    e.set_defaults(func=cmd_export)
    return p


def _configure_logging() -> None:
    level = os.environ.get("SRNC_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, GraphFormatError, FileNotFoundError, DivergenceError) as exc:
        print(f"error [{getattr(exc, 'module', 'io')}]: {exc}", file=sys.stderr)
        if isinstance(exc, ConfigError):
            return EXIT_CONFIG
        return EXIT_DIVERGENCE if isinstance(exc, DivergenceError) else EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
