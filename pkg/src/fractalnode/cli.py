"""Command-line entry point: generate, partition, analyze, train, experiment, bench.

Configuration is a flat ``key = value`` file with dotted sections
(``model.backbone = gcn``).  Values resolve as command line > file > default;
unknown keys are rejected.  Failures print one line

    error: <kind>: <message>

to stderr and exit nonzero (2 config/usage, 3 missing input, 4 incompatible
task/head, 1 anything else).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .autograd import save_checkpoint
from .graph import (
    Dataset, csl_graphs, erdos_renyi, peptide_like, read_edge_list, tree_neighbours_match, write_edge_list,
)
from .model import ModelConfig
from .partition import PARTITIONERS, make_partition, read_partition, write_partition
from .train import ExperimentReport, TrainConfig, train

EXPERIMENTS = ("tree-match", "csl", "signal", "ks-trend", "resistance", "scaling")
WORKERS_ENV = "FRACTALNODE_WORKERS"

EXIT_CODES = {"runtime": 1, "config": 2, "input": 3, "incompatible": 4}


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


# configuration -------------------------------------------------------------

_GENERAL = {"seed": 0, "out": "out"}
_DATA = {
    "kind": "csl",            # csl | tree | er | peptide | dir
    "path": "",
    "depth": 3,
    "samples": 4000,
    "test_samples": 500,
    "csl_n": 41,
    "csl_copies": 15,
    "count": 100,
    "n": 40,
    "n_min": 10,
    "p": 0.15,
    "avg_degree": 5.0,
}
_EXPERIMENT = {
    "models": "plain,fn",
    "seeds": "0,1,2",
    "r_values": "3,5",
    "extra_layers": 1,
    "folds": 5,
    "c_values": "",
    "init_seeds": "0,1,2,3,4",
    "sources": 10,
    "sample_pairs": 100,
    "n_values": "1000,10000,50000",
    "steps": 3,
    "workers": 0,
}


def _defaults() -> dict[str, Any]:
    out = dict(_GENERAL)
    out.update({f"model.{f.name}": f.default for f in fields(ModelConfig)})
    # the training seed is the master ``seed``
    out.update({f"train.{f.name}": f.default for f in fields(TrainConfig) if f.name != "seed"})
    out.update({f"data.{k}": v for k, v in _DATA.items()})
    out.update({f"experiment.{k}": v for k, v in _EXPERIMENT.items()})
    return out


DEFAULTS = _defaults()
_OPTIONAL_INT = {"model.fractal_pe_dim"}


def _coerce(key: str, raw: Any) -> Any:
    if key not in DEFAULTS:
        raise CliError("config", f"unknown key {key!r}")
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    default = DEFAULTS[key]
    try:
        if key in _OPTIONAL_INT:
            return None if raw.lower() in ("", "none") else int(raw)
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise CliError("config", f"bad value {raw!r} for key {key!r}") from None
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError("config", f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = _coerce(key, value)
    return values


@dataclass
class RunConfig:
    values: dict[str, Any]

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def section(self, name: str) -> dict[str, Any]:
        pre = name + "."
        return {k[len(pre):]: v for k, v in self.values.items() if k.startswith(pre)}

    @property
    def seed(self) -> int:
        return int(self.values["seed"])

    @property
    def out(self) -> Path:
        return Path(self.values["out"])

    def model(self) -> ModelConfig:
        try:
            return ModelConfig(**self.section("model"))
        except (TypeError, ValueError) as exc:
            raise CliError("config", f"model: {exc}") from None

    def train(self) -> TrainConfig:
        try:
            return TrainConfig(**self.section("train"), seed=self.seed)
        except (TypeError, ValueError) as exc:
            raise CliError("config", f"train: {exc}") from None

    def ints(self, key: str) -> list[int]:
        raw = str(self.values[key]).strip()
        try:
            return [int(x) for x in raw.split(",") if x.strip()]
        except ValueError:
            raise CliError("config", f"bad integer list {raw!r} for key {key!r}") from None

    def names(self, key: str) -> list[str]:
        return [x.strip() for x in str(self.values[key]).split(",") if x.strip()]


def config_load(path: str | Path | None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Defaults, then the file (if any), then ``overrides``."""
    values = dict(DEFAULTS)
    if path:
        p = Path(path)
        if not p.exists():
            raise CliError("input", f"no such config file: {p}")
        values.update(parse_config_text(p.read_text(), str(p)))
    for k, v in (overrides or {}).items():
        values[k] = _coerce(k, v)
    return RunConfig(values)


# helpers -------------------------------------------------------------------

def _write_csv(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    cols: list[str] = []
    for r in rows:
        cols += [k for k in r if k not in cols]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        w.writerows(rows)


def _read_graph(path: str | Path):
    p = Path(path)
    if not p.exists():
        raise CliError("input", f"no such graph file: {p}")
    try:
        return read_edge_list(p)
    except ValueError as exc:
        raise CliError("input", str(exc)) from None


def write_dataset(ds: Dataset, out: Path) -> None:
    """``dataset.json`` (task, classes, splits, file list) plus one edge-list file per graph."""
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for i, g in enumerate(ds.graphs):
        name = f"graph_{i:05d}.el"
        write_edge_list(g, out / name)
        names.append(name)
    manifest = {"task": ds.task, "num_classes": ds.num_classes, "graphs": names,
                "split": {k: [int(i) for i in v] for k, v in ds.split.items()}}
    (out / "dataset.json").write_text(json.dumps(manifest, indent=1) + "\n")


def read_dataset(path: str | Path) -> Dataset:
    root = Path(path)
    manifest_path = root / "dataset.json"
    if not manifest_path.exists():
        raise CliError("input", f"no dataset manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    graphs = [_read_graph(root / name) for name in manifest["graphs"]]
    split = {k: np.asarray(v, dtype=np.int64) for k, v in manifest["split"].items()}
    return Dataset(graphs, split, manifest["task"], manifest.get("num_classes", 0))


def _holdout(ds: Dataset, seed: int, frac: float = 0.2) -> Dataset:
    """Give a dataset with a single ``all`` split a train/test split."""
    if "train" in ds.split:
        return ds
    idx = np.random.default_rng(seed).permutation(len(ds.graphs))
    cut = int(round(len(idx) * (1 - frac)))
    return Dataset(ds.graphs, {"train": np.sort(idx[:cut]), "test": np.sort(idx[cut:])}, ds.task,
                   ds.num_classes, ds.meta)


def load_data(cfg: RunConfig) -> Dataset:
    kind, seed = cfg["data.kind"], cfg.seed
    if kind == "dir":
        return read_dataset(cfg["data.path"])
    if kind == "csl":
        return csl_graphs(cfg["data.csl_n"], copies_per_class=cfg["data.csl_copies"], seed=seed)
    if kind == "tree":
        return tree_neighbours_match(cfg["data.depth"], cfg["data.samples"], seed,
                                     test_samples=cfg["data.test_samples"])
    raise CliError("config", f"data.kind {kind!r} is not a training dataset (use csl, tree or dir)")


def _workers(cfg: RunConfig) -> int:
    n = int(cfg["experiment.workers"])
    if n <= 0:
        try:
            n = int(os.environ.get(WORKERS_ENV, "1"))
        except ValueError:
            raise CliError("config", f"{WORKERS_ENV} must be an integer") from None
    return max(n, 1)


def _per_seed(fn, seeds: Sequence[int], workers: int) -> list:
    if workers <= 1 or len(seeds) <= 1:
        return [fn(s) for s in seeds]
    with ProcessPoolExecutor(max_workers=min(workers, len(seeds))) as pool:
        return list(pool.map(fn, seeds))


def _merge(name: str, reports: list[ExperimentReport]) -> ExperimentReport:
    """Concatenate per-seed reports; numeric finals are averaged (seeds carry equal weight)."""
    out = ExperimentReport(name, meta=dict(reports[0].meta))
    for r in reports:
        out.rows.extend(r.rows)
    for key in reports[0].final:
        vals = [r.final[key] for r in reports]
        out.final[key] = float(np.mean(vals)) if all(isinstance(v, (int, float)) for v in vals) else vals
    return out


def _finish(report: ExperimentReport, cfg: RunConfig, stem: str) -> None:
    report.meta["config"] = dict(sorted(cfg.values.items()))
    csv_path, json_path = report.write(cfg.out, stem)
    print(json.dumps({"csv": str(csv_path), "json": str(json_path), "final": report.final}, default=str))


# subcommands ---------------------------------------------------------------

def cmd_generate(args, cfg: RunConfig) -> None:
    seed, out = cfg.seed, cfg.out
    if args.kind == "er":
        g = erdos_renyi(cfg["data.n"], cfg["data.p"], seed)
        out.parent.mkdir(parents=True, exist_ok=True)
        write_edge_list(g, out)
        print(json.dumps({"graph": str(out), "nodes": g.num_nodes, "edges": g.num_edges}))
    elif args.kind == "peptide":
        g = peptide_like(cfg["data.n"], seed)
        out.parent.mkdir(parents=True, exist_ok=True)
        write_edge_list(g, out)
        print(json.dumps({"graph": str(out), "nodes": g.num_nodes, "edges": g.num_edges}))
    else:
        ds = load_data(RunConfig({**cfg.values, "data.kind": args.kind}))
        write_dataset(ds, out)
        print(json.dumps({"dataset": str(out), "graphs": len(ds.graphs), "task": ds.task}))


def cmd_partition(args, cfg: RunConfig) -> None:
    g = _read_graph(args.input)
    method = args.method or cfg["model.partitioner"]
    c = args.C if args.C is not None else cfg["model.num_blocks"]
    k = args.k_hop if args.k_hop is not None else cfg["model.k_hop"]
    if method not in PARTITIONERS:
        raise CliError("config", f"unknown partitioner {method!r}")
    try:
        part = make_partition(g, method, c, k_hop=k, seed=cfg.seed)
    except ValueError as exc:
        raise CliError("config", str(exc)) from None
    out = Path(args.out) if args.out else Path(str(args.input) + ".part")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_partition(part, out)
    print(json.dumps({"partition": str(out), "blocks": part.num_blocks,
                      "sizes": part.block_sizes().tolist(), "k_hop": part.k_hop}))


def cmd_analyze(args, cfg: RunConfig) -> None:
    from .spectral import dc_check, ks_similarity, resistance_report

    g = _read_graph(args.input)
    out = Path(args.out) if args.out else cfg.out.with_suffix(".csv")
    if args.what == "dc":
        _, _, diff = dc_check(g.node_features)
        _write_csv(out, [{"graph_id": 0, "max_abs_diff": diff}])
    elif args.what == "resistance":
        if not args.partition:
            raise CliError("config", "analyze resistance needs --partition")
        if not Path(args.partition).exists():
            raise CliError("input", f"no such partition file: {args.partition}")
        part = read_partition(args.partition)
        if part.num_nodes != g.num_nodes:
            raise CliError("incompatible", f"partition covers {part.num_nodes} nodes, graph has {g.num_nodes}")
        pairs = None if args.pairs == 0 else args.pairs
        try:
            rep = resistance_report(g, part, sample_pairs=pairs, seed=cfg.seed, strict=False, allow_disconnected=True)
        except ValueError as exc:
            raise CliError("incompatible", str(exc)) from None
        _write_csv(out, [{"graph_id": 0, "u": u, "v": v, "R": r, "R_f": rf} for u, v, r, rf in rep.pairs])
    else:
        if args.partition:
            parts = [read_partition(args.partition)]
        else:
            cs = cfg.ints("experiment.c_values") or [2, 4, 8, 16, 32]
            parts = [make_partition(g, cfg["model.partitioner"], c, seed=cfg.seed) for c in cs]
        rows = [{"graph_id": 0, "C": p.num_blocks, "ks_score": ks_similarity(g, p)} for p in parts]
        _write_csv(out, rows)
    print(json.dumps({"csv": str(out)}))


def cmd_train(args, cfg: RunConfig) -> None:
    model, tc = cfg.model(), cfg.train()
    ds = load_data(cfg)
    expected = {"graph-classification": "classification", "graph-regression": "regression",
                "multilabel": "multilabel", "node-classification": "node-classification"}[model.head]
    if ds.task != expected:
        raise CliError("incompatible", f"dataset task {ds.task!r} does not fit head {model.head!r}")
    in_dim = ds.graphs[0].num_features
    if model.in_dim != in_dim:
        model = model.replace(in_dim=in_dim)
    if ds.num_classes and model.head in ("graph-classification", "node-classification"):
        model = model.replace(out_dim=ds.num_classes)
    ds = _holdout(ds, cfg.seed)
    params, report = train(model, tc, ds, name="train")
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, out / "model")
    _finish(report, cfg, "train")


def _model_set(cfg: RunConfig, **fixed) -> dict[str, ModelConfig]:
    base = cfg.model()
    out = {}
    for name in cfg.names("experiment.models"):
        try:
            out[name] = base.replace(variant=name, **fixed)
        except ValueError as exc:
            raise CliError("config", f"model {name!r}: {exc}") from None
    if not out:
        raise CliError("config", "experiment.models is empty")
    return out


def _tree_seed(cfg_values: dict, seed: int) -> ExperimentReport:
    from .experiments import tree_match_experiment

    cfg = RunConfig(cfg_values)
    return tree_match_experiment(cfg.ints("experiment.r_values"), _model_set(cfg), cfg.train(),
                                 samples=cfg["data.samples"], test_samples=cfg["data.test_samples"],
                                 seeds=(seed,), extra_layers=cfg["experiment.extra_layers"])


def _csl_seed(cfg_values: dict, seed: int) -> ExperimentReport:
    from .experiments import csl_experiment

    cfg = RunConfig(cfg_values)
    ds = csl_graphs(cfg["data.csl_n"], copies_per_class=cfg["data.csl_copies"], seed=cfg.seed)
    return csl_experiment(_model_set(cfg), cfg.train(), seeds=(seed,), folds=cfg["experiment.folds"], dataset=ds)


class _Bound:
    """Picklable ``fn(values, seed)`` closure for the worker pool."""

    def __init__(self, fn, values):
        self.fn, self.values = fn, values

    def __call__(self, seed):
        return self.fn(self.values, seed)


def cmd_experiment(args, cfg: RunConfig) -> None:
    from . import experiments as ex

    name, seed = args.name, cfg.seed
    if name in ("tree-match", "csl"):
        fn = _tree_seed if name == "tree-match" else _csl_seed
        reports = _per_seed(_Bound(fn, cfg.values), cfg.ints("experiment.seeds"), _workers(cfg))
        report = _merge(name, reports)
    elif name == "signal":
        d = cfg["model.dim_h"]
        models = _model_set(cfg, encoder=False, in_dim=d, pe="none")
        graphs = ex.connected_er_graphs(cfg["data.count"], seed)
        report = ex.signal_experiment(models, graphs, cfg.ints("experiment.init_seeds"),
                                      cfg["experiment.sources"], seed)
    elif name == "ks-trend":
        graphs = [peptide_like(cfg["data.n"], seed * 100_003 + i) for i in range(cfg["data.count"])]
        cs = cfg.ints("experiment.c_values") or [2, 4, 8, 16, 32]
        report = ex.ks_trend(graphs, cs, cfg["model.partitioner"], seed)
    elif name == "resistance":
        graphs = ex.connected_er_graphs(cfg["data.count"], seed, n_range=(cfg["data.n_min"], cfg["data.n"]),
                                        p_range=(cfg["data.p"], cfg["data.p"]))
        cs = cfg.ints("experiment.c_values") or [1, 2, 4]
        pairs = cfg["experiment.sample_pairs"] or None
        report = ex.resistance_trend(graphs, cs, cfg["model.k_hop"], cfg["model.partitioner"], seed, pairs)
    else:
        report = ex.scaling_benchmark(cfg.ints("experiment.n_values"), cfg["data.avg_degree"], cfg.model(),
                                      cfg["experiment.steps"], seed)
    _finish(report, cfg, name)


def cmd_bench(args, cfg: RunConfig) -> None:
    from .experiments import scaling_benchmark

    rep = scaling_benchmark([args.n], cfg["data.avg_degree"], cfg.model(), cfg["experiment.steps"], cfg.seed)
    row = rep.rows[0]
    print(json.dumps({"n": row["n"], "edges": row["edges"], "seconds_per_step": row["seconds_per_step"],
                      "peak_bytes": row["peak_bytes"]}))


# parser --------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("config", message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat 'key = value' config file")
    p.add_argument("--seed", type=int, help="master seed (overrides 'seed')")
    p.add_argument("--out", help="output path or directory (overrides 'out')")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key; repeatable")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fractalnode", description="Fractal-node message passing: data, analysis, training.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("generate", help="write a synthetic graph or dataset")
    p.add_argument("kind", choices=["er", "peptide", "tree", "csl"], help="what to generate")
    p.add_argument("--n", type=int, help="nodes (er) or atom budget (peptide)")
    p.add_argument("--p", type=float, help="edge probability (er)")
    p.add_argument("--depth", type=int, help="tree depth (tree)")
    p.add_argument("--samples", type=int, help="training trees (tree)")
    _common(p)

    p = sub.add_parser("partition", help="partition a graph into blocks")
    p.add_argument("--in", dest="input", required=True, help="edge-list file")
    p.add_argument("--method", choices=sorted(PARTITIONERS), help="partitioner (default model.partitioner)")
    p.add_argument("--C", type=int, help="number of blocks (default model.num_blocks)")
    p.add_argument("--k-hop", type=int, help="overlap expansion hops (default model.k_hop)")
    _common(p)

    p = sub.add_parser("analyze", help="resistance, KS similarity or DC check as CSV")
    p.add_argument("what", choices=["resistance", "ks", "dc"], help="analysis to run")
    p.add_argument("--in", dest="input", required=True, help="edge-list file")
    p.add_argument("--partition", help="partition file (required for resistance)")
    p.add_argument("--pairs", type=int, default=0, help="sampled node pairs; 0 means all pairs")
    _common(p)

    p = sub.add_parser("train", help="train a model on a dataset")
    _common(p)

    p = sub.add_parser("experiment", help="run a named experiment")
    p.add_argument("name", choices=EXPERIMENTS, help="experiment name")
    _common(p)

    p = sub.add_parser("bench", help="time one training step on an ER graph")
    p.add_argument("--n", type=int, default=10000, help="number of nodes")
    _common(p)
    return parser


def _overrides(args) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for item in args.set:
        if "=" not in item:
            raise CliError("config", f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v
    if args.seed is not None:
        out["seed"] = args.seed
    if args.out is not None:
        out["out"] = args.out
    if args.command == "generate":
        for flag, key in (("n", "data.n"), ("p", "data.p"), ("depth", "data.depth"), ("samples", "data.samples")):
            if getattr(args, flag) is not None:
                out[key] = getattr(args, flag)
    return out


COMMANDS = {"generate": cmd_generate, "partition": cmd_partition, "analyze": cmd_analyze,
            "train": cmd_train, "experiment": cmd_experiment, "bench": cmd_bench}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise CliError("config", "missing subcommand; choose from " + ", ".join(COMMANDS))
        cfg = config_load(args.config, _overrides(args))
        COMMANDS[args.command](args, cfg)
    except CliError as exc:
        print(f"error: {exc.kind}: {exc}", file=sys.stderr)
        return EXIT_CODES[exc.kind]
    except FileNotFoundError as exc:
        print(f"error: input: {exc}", file=sys.stderr)
        return EXIT_CODES["input"]
    except (ValueError, FloatingPointError, MemoryError) as exc:
        print(f"error: runtime: {str(exc).splitlines()[0] if str(exc) else type(exc).__name__}", file=sys.stderr)
        return EXIT_CODES["runtime"]
    return 0


if __name__ == "__main__":
    sys.exit(main())
