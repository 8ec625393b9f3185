"""Desk-scale experiment procedures.

Each function returns an :class:`ExperimentReport` whose rows are the CSV
series and whose ``final`` dict holds the summary statistics.
"""

from __future__ import annotations

import time
import tracemalloc
import warnings
from dataclasses import asdict
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import spearmanr

from . import autograd as ad
from .autograd import Tensor
from .graph import Dataset, Graph, all_pairs_distances, csl_graphs, erdos_renyi, is_connected, \
    tree_neighbours_match
from .model import ModelConfig, encode, forward, init_params, make_batch
from .partition import make_partition
from .spectral import augmented_laplacian, ks_similarity, laplacian, pseudoinverse, resistance_matrix, \
    resistance_report
from .train import ExperimentReport, TrainConfig, compute_loss, config_hash, prepare, train, Adam


# signal propagation --------------------------------------------------------

def signal_measure(states: np.ndarray, dist: np.ndarray, source: int) -> float:
    """``1/(p * max k) * sum_t sum_{u != v} sign(h_u^t) k(u, v)`` for source ``v``.

    Each scalar channel is divided by its own magnitude, so a channel counts
    +1, -1 or 0 (zero states contribute nothing); ``max k`` is the diameter.
    """
    n, p = states.shape
    diam = dist[np.isfinite(dist)].max()
    if diam == 0:
        return 0.0
    others = np.arange(n) != source
    unit = np.sign(states[others])
    return float((unit * dist[source, others][:, None]).sum() / (p * diam))


def node_representations(cfg: ModelConfig, params: dict, batch, include_mixer: bool = False) -> np.ndarray:
    """Layer-L node states.  With ``include_mixer`` (``fn_m`` only) the mixed fractal
    state of each node's block is added, as the node-level head does."""
    with ad.no_grad():
        enc = encode(cfg, params, batch)
        h = enc.h.data
        if include_mixer and enc.f_tilde is not None:
            h = h + enc.f_tilde.data.reshape(-1, cfg.dim_h)[batch.base]
    return h


def signal_propagation(cfg: ModelConfig, graphs: Sequence[Graph], sources_per_graph: int = 10, seed: int = 0,
                       init_seed: int = 0, partitions=None, include_mixer: bool = False) -> ExperimentReport:
    """Signal reach of a frozen randomly initialised model, paired with the mean pairwise
    effective resistance (original graph ``R`` and fractal-augmented ``R_f``) from the sampled sources.

    ``cfg`` must have ``encoder=False`` so the ``p = dim_h`` source vector enters the layers directly.
    """
    if cfg.encoder or cfg.in_dim != cfg.dim_h:
        raise ValueError("signal_propagation needs encoder=False and in_dim == dim_h")
    rng = np.random.default_rng(seed)
    params = init_params(cfg, init_seed)
    report = ExperimentReport("signal", meta={"seed": seed, "init_seed": init_seed,
                                              "config_hash": config_hash(cfg), "model": asdict(cfg)})
    p = cfg.dim_h
    for gid, g in enumerate(graphs):
        if not is_connected(g):
            warnings.warn(f"graph {gid} is disconnected; excluded from signal propagation")
            continue
        n = g.num_nodes
        part = None
        if cfg.uses_fractal:
            part = partitions[gid] if partitions is not None else \
                make_partition(g, cfg.partitioner, cfg.num_blocks, k_hop=cfg.k_hop, seed=seed)
        sources = rng.choice(n, size=min(sources_per_graph, n), replace=False)
        copies = []
        for v in sources:
            x = np.zeros((n, p))
            x[v] = rng.normal(size=p)
            copies.append(g.with_features(x))
        batch = make_batch(cfg, copies, None if part is None else [part] * len(copies))
        h = node_representations(cfg, params, batch, include_mixer).reshape(len(sources), n, p)
        dist = all_pairs_distances(g)
        h_sig = np.mean([signal_measure(h[i], dist, v) for i, v in enumerate(sources)])
        r = resistance_matrix(pseudoinverse(laplacian(g)))
        row = {"graph_id": gid, "n": n, "h_signal": float(h_sig),
               "R_norm": float(np.mean([r[v].sum() / (n - 1) for v in sources])),
               "R_tot_norm": float(np.triu(r, 1).sum() / (n * (n - 1) / 2))}
        if part is not None:
            rf = resistance_matrix(pseudoinverse(augmented_laplacian(g, part)))[:n, :n]
            row["R_f_norm"] = float(np.mean([rf[v].sum() / (n - 1) for v in sources]))
        report.rows.append(row)
    return report


def signal_experiment(model_configs: Mapping[str, ModelConfig], graphs: Sequence[Graph],
                      init_seeds: Sequence[int] = (0, 1, 2, 3, 4), sources_per_graph: int = 10,
                      seed: int = 0) -> ExperimentReport:
    """Signal reach per (model, init seed, graph), summarised per tercile of
    normalised total resistance (``R_tot / (n choose 2)``, lowest first)."""
    report = ExperimentReport("signal", meta={"seed": seed, "init_seeds": list(init_seeds),
                                              "models": {k: asdict(v) for k, v in model_configs.items()}})
    graphs = list(graphs)
    partitions = {}
    for name, cfg in model_configs.items():
        if cfg.uses_fractal and (cfg.num_blocks, cfg.k_hop) not in partitions:
            partitions[(cfg.num_blocks, cfg.k_hop)] = [
                make_partition(g, cfg.partitioner, cfg.num_blocks, k_hop=cfg.k_hop, seed=seed) for g in graphs]
        for init in init_seeds:
            parts = partitions.get((cfg.num_blocks, cfg.k_hop)) if cfg.uses_fractal else None
            rep = signal_propagation(cfg, graphs, sources_per_graph, seed, init, parts)
            for row in rep.rows:
                report.add(model=name, init_seed=init, **row)
    for name in model_configs:
        rows = [r for r in report.rows if r["model"] == name]
        gids = sorted({r["graph_id"] for r in rows})
        per_graph = {g: np.mean([r["h_signal"] for r in rows if r["graph_id"] == g]) for g in gids}
        rtot = {r["graph_id"]: r["R_tot_norm"] for r in rows}
        bins = resistance_terciles(np.array([rtot[g] for g in gids]))
        means = [float(np.mean([per_graph[g] for g, b in zip(gids, bins) if b == t])) for t in range(3)]
        report.final[f"{name}_tercile_h_signal"] = means
    return report


def resistance_terciles(values: np.ndarray) -> np.ndarray:
    """0/1/2 tercile index of each value (ties broken by order)."""
    ranks = np.argsort(np.argsort(values, kind="mergesort"), kind="mergesort")
    return np.minimum(3 * ranks // len(values), 2)


def connected_er_graphs(count: int, seed: int, n_range=(20, 60), p_range=(0.05, 0.2)) -> list[Graph]:
    """Connected ER graphs with varied size and density (disconnected draws are redrawn)."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        n = int(rng.integers(n_range[0], n_range[1] + 1))
        p = float(rng.uniform(*p_range))
        g = erdos_renyi(n, p, int(rng.integers(2**31)))
        if is_connected(g):
            out.append(g)
    return out


# TreeNeighboursMatch -------------------------------------------------------

def tree_match_config(template: ModelConfig, depth: int, extra_layers: int = 1) -> ModelConfig:
    leaves = 2 ** depth
    return template.replace(num_layers=depth + extra_layers, in_dim=2 * leaves, out_dim=leaves,
                            head="node-classification")


def tree_match_experiment(r_values: Sequence[int], model_configs: Mapping[str, ModelConfig],
                          train_cfg: TrainConfig, samples: int | Mapping[int, int] = 4000,
                          test_samples: int = 500, seeds: Sequence[int] = (0,),
                          extra_layers: int = 1) -> ExperimentReport:
    """Train each model on fresh trees of each depth; test on held-out trees of the same depth.

    Models get ``r + extra_layers`` layers so the leaves can reach the root.
    """
    report = ExperimentReport("tree-match", meta={"train": asdict(train_cfg), "seeds": list(seeds),
                                                  "models": {k: asdict(v) for k, v in model_configs.items()}})
    for r in r_values:
        count = samples[r] if isinstance(samples, Mapping) else samples
        for seed in seeds:
            ds = tree_neighbours_match(r, count, seed, test_samples=test_samples)
            for name, tmpl in model_configs.items():
                cfg = tree_match_config(tmpl, r, extra_layers)
                tc = train_cfg.__class__(**{**asdict(train_cfg), "seed": seed})
                t0 = time.perf_counter()
                _, rep = train(cfg, tc, ds, name=f"tree-{name}-r{r}")
                report.add(r=r, model=name, seed=seed, train_accuracy=rep.final.get("train_accuracy"),
                           test_accuracy=rep.final.get("test_accuracy"), seconds=time.perf_counter() - t0,
                           chance=1.0 / 2 ** r)
    for r in r_values:
        for name in model_configs:
            accs = [row["test_accuracy"] for row in report.rows if row["r"] == r and row["model"] == name]
            report.final[f"r{r}_{name}_test_accuracy"] = float(np.mean(accs))
    return report


# CSL -----------------------------------------------------------------------

def stratified_folds(labels: np.ndarray, folds: int, seed: int) -> list[np.ndarray]:
    """Shuffle each class and deal its members round-robin into ``folds`` folds."""
    rng = np.random.default_rng(seed)
    out = [[] for _ in range(folds)]
    for c in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == c))
        for i, m in enumerate(members):
            out[i % folds].append(m)
    return [np.sort(np.array(f, dtype=np.int64)) for f in out]


def csl_experiment(model_configs: Mapping[str, ModelConfig], train_cfg: TrainConfig, seeds: Sequence[int] = (0,),
                   folds: int = 5, dataset: Dataset | None = None) -> ExperimentReport:
    """k-fold stratified CSL classification; rows are per (model, seed, fold) test accuracies."""
    ds = dataset if dataset is not None else csl_graphs()
    labels = np.array([g.graph_label for g in ds.graphs])
    report = ExperimentReport("csl", meta={"train": asdict(train_cfg), "seeds": list(seeds), "folds": folds,
                                           "models": {k: asdict(v) for k, v in model_configs.items()}})
    for name, cfg in model_configs.items():
        cfg = cfg.replace(head="graph-classification", out_dim=ds.num_classes, in_dim=ds.graphs[0].num_features)
        for seed in seeds:
            prepared = prepare(cfg, ds.graphs, seed=seed)
            parts = stratified_folds(labels, folds, seed)
            for k in range(folds):
                test_idx = parts[k]
                train_idx = np.sort(np.concatenate([parts[j] for j in range(folds) if j != k]))
                tc = train_cfg.__class__(**{**asdict(train_cfg), "seed": seed * 1000 + k})
                _, rep = train(cfg, tc, ds, prepared=prepared, train_idx=train_idx, val_idx=[],
                               test_idx=test_idx, name=f"csl-{name}")
                report.add(model=name, seed=seed, fold=k, train_accuracy=rep.final["train_accuracy"],
                           test_accuracy=rep.final["test_accuracy"])
        accs = [r["test_accuracy"] for r in report.rows if r["model"] == name]
        report.final[f"{name}_test_accuracy"] = float(np.mean(accs))
    return report


# trends --------------------------------------------------------------------

def ks_trend(graphs: Sequence[Graph], c_values: Sequence[int] = (2, 4, 8, 16, 32), method: str = "multilevel",
             seed: int = 0, normalized: bool = False) -> ExperimentReport:
    """KS structural similarity per (graph, C) and the Spearman correlation of C with the mean score."""
    report = ExperimentReport("ks-trend", meta={"seed": seed, "method": method, "normalized": normalized})
    for gid, g in enumerate(graphs):
        for c in c_values:
            part = make_partition(g, method, c, seed=seed)
            report.add(graph_id=gid, C=c, ks_score=ks_similarity(g, part, normalized=normalized))
    cs = [c for c in c_values if c > 1]
    means = [float(np.mean([r["ks_score"] for r in report.rows if r["C"] == c])) for c in cs]
    report.final["mean_ks_by_C"] = dict(zip(map(str, cs), means))
    report.final["spearman"] = float(spearmanr(cs, means).statistic) if len(cs) > 1 else float("nan")
    return report


def resistance_trend(graphs: Sequence[Graph], c_values: Sequence[int] = (1, 2, 4), k_hop: int = 1,
                     method: str = "multilevel", seed: int = 0, sample_pairs: int | None = None) -> ExperimentReport:
    """Total resistance of the augmented graph per (graph, C); also checks ``R_f <= R`` on every pair."""
    report = ExperimentReport("resistance", meta={"seed": seed, "k_hop": k_hop, "method": method})
    for gid, g in enumerate(graphs):
        for c in c_values:
            part = make_partition(g, method, c, k_hop=k_hop, seed=seed)
            rep = resistance_report(g, part, sample_pairs=sample_pairs, seed=seed, strict=False)
            report.add(graph_id=gid, C=c, R_tot=rep.total_R, R_tot_f=rep.total_R_f,
                       pairs=len(rep.pairs), violations=len(rep.violations))
    report.final["violations"] = int(sum(r["violations"] for r in report.rows))
    if len(c_values) > 1:
        lo, hi = min(c_values), max(c_values)
        by = {(r["graph_id"], r["C"]): r["R_tot_f"] for r in report.rows}
        ok = [by[(i, hi)] <= by[(i, lo)] + 1e-9 for i in range(len(graphs))]
        report.final[f"frac_C{hi}_le_C{lo}"] = float(np.mean(ok))
        report.final["failures"] = [i for i, good in enumerate(ok) if not good]
    return report


def loglog_slope(x: Sequence[float], y: Sequence[float]) -> float:
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def scaling_benchmark(n_values: Sequence[int] = (1000, 10000, 50000), avg_degree: float = 5.0,
                      cfg: ModelConfig | None = None, steps: int = 3, seed: int = 0) -> ExperimentReport:
    """Wall-clock and peak traced memory of one training step (forward + backward + Adam)
    on ER graphs of fixed average degree.  Partitions are precomputed and not timed."""
    cfg = cfg or ModelConfig(num_layers=2, dim_h=32, num_blocks=32, k_hop=1, variant="fn", out_dim=2)
    report = ExperimentReport("scaling", meta={"seed": seed, "model": asdict(cfg), "steps": steps,
                                               "avg_degree": avg_degree})
    rng = np.random.default_rng(seed)
    for n in n_values:
        g = erdos_renyi(n, avg_degree / (n - 1), seed, node_features=rng.normal(size=(n, cfg.in_dim)))
        g = Graph(g.num_nodes, g.indptr, g.indices, g.node_features, None, None, 0)
        part = make_partition(g, cfg.partitioner, cfg.num_blocks, k_hop=cfg.k_hop, seed=seed) \
            if cfg.uses_fractal else None
        batch = make_batch(cfg, [g], None if part is None else [part])
        params = init_params(cfg, seed)
        opt = Adam(params, 1e-3)

        def step():
            with ad.Tape() as tape:
                loss = compute_loss(cfg, forward(cfg, params, batch), batch)
            opt.zero_grad()
            tape.backward(loss)
            opt.step()

        step()  # warm-up
        times = []
        for _ in range(steps):
            t0 = time.perf_counter()
            step()
            times.append(time.perf_counter() - t0)
        tracemalloc.start()
        step()
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()
        report.add(n=n, edges=g.num_edges, seconds_per_step=float(np.median(times)), peak_bytes=int(peak))
    ns = report.column("n")
    report.final["time_slope"] = loglog_slope(ns, report.column("seconds_per_step"))
    report.final["memory_slope"] = loglog_slope(ns, report.column("peak_bytes"))
    return report
