"""Adam, task metrics, the supervised training loop and experiment reports."""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, is_dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import autograd as ad
from .autograd import Tensor
from .graph import Dataset, Graph
from .model import ModelConfig, Batch, forward, init_params, lap_pe, make_batch, rwse, fractal_positional_encoding
from .partition import Partition, make_partition


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    batch_size: int = 32
    seed: int = 0
    patience: int = 0          # 0 disables early stopping
    loss: str = "auto"         # auto | cross-entropy | binary-cross-entropy | l1

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be non-negative")
        if self.loss not in ("auto", "cross-entropy", "binary-cross-entropy", "l1"):
            raise ValueError(f"unknown loss {self.loss!r}")


class Adam:
    """Adam with L2 weight decay folded into the gradient."""

    def __init__(self, params: dict[str, Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / (1 - b1 ** self.t)
            vhat = self.v[k] / (1 - b2 ** self.t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# metrics -------------------------------------------------------------------

def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=-1) == labels)) if len(labels) else float("nan")


def mae(pred: np.ndarray, target: np.ndarray) -> float:
    return float(np.mean(np.abs(np.asarray(pred).reshape(np.shape(target)) - target)))


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """Step-wise AP: ``sum_n (R_n - R_{n-1}) P_n`` over distinct score thresholds."""
    scores, labels = np.asarray(scores, float), np.asarray(labels, float)
    pos = labels.sum()
    if pos == 0:
        return float("nan")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]   # end of each tie group
    tp = np.cumsum(y)[last]
    precision = tp / (last + 1)
    recall = tp / pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney form with average ranks for ties."""
    from scipy.stats import rankdata

    scores, labels = np.asarray(scores, float), np.asarray(labels, bool)
    n_pos, n_neg = labels.sum(), (~labels).sum()
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def _per_column(fn, scores, labels) -> float:
    scores, labels = np.atleast_2d(scores), np.atleast_2d(labels)
    vals = []
    for j in range(labels.shape[1]):
        ok = ~np.isnan(labels[:, j])
        v = fn(scores[ok, j], labels[ok, j])
        if not np.isnan(v):
            vals.append(v)
    return float(np.mean(vals)) if vals else float("nan")


def metrics(predictions: np.ndarray, labels: np.ndarray, task: str) -> dict[str, float]:
    """Accuracy for (node-)classification, AP and ROCAUC for multilabel, MAE for regression."""
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if task in ("classification", "node-classification"):
        return {"accuracy": accuracy(predictions, labels.astype(np.int64))}
    if task == "multilabel":
        return {"ap": _per_column(average_precision, predictions, labels),
                "rocauc": _per_column(roc_auc, predictions, labels)}
    if task == "regression":
        return {"mae": mae(predictions, labels)}
    raise ValueError(f"unknown task {task!r}")


PRIMARY_METRIC = {"classification": ("accuracy", 1), "node-classification": ("accuracy", 1),
                  "multilabel": ("ap", 1), "regression": ("mae", -1)}


# reports -------------------------------------------------------------------

def config_hash(*configs) -> str:
    blob = json.dumps([asdict(c) if is_dataclass(c) else c for c in configs], sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class ExperimentReport:
    name: str
    rows: list[dict] = field(default_factory=list)
    final: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def add(self, **row) -> None:
        self.rows.append(row)

    def column(self, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.rows])

    def write(self, out_dir: str | Path, stem: str | None = None) -> tuple[Path, Path]:
        """Write ``<stem>.csv`` (rows) and ``<stem>.json`` (manifest with final metrics)."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stem = stem or self.name
        csv_path, json_path = out / f"{stem}.csv", out / f"{stem}.json"
        cols: list[str] = []
        for r in self.rows:
            cols += [k for k in r if k not in cols]
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            w.writerows(self.rows)
        manifest = {"name": self.name, "version": __version__, **self.meta, "final": self.final}
        json_path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_jsonable) + "\n")
        return csv_path, json_path


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    if is_dataclass(x):
        return asdict(x)
    return str(x)


# data preparation ----------------------------------------------------------

@dataclass
class Prepared:
    graphs: list[Graph]
    partitions: list[Partition] | None
    node_pe: list[np.ndarray] | None
    fractal_pe: list[np.ndarray] | None

    def batch(self, cfg: ModelConfig, idx: Sequence[int]) -> Batch:
        pick = lambda xs: None if xs is None else [xs[i] for i in idx]
        return make_batch(cfg, pick(self.graphs), pick(self.partitions), pick(self.node_pe), pick(self.fractal_pe))


def prepare(cfg: ModelConfig, graphs: Sequence[Graph], partitions: Sequence[Partition] | None = None,
            seed: int = 0) -> Prepared:
    """Partition every graph (unless given) and precompute positional encodings once."""
    graphs = list(graphs)
    if cfg.uses_fractal and partitions is None:
        partitions = [make_partition(g, cfg.partitioner, cfg.num_blocks, k_hop=cfg.k_hop, seed=seed) for g in graphs]
    node_pe = None
    if cfg.pe != "none":
        fn = lap_pe if cfg.pe == "lap" else rwse
        node_pe = [fn(g, cfg.pe_dim) for g in graphs]
    fpe = None
    if cfg.fractal_pe:
        fpe = [fractal_positional_encoding(g, p, cfg.fpe_dim) for g, p in zip(graphs, partitions)]
    return Prepared(graphs, None if partitions is None else list(partitions), node_pe, fpe)


# training ------------------------------------------------------------------

_HEAD_TASK = {"graph-classification": "classification", "graph-regression": "regression",
              "multilabel": "multilabel", "node-classification": "node-classification"}


def _targets(cfg: ModelConfig, batch: Batch):
    if cfg.head == "node-classification":
        return batch.node_labels
    return batch.graph_labels


def compute_loss(cfg: ModelConfig, out: Tensor, batch: Batch, loss: str = "auto") -> Tensor:
    y = _targets(cfg, batch)
    if y is None:
        raise ValueError(f"batch carries no labels for head {cfg.head!r}")
    if loss == "auto":
        loss = {"graph-classification": "cross-entropy", "node-classification": "cross-entropy",
                "multilabel": "binary-cross-entropy", "graph-regression": "l1"}[cfg.head]
    if cfg.head == "node-classification":
        mask = y >= 0
        out = ad.gather(out, np.flatnonzero(mask))
        y = y[mask]
    if loss == "cross-entropy":
        return ad.cross_entropy(out, y.astype(np.int64))
    if loss == "binary-cross-entropy":
        return ad.binary_cross_entropy(out, np.asarray(y, dtype=np.float64).reshape(out.shape))
    return ad.l1_loss(out, np.asarray(y, dtype=np.float64).reshape(out.shape))


def predict(cfg: ModelConfig, params: dict, data: Prepared, idx: Sequence[int], batch_size: int = 64):
    """Stacked predictions and targets (node head: labelled nodes only)."""
    preds, ys = [], []
    with ad.no_grad():
        for s in range(0, len(idx), batch_size):
            b = data.batch(cfg, idx[s: s + batch_size])
            out = forward(cfg, params, b).data
            y = _targets(cfg, b)
            if cfg.head == "node-classification":
                out, y = out[y >= 0], y[y >= 0]
            preds.append(out)
            ys.append(y)
    return np.concatenate(preds), np.concatenate(ys)


def evaluate(cfg: ModelConfig, params: dict, data: Prepared, idx: Sequence[int]) -> dict[str, float]:
    if len(idx) == 0:
        return {}
    p, y = predict(cfg, params, data, idx)
    return metrics(p, y, _HEAD_TASK[cfg.head])


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, dataset: Dataset, *,
          prepared: Prepared | None = None, params: dict | None = None,
          train_idx=None, val_idx=None, test_idx=None, name: str = "train") -> tuple[dict, ExperimentReport]:
    """Mini-batch Adam training; keeps the parameters of the best validation epoch.

    Without a validation split the final epoch's parameters are returned.
    Deterministic for a fixed ``train_cfg.seed``.
    """
    task = _HEAD_TASK[model_cfg.head]
    if dataset.task != task:
        raise ValueError(f"dataset task {dataset.task!r} does not match head {model_cfg.head!r}")
    seeds = np.random.SeedSequence(train_cfg.seed).spawn(3)
    init_seed, part_seed = (int(s.generate_state(1)[0]) for s in seeds[:2])
    rng = np.random.default_rng(seeds[2])
    if prepared is None:
        prepared = prepare(model_cfg, dataset.graphs, seed=part_seed)
    if params is None:
        params = init_params(model_cfg, init_seed)
    split = dataset.split
    train_idx = np.asarray(split.get("train", []) if train_idx is None else train_idx, dtype=np.int64)
    val_idx = np.asarray(split.get("val", []) if val_idx is None else val_idx, dtype=np.int64)
    test_idx = np.asarray(split.get("test", []) if test_idx is None else test_idx, dtype=np.int64)
    opt = Adam(params, train_cfg.lr, (train_cfg.beta1, train_cfg.beta2), train_cfg.adam_eps, train_cfg.weight_decay)
    key, sign = PRIMARY_METRIC[task]
    report = ExperimentReport(name, meta={"seed": train_cfg.seed, "config_hash": config_hash(model_cfg, train_cfg),
                                          "model": asdict(model_cfg), "train": asdict(train_cfg)})
    best_score, best_params, best_epoch, stale = -np.inf, None, -1, 0

    for epoch in range(train_cfg.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(train_idx)
        losses = []
        for s in range(0, len(order), train_cfg.batch_size):
            b = prepared.batch(model_cfg, order[s: s + train_cfg.batch_size])
            with ad.Tape() as tape:
                loss = compute_loss(model_cfg, forward(model_cfg, params, b, training=True, rng=rng), b,
                                    train_cfg.loss)
            if not np.isfinite(loss.data):
                raise FloatingPointError(f"non-finite loss {float(loss.data)} at epoch {epoch}, batch {s // train_cfg.batch_size}")
            opt.zero_grad()
            tape.backward(loss)
            opt.step()
            losses.append(float(loss.data))
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else float("nan")}
        val = evaluate(model_cfg, params, prepared, val_idx)
        row.update({f"val_{k}": v for k, v in val.items()})
        row["seconds"] = time.perf_counter() - t0
        report.rows.append(row)
        score = sign * val[key] if val else epoch
        if score > best_score:
            best_score, best_epoch, stale = score, epoch, 0
            best_params = {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in params.items()}
        else:
            stale += 1
            if train_cfg.patience and stale >= train_cfg.patience:
                break

    final_params = best_params if best_params is not None else params
    report.final = {"best_epoch": best_epoch}
    for split_name, idx in (("train", train_idx), ("val", val_idx), ("test", test_idx)):
        report.final.update({f"{split_name}_{k}": v for k, v in evaluate(model_cfg, final_params, prepared, idx).items()})
    return final_params, report
