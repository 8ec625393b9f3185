"""Laplacians, effective resistance (plain and fractal-augmented), DC check,
betweenness centrality and KS structural similarity."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import cg

from .graph import Graph, connected_components, from_edge_list, induced_subgraph
from .partition import Partition

DENSE_CAP = 2000


def laplacian(graph: Graph, normalized: bool = False, dense_cap: int = DENSE_CAP) -> np.ndarray:
    """Combinatorial ``D - A`` or symmetric-normalised ``I - D^-1/2 A D^-1/2`` (dense)."""
    n = graph.num_nodes
    if n > dense_cap:
        raise MemoryError(
            f"{n} nodes exceeds the dense cap of {dense_cap}; use effective_resistance_cg or sample pairs")
    a = graph.adjacency().toarray()
    deg = a.sum(axis=1)
    if not normalized:
        return np.diag(deg) - a
    inv = np.zeros(n)
    inv[deg > 0] = 1.0 / np.sqrt(deg[deg > 0])
    lap = -(inv[:, None] * a * inv[None, :])
    lap[np.diag_indices(n)] = (deg > 0).astype(float)
    return lap


def pseudoinverse(m: np.ndarray, rank_tol: float = 1e-10) -> np.ndarray:
    """Moore-Penrose inverse of a symmetric matrix via ``eigh``.

    Eigenvalues with ``|s| <= rank_tol * max|s|`` are treated as zero.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"pseudoinverse needs a square matrix, got {m.shape}")
    scale = max(np.abs(m).max(initial=0.0), 1.0)
    if np.abs(m - m.T).max(initial=0.0) > 1e-12 * scale:
        raise ValueError("pseudoinverse needs a symmetric matrix")
    w, v = np.linalg.eigh(m)
    cutoff = rank_tol * np.abs(w).max(initial=0.0)
    inv = np.zeros_like(w)
    keep = np.abs(w) > cutoff
    inv[keep] = 1.0 / w[keep]
    return (v * inv) @ v.T


def resistance_matrix(lpinv: np.ndarray) -> np.ndarray:
    d = np.diag(lpinv)
    return d[:, None] + d[None, :] - 2 * lpinv


def _same_component(graph: Graph, u: int, v: int) -> bool:
    _, labels = connected_components(graph)
    return labels[u] == labels[v]


def effective_resistance(graph: Graph, u: int, v: int, lpinv: np.ndarray | None = None) -> float:
    """``(1_u - 1_v)^T L^+ (1_u - 1_v)`` with the combinatorial Laplacian."""
    if u == v:
        return 0.0
    if not _same_component(graph, u, v):
        raise ValueError(f"nodes {u} and {v} are in different components (infinite resistance)")
    if lpinv is None:
        if graph.num_nodes > DENSE_CAP:
            return effective_resistance_cg(graph, u, v)
        lpinv = pseudoinverse(laplacian(graph))
    return float(lpinv[u, u] + lpinv[v, v] - 2 * lpinv[u, v])


def effective_resistance_cg(graph: Graph, u: int, v: int, tol: float = 1e-10) -> float:
    """Sparse route: solve ``L x = 1_u - 1_v`` by CG inside the component, zero-mean projected."""
    if u == v:
        return 0.0
    _, labels = connected_components(graph)
    if labels[u] != labels[v]:
        raise ValueError(f"nodes {u} and {v} are in different components (infinite resistance)")
    comp = np.flatnonzero(labels == labels[u])
    sub = induced_subgraph(graph, comp)
    a = sub.adjacency()
    lap = sp.diags(np.asarray(a.sum(axis=1)).ravel()) - a
    pos = {int(x): i for i, x in enumerate(comp)}
    b = np.zeros(len(comp))
    b[pos[u]], b[pos[v]] = 1.0, -1.0
    x, info = cg(lap, b, rtol=tol, maxiter=10 * len(comp))
    if info != 0:
        raise RuntimeError(f"CG did not converge (info={info})")
    x -= x.mean()
    return float(x[pos[u]] - x[pos[v]])


def augmented_graph(graph: Graph, partition: Partition) -> Graph:
    """Original graph plus one node per block, joined to every block member."""
    n = graph.num_nodes
    extra = [np.stack([np.asarray(b), np.full(len(b), n + i)], axis=1) for i, b in enumerate(partition.blocks)]
    edges = np.concatenate([graph.undirected_edges()] + extra)
    return from_edge_list(n + partition.num_blocks, edges)


def augmented_laplacian(graph: Graph, partition: Partition, dense_cap: int = DENSE_CAP) -> np.ndarray:
    """Combinatorial Laplacian of the fractal-augmented graph, order ``n + C``."""
    return laplacian(augmented_graph(graph, partition), dense_cap=dense_cap)


def total_resistance(graph: Graph, lpinv: np.ndarray | None = None) -> float:
    """Sum of R(u, v) over unordered pairs, ``n * tr(L^+)`` for a connected graph."""
    if lpinv is None:
        lpinv = pseudoinverse(laplacian(graph))
    return float(graph.num_nodes * np.trace(lpinv))


def total_resistance_original_pairs(lpinv: np.ndarray, n: int) -> float:
    """Sum of R over unordered pairs of the first ``n`` nodes of ``lpinv``'s graph."""
    sub = lpinv[:n, :n]
    return float(n * np.trace(sub) - sub.sum())


@dataclass
class ResistanceReport:
    pairs: list[tuple[int, int, float, float]]
    total_R: float
    total_R_f: float
    num_blocks: int
    tol: float = 1e-9
    violations: list[tuple[int, int, float, float]] = field(default_factory=list)

    def check(self) -> None:
        if self.violations:
            u, v, r, rf = self.violations[0]
            raise AssertionError(f"R_f({u},{v})={rf!r} exceeds R={r!r}")


def resistance_report(graph: Graph, partition: Partition, sample_pairs: int | None = 100, seed: int = 0,
                      tol: float = 1e-9, strict: bool = True, allow_disconnected: bool = False) -> ResistanceReport:
    """Per-pair R and R_f for sampled node pairs, plus totals over original-node pairs.

    ``sample_pairs=None`` reports every pair.  With ``allow_disconnected``
    pairs in different components get ``R = inf`` (and so does ``total_R``).
    """
    n = graph.num_nodes
    ncomp, labels = connected_components(graph)
    if ncomp != 1 and not allow_disconnected:
        raise ValueError("resistance_report needs a connected graph")
    lp = pseudoinverse(laplacian(graph))
    lpf = pseudoinverse(augmented_laplacian(graph, partition))
    r = resistance_matrix(lp)
    if ncomp != 1:
        r[labels[:, None] != labels[None, :]] = np.inf
    rf = resistance_matrix(lpf)[:n, :n]
    iu, ju = np.triu_indices(n, 1)
    if sample_pairs is not None and sample_pairs < len(iu):
        rng = np.random.default_rng(seed)
        pick = np.sort(rng.choice(len(iu), size=sample_pairs, replace=False))
        iu, ju = iu[pick], ju[pick]
    pairs = [(int(u), int(v), float(r[u, v]), float(rf[u, v])) for u, v in zip(iu, ju)]
    total = total_resistance(graph, lp) if ncomp == 1 else float("inf")
    report = ResistanceReport(pairs, total, total_resistance_original_pairs(lpf, n),
                              partition.num_blocks, tol)
    report.violations = [p for p in pairs if p[3] > p[2] + tol]
    if strict:
        report.check()
    return report


def dc_check(features: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Mean pooling vs. the DC reconstruction ``DFT^-1 diag(1,0,..,0) DFT H``.

    Returns (mean row, DC row, max abs difference over every row of the DC
    reconstruction against the mean).
    """
    h = np.asarray(features, dtype=np.float64)
    if h.ndim == 1:
        h = h[:, None]
    n = h.shape[0]
    if n < 1:
        raise ValueError("dc_check needs at least one row")
    k = np.arange(n)
    dft = np.exp(-2j * np.pi * np.outer(k, k) / n) / np.sqrt(n)
    keep = np.zeros(n)
    keep[0] = 1.0
    dc = (dft.conj().T @ (keep[:, None] * (dft @ h)))
    mean_row = h.mean(axis=0)
    diff = max(np.abs(dc.real - mean_row[None, :]).max(), np.abs(dc.imag).max())
    return mean_row, dc.real[0], float(diff)


def betweenness(graph: Graph) -> np.ndarray:
    """Brandes betweenness, unnormalised, each unordered pair counted once."""
    n = graph.num_nodes
    cb = np.zeros(n)
    indptr, indices = graph.indptr, graph.indices
    for s in range(n):
        stack = []
        preds: list[list[int]] = [[] for _ in range(n)]
        sigma = np.zeros(n)
        sigma[s] = 1.0
        dist = np.full(n, -1, dtype=np.int64)
        dist[s] = 0
        q = deque([s])
        while q:
            v = q.popleft()
            stack.append(v)
            for w in indices[indptr[v]: indptr[v + 1]]:
                if dist[w] < 0:
                    dist[w] = dist[v] + 1
                    q.append(w)
                if dist[w] == dist[v] + 1:
                    sigma[w] += sigma[v]
                    preds[w].append(v)
        delta = np.zeros(n)
        while stack:
            w = stack.pop()
            for v in preds[w]:
                delta[v] += sigma[v] / sigma[w] * (1.0 + delta[w])
            if w != s:
                cb[w] += delta[w]
    return cb / 2.0


def ks_statistic(a: np.ndarray, b: np.ndarray) -> float:
    """Two-sample Kolmogorov-Smirnov statistic ``sup |F_a - F_b|``."""
    a, b = np.sort(np.asarray(a, float)), np.sort(np.asarray(b, float))
    grid = np.concatenate([a, b])
    fa = np.searchsorted(a, grid, side="right") / len(a)
    fb = np.searchsorted(b, grid, side="right") / len(b)
    return float(np.abs(fa - fb).max())


def ks_similarity(graph: Graph, partition: Partition, normalized: bool = False,
                  return_all: bool = False):
    """``max_i (1 - D_i)`` where ``D_i`` compares full-graph betweenness with the
    betweenness recomputed on block ``i``'s induced subgraph."""
    full = betweenness(graph)
    if normalized:
        full = _normalize_bc(full, graph.num_nodes)
    scores = []
    for blk in partition.blocks:
        if len(blk) == 0:
            raise ValueError("ks_similarity needs nonempty blocks")
        sub = betweenness(induced_subgraph(graph, blk))
        if normalized:
            sub = _normalize_bc(sub, len(blk))
        scores.append(1.0 - ks_statistic(sub, full))
    best = float(max(scores))
    return (best, scores) if return_all else best


def _normalize_bc(bc: np.ndarray, n: int) -> np.ndarray:
    pairs = (n - 1) * (n - 2) / 2
    return bc / pairs if pairs > 0 else bc
