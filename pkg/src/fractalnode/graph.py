"""Immutable CSR graphs, synthetic generators and the edge-list file format.

Edge-list format (text)::

    n m d_in
    u v            # m lines, one per undirected edge, u < v
    x_1 ... x_d    # n lines of node features when d_in > 0

Labels live in a sibling ``<path>.labels`` file::

    graph_label <int | real | none>
    node_labels <0 | 1>
    <label>        # n lines when node_labels is 1
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

MAX_TREE_DEPTH = 12


def _freeze(a: np.ndarray | None) -> np.ndarray | None:
    if a is not None:
        a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Graph:
    num_nodes: int
    indptr: np.ndarray
    indices: np.ndarray
    node_features: np.ndarray
    edge_features: np.ndarray | None = None
    node_labels: np.ndarray | None = None
    graph_label: object = None

    def __post_init__(self):
        for a in (self.indptr, self.indices, self.node_features, self.edge_features, self.node_labels):
            if isinstance(a, np.ndarray):
                _freeze(a)

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    @property
    def num_edges(self) -> int:
        """Number of undirected edges."""
        return len(self.indices) // 2

    @property
    def num_features(self) -> int:
        return self.node_features.shape[1]

    def edge_index(self) -> tuple[np.ndarray, np.ndarray]:
        """(target, source) per directed edge, in CSR order."""
        dst = np.repeat(np.arange(self.num_nodes), self.degrees)
        return dst, self.indices.copy()

    def undirected_edges(self) -> np.ndarray:
        dst, src = self.edge_index()
        keep = dst < src
        return np.stack([dst[keep], src[keep]], axis=1)

    def neighbors(self, v: int) -> np.ndarray:
        return self.indices[self.indptr[v]: self.indptr[v + 1]]

    def adjacency(self, weights: np.ndarray | None = None) -> sp.csr_matrix:
        w = np.ones(len(self.indices)) if weights is None else weights
        return sp.csr_matrix((w, self.indices, self.indptr), shape=(self.num_nodes, self.num_nodes))

    def with_features(self, node_features: np.ndarray) -> "Graph":
        return Graph(self.num_nodes, self.indptr, self.indices, np.asarray(node_features, dtype=np.float64),
                     self.edge_features, self.node_labels, self.graph_label)

    def permuted(self, perm: np.ndarray) -> "Graph":
        """Relabel node ``v`` as ``perm[v]``."""
        perm = np.asarray(perm)
        edges = perm[self.undirected_edges()]
        inv = np.argsort(perm)
        efeat = None
        if self.edge_features is not None:
            dst, src = self.edge_index()
            keep = dst < src
            efeat = self.edge_features[keep]
        labels = None if self.node_labels is None else self.node_labels[inv]
        return from_edge_list(self.num_nodes, edges, self.node_features[inv], edge_features=efeat,
                              node_labels=labels, graph_label=self.graph_label)


@dataclass(frozen=True)
class Dataset:
    graphs: list[Graph]
    split: dict[str, np.ndarray]
    task: str
    num_classes: int = 0
    meta: dict = field(default_factory=dict)

    TASKS = ("classification", "multilabel", "regression", "node-classification")

    def __post_init__(self):
        if self.task not in self.TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        seen: set[int] = set()
        for name, idx in self.split.items():
            idx = set(int(i) for i in idx)
            if any(i < 0 or i >= len(self.graphs) for i in idx):
                raise ValueError(f"split {name!r} has out-of-range indices")
            if seen & idx:
                raise ValueError(f"split {name!r} overlaps another split")
            seen |= idx

    def __len__(self) -> int:
        return len(self.graphs)

    def subset(self, name: str) -> list[Graph]:
        return [self.graphs[i] for i in self.split[name]]


def from_edge_list(n: int, edges: Iterable[Sequence[int]], node_features: np.ndarray | None = None, *,
                   edge_features: np.ndarray | None = None, node_labels=None, graph_label=None) -> Graph:
    """Build a symmetric CSR graph; duplicates collapse, self-loops are rejected.

    ``edge_features`` (one row per input edge) is copied to both directions;
    for duplicate edges the first occurrence wins.
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    e = np.asarray(list(edges) if not isinstance(edges, np.ndarray) else edges, dtype=np.int64).reshape(-1, 2)
    if e.size and (e.min() < 0 or e.max() >= n):
        bad = e[(e < 0).any(axis=1) | (e >= n).any(axis=1)][0]
        raise IndexError(f"edge {tuple(bad)} out of range for n={n}")
    if np.any(e[:, 0] == e[:, 1]):
        v = int(e[e[:, 0] == e[:, 1]][0, 0])
        raise ValueError(f"self-loop at node {v} rejected")

    dst = np.concatenate([e[:, 0], e[:, 1]])
    src = np.concatenate([e[:, 1], e[:, 0]])
    key = dst * max(n, 1) + src
    _, first = np.unique(key, return_index=True)
    dst, src = dst[first], src[first]  # np.unique sorts by key: (dst, src) lexicographic
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(dst, minlength=n), out=indptr[1:])

    efeat = None
    if edge_features is not None:
        ef = np.asarray(edge_features, dtype=np.float64)
        if ef.ndim == 1:
            ef = ef[:, None]
        if len(ef) != len(e):
            raise ValueError("edge_features must have one row per input edge")
        efeat = np.concatenate([ef, ef])[first]

    if node_features is None:
        node_features = np.ones((n, 1))
    x = np.asarray(node_features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] != n:
        raise ValueError(f"node_features has {x.shape[0]} rows for n={n}")
    labels = None if node_labels is None else np.asarray(node_labels)
    return Graph(n, indptr, src.astype(np.int64), x.copy(), efeat, labels, graph_label)


def _pairs_from_linear(k: np.ndarray, n: int) -> np.ndarray:
    """Map linear indices over the strict upper triangle to (i, j), i < j."""
    # row i starts at offset i*n - i*(i+1)/2
    i = (n - 2 - np.floor(np.sqrt(-8 * k + 4 * n * (n - 1) - 7) / 2.0 - 0.5)).astype(np.int64)
    start = i * n - i * (i + 1) // 2
    j = k - start + i + 1
    return np.stack([i, j], axis=1)


def erdos_renyi(n: int, p: float, seed: int, node_features: np.ndarray | None = None) -> Graph:
    """G(n, p): every unordered pair is an edge independently with probability p."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p={p} outside [0, 1]")
    if n < 0:
        raise ValueError("n must be non-negative")
    rng = np.random.default_rng(seed)
    total = n * (n - 1) // 2
    if total <= 4_000_000:
        chosen = np.flatnonzero(rng.random(total) < p)
    else:
        # conditional on the count, the edge set is a uniform subset
        m = rng.binomial(total, p)
        chosen = np.unique(rng.integers(0, total, size=m))
        while len(chosen) < m:
            extra = rng.integers(0, total, size=m - len(chosen))
            chosen = np.unique(np.concatenate([chosen, extra]))
    edges = _pairs_from_linear(chosen.astype(np.int64), n) if len(chosen) else np.zeros((0, 2), np.int64)
    return from_edge_list(n, edges, node_features)


def tree_neighbours_match(depth: int, samples: int, seed: int, *, test_samples: int = 0,
                          max_depth: int = MAX_TREE_DEPTH) -> Dataset:
    """Complete binary trees where the root must recover the class of a matching leaf.

    Nodes are in heap order (root 0, children ``2i+1``, ``2i+2``).  Every leaf
    carries a distinct attribute ("key") and a distinct class; the root carries
    the query key.  Features are ``[one_hot(key) | one_hot(class)]`` with zero
    blocks where a node has no key or class.  Only the root is labelled
    (``node_labels`` is -1 elsewhere); ``graph_label`` repeats the target.
    """
    if depth < 1:
        raise ValueError("depth must be >= 1")
    if depth > max_depth:
        raise MemoryError(f"depth {depth} exceeds the configured cap of {max_depth}")
    rng = np.random.default_rng(seed)
    n = 2 ** (depth + 1) - 1
    n_leaves = 2 ** depth
    first_leaf = n_leaves - 1
    child = np.arange(1, n)
    edges = np.stack([(child - 1) // 2, child], axis=1)
    base = from_edge_list(n, edges)

    graphs = []
    for _ in range(samples + test_samples):
        keys = rng.permutation(n_leaves)
        classes = rng.permutation(n_leaves)
        target_leaf = rng.integers(n_leaves)
        x = np.zeros((n, 2 * n_leaves))
        leaves = np.arange(first_leaf, n)
        x[leaves, keys] = 1.0
        x[leaves, n_leaves + classes] = 1.0
        x[0, keys[target_leaf]] = 1.0
        labels = np.full(n, -1, dtype=np.int64)
        labels[0] = classes[target_leaf]
        graphs.append(Graph(n, base.indptr, base.indices, x, None, labels, int(classes[target_leaf])))
    split = {"train": np.arange(samples), "test": np.arange(samples, samples + test_samples)}
    return Dataset(graphs, split, "node-classification", n_leaves, {"depth": depth})


CSL_SKIPS = (2, 3, 4, 5, 6, 9, 11, 12, 13, 16)


def csl_graph(n: int, skip: int) -> Graph:
    if not 1 < skip < n / 2:
        raise ValueError(f"skip length {skip} must satisfy 1 < s < n/2 (n={n})")
    i = np.arange(n)
    edges = np.concatenate([np.stack([i, (i + 1) % n], 1), np.stack([i, (i + skip) % n], 1)])
    return from_edge_list(n, edges)


def csl_graphs(n: int = 41, skip_lengths: Sequence[int] = CSL_SKIPS, copies_per_class: int = 15,
               seed: int = 0) -> Dataset:
    """Circular skip-link graphs: a cycle plus chords ``i ~ i+s (mod n)``.

    Skip links form ``gcd(n, s)`` disjoint cycles; with ``1 < s < n/2`` they
    never coincide with cycle edges or each other, so every graph is 4-regular
    whatever the gcd.  Each copy is a random relabelling; features are constant.
    """
    rng = np.random.default_rng(seed)
    graphs = []
    for label, s in enumerate(skip_lengths):
        base = csl_graph(n, s)
        for _ in range(copies_per_class):
            g = base.permuted(rng.permutation(n))
            graphs.append(Graph(g.num_nodes, g.indptr, g.indices, np.ones((n, 1)), None, None, label))
    split = {"all": np.arange(len(graphs))}
    return Dataset(graphs, split, "classification", len(skip_lengths), {"n": n, "skips": list(skip_lengths)})


# Heavy-atom side chains: (atom count, bonds among side-chain atoms).  Atom 0
# is C-beta, bonded to C-alpha; -1 stands for the residue's backbone N (proline).
_SIDE_CHAINS = {
    "G": (0, []), "A": (1, []), "S": (2, [(0, 1)]), "C": (2, [(0, 1)]),
    "T": (3, [(0, 1), (0, 2)]), "V": (3, [(0, 1), (0, 2)]),
    "L": (4, [(0, 1), (1, 2), (1, 3)]), "I": (4, [(0, 1), (0, 2), (1, 3)]),
    "M": (4, [(0, 1), (1, 2), (2, 3)]), "P": (3, [(0, 1), (1, 2), (2, -1)]),
    "D": (4, [(0, 1), (1, 2), (1, 3)]), "N": (4, [(0, 1), (1, 2), (1, 3)]),
    "E": (5, [(0, 1), (1, 2), (2, 3), (2, 4)]), "Q": (5, [(0, 1), (1, 2), (2, 3), (2, 4)]),
    "K": (5, [(0, 1), (1, 2), (2, 3), (3, 4)]),
    "R": (7, [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (4, 6)]),
    "H": (6, [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 1)]),
    "F": (7, [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (6, 1)]),
    "Y": (8, [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (6, 1), (4, 7)]),
    "W": (10, [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 1), (4, 6), (6, 7), (7, 8), (8, 9), (9, 5)]),
}


def peptide_like(n: int, seed: int) -> Graph:
    """Heavy-atom graph of a random peptide with at most ``n`` atoms.

    Residues (uniform over the 20 amino acids) are appended while they fit:
    backbone ``N - CA - C(=O)`` chained by peptide bonds, with the side chain
    hanging off ``CA`` (rings for F, Y, W, H and the proline N closure).  A
    stand-in for atom-level peptide graphs when real data is unavailable.
    """
    rng = np.random.default_rng(seed)
    names = sorted(_SIDE_CHAINS)
    edges: list[tuple[int, int]] = []
    count, prev_c = 0, None
    while True:
        size, side = _SIDE_CHAINS[names[rng.integers(len(names))]]
        if count + 4 + size > n:
            break
        nn, ca, c, o = count, count + 1, count + 2, count + 3
        edges += [(nn, ca), (ca, c), (c, o)]
        if prev_c is not None:
            edges.append((prev_c, nn))
        first = count + 4
        if size:
            edges.append((ca, first))
        edges += [(first + a, nn if b == -1 else first + b) for a, b in side]
        count, prev_c = first + size, c
    if count == 0:
        raise ValueError(f"n={n} is too small for a single residue")
    return from_edge_list(count, edges)


def bfs_distances(graph: Graph, source: int) -> np.ndarray:
    """Hop distances from ``source``; ``inf`` for unreachable nodes."""
    if not 0 <= source < graph.num_nodes:
        raise IndexError(f"source {source} out of range")
    dist = np.full(graph.num_nodes, np.inf)
    dist[source] = 0
    queue = deque([source])
    indptr, indices = graph.indptr, graph.indices
    while queue:
        v = queue.popleft()
        d = dist[v] + 1
        for u in indices[indptr[v]: indptr[v + 1]]:
            if dist[u] == np.inf:
                dist[u] = d
                queue.append(u)
    return dist


def all_pairs_distances(graph: Graph) -> np.ndarray:
    from scipy.sparse.csgraph import shortest_path

    return shortest_path(graph.adjacency(), method="D", unweighted=True, directed=False)


def connected_components(graph: Graph) -> tuple[int, np.ndarray]:
    from scipy.sparse.csgraph import connected_components as cc

    return cc(graph.adjacency(), directed=False)


def is_connected(graph: Graph) -> bool:
    return graph.num_nodes <= 1 or connected_components(graph)[0] == 1


def induced_subgraph(graph: Graph, nodes: np.ndarray) -> Graph:
    nodes = np.asarray(nodes, dtype=np.int64)
    sub = graph.adjacency()[nodes][:, nodes].tocsr()
    sub.sort_indices()
    return Graph(len(nodes), sub.indptr.astype(np.int64), sub.indices.astype(np.int64),
                 graph.node_features[nodes].copy())


# edge-list IO --------------------------------------------------------------

def write_edge_list(graph: Graph, path: str | Path) -> None:
    path = Path(path)
    edges = graph.undirected_edges()
    d = graph.num_features
    lines = [f"{graph.num_nodes} {len(edges)} {d}"]
    lines += [f"{u} {v}" for u, v in edges]
    lines += [" ".join(repr(float(x)) for x in row) for row in graph.node_features]
    path.write_text("\n".join(lines) + "\n")
    if graph.graph_label is not None or graph.node_labels is not None:
        lab = [f"graph_label {graph.graph_label if graph.graph_label is not None else 'none'}",
               f"node_labels {0 if graph.node_labels is None else 1}"]
        if graph.node_labels is not None:
            lab += [str(x) for x in graph.node_labels]
        Path(str(path) + ".labels").write_text("\n".join(lab) + "\n")


def read_edge_list(path: str | Path) -> Graph:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such graph file: {path}")
    rows = path.read_text().split("\n")
    try:
        n, m, d = (int(x) for x in rows[0].split())
        edges = np.array([[int(t) for t in rows[1 + i].split()] for i in range(m)], dtype=np.int64).reshape(-1, 2)
        if d > 0:
            x = np.array([[float(t) for t in rows[1 + m + i].split()] for i in range(n)]).reshape(n, d)
        else:
            x = np.zeros((n, 0))
    except (ValueError, IndexError) as exc:
        raise ValueError(f"malformed edge-list file {path}: {exc}") from None
    graph_label, node_labels = None, None
    lab_path = Path(str(path) + ".labels")
    if lab_path.exists():
        lab = lab_path.read_text().split("\n")
        raw = lab[0].split()[1]
        if raw != "none":
            graph_label = float(raw) if any(c in raw for c in ".eE") else int(raw)
        if lab[1].split()[1] == "1":
            node_labels = np.array([int(t) for t in lab[2: 2 + n]])
    return from_edge_list(n, edges, x, node_labels=node_labels, graph_label=graph_label)
