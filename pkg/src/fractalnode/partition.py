"""Graph partitioners and the subgraph bookkeeping that fractal nodes hang off.

Partition file format (text)::

    n C k_hop
    <node> <base_block>                 # n lines
    <block> <size> <member> <member>... # C lines, expanded blocks
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .graph import Graph


@dataclass(frozen=True, eq=False)
class Partition:
    num_blocks: int
    base_assignment: np.ndarray
    blocks: tuple[np.ndarray, ...]
    k_hop: int = 0

    def __post_init__(self):
        self.base_assignment.setflags(write=False)
        for b in self.blocks:
            b.setflags(write=False)

    @classmethod
    def from_assignment(cls, assignment, num_blocks: int) -> "Partition":
        assignment = np.asarray(assignment, dtype=np.int64).copy()
        blocks = tuple(np.flatnonzero(assignment == c) for c in range(num_blocks))
        return cls(num_blocks, assignment, blocks, 0)

    @property
    def num_nodes(self) -> int:
        return len(self.base_assignment)

    def base_blocks(self) -> tuple[np.ndarray, ...]:
        return tuple(np.flatnonzero(self.base_assignment == c) for c in range(self.num_blocks))

    def membership(self) -> sp.csr_matrix:
        """C x n 0/1 matrix over the (possibly expanded) blocks."""
        rows = np.concatenate([np.full(len(b), i) for i, b in enumerate(self.blocks)]) if self.blocks else []
        cols = np.concatenate(self.blocks) if self.blocks else []
        data = np.ones(len(cols))
        return sp.csr_matrix((data, (rows, cols)), shape=(self.num_blocks, self.num_nodes))

    def base_membership(self) -> sp.csr_matrix:
        n = self.num_nodes
        return sp.csr_matrix((np.ones(n), (self.base_assignment, np.arange(n))), shape=(self.num_blocks, n))

    def block_sizes(self) -> np.ndarray:
        return np.bincount(self.base_assignment, minlength=self.num_blocks)

    def permuted(self, perm: np.ndarray) -> "Partition":
        """The same partition after relabelling node ``v`` as ``perm[v]``."""
        perm = np.asarray(perm)
        inv = np.argsort(perm)
        blocks = tuple(np.sort(perm[b]) for b in self.blocks)
        return Partition(self.num_blocks, self.base_assignment[inv].copy(), blocks, self.k_hop)


def _check_blocks(graph: Graph, num_blocks: int) -> None:
    if num_blocks <= 0:
        raise ValueError(f"number of blocks must be positive, got {num_blocks}")
    if num_blocks > graph.num_nodes:
        raise ValueError(f"cannot split {graph.num_nodes} nodes into {num_blocks} nonempty blocks")


def edge_cut(graph: Graph, partition: Partition) -> int:
    dst, src = graph.edge_index()
    a = partition.base_assignment
    return int(np.count_nonzero(a[dst] != a[src]) // 2)


def _fill_empty_blocks(assignment: np.ndarray, num_blocks: int, rng: np.random.Generator) -> np.ndarray:
    counts = np.bincount(assignment, minlength=num_blocks)
    for c in np.flatnonzero(counts == 0):
        donor = int(np.argmax(counts))
        v = rng.choice(np.flatnonzero(assignment == donor))
        assignment[v] = c
        counts[donor] -= 1
        counts[c] += 1
    return assignment


def partition_random(graph: Graph, num_blocks: int, seed: int) -> Partition:
    _check_blocks(graph, num_blocks)
    rng = np.random.default_rng(seed)
    assignment = rng.integers(0, num_blocks, size=graph.num_nodes)
    return Partition.from_assignment(_fill_empty_blocks(assignment, num_blocks, rng), num_blocks)


# multilevel ----------------------------------------------------------------

@dataclass
class _Level:
    adj: sp.csr_matrix          # weighted, no diagonal
    vwgt: np.ndarray
    cmap: np.ndarray | None = None  # fine vertex -> coarse vertex


def _heavy_edge_matching(adj: sp.csr_matrix, vwgt: np.ndarray, max_vwgt: float,
                         rng: np.random.Generator) -> tuple[np.ndarray, int]:
    n = adj.shape[0]
    match = np.full(n, -1, dtype=np.int64)
    indptr, indices, data = adj.indptr, adj.indices, adj.data
    for v in rng.permutation(n):
        if match[v] >= 0:
            continue
        best, best_w = v, -1.0
        for k in range(indptr[v], indptr[v + 1]):
            u = indices[k]
            if match[u] < 0 and u != v and data[k] > best_w and vwgt[u] + vwgt[v] <= max_vwgt:
                best, best_w = u, data[k]
        match[v] = best
        match[best] = v
    cmap = np.full(n, -1, dtype=np.int64)
    nc = 0
    for v in range(n):
        if cmap[v] < 0:
            cmap[v] = nc
            cmap[match[v]] = nc
            nc += 1
    return cmap, nc


def _contract(level: _Level, cmap: np.ndarray, nc: int) -> _Level:
    n = len(cmap)
    p = sp.csr_matrix((np.ones(n), (np.arange(n), cmap)), shape=(n, nc))
    coarse = (p.T @ level.adj @ p).tocsr()
    coarse.setdiag(0)
    coarse.eliminate_zeros()
    coarse.sort_indices()
    return _Level(coarse, np.bincount(cmap, weights=level.vwgt, minlength=nc))


def _cut(adj: sp.csr_matrix, part: np.ndarray) -> float:
    coo = adj.tocoo()
    return float(coo.data[part[coo.row] != part[coo.col]].sum() / 2)


def _grow_initial(level: _Level, num_blocks: int, rng: np.random.Generator, trials: int = 4) -> np.ndarray:
    """Greedy graph growing: regions absorb the frontier vertex with the best gain."""
    adj, vwgt = level.adj, level.vwgt
    n = adj.shape[0]
    target = vwgt.sum() / num_blocks
    best, best_cut = None, math.inf
    for _ in range(trials):
        part = np.full(n, -1, dtype=np.int64)
        for c in range(num_blocks):
            free = np.flatnonzero(part < 0)
            if len(free) == 0:
                break
            remaining = num_blocks - c
            if c == num_blocks - 1:
                part[free] = c
                break
            seed = int(rng.choice(free))
            part[seed] = c
            weight = vwgt[seed]
            # gain = edge weight into the region - edge weight to other free vertices
            conn = {}
            for k in range(adj.indptr[seed], adj.indptr[seed + 1]):
                u = adj.indices[k]
                if part[u] < 0:
                    conn[u] = conn.get(u, 0.0) + adj.data[k]
            budget = min(target, vwgt[free].sum() - (remaining - 1))
            while weight < budget and conn:
                def gain(u):
                    deg = adj.data[adj.indptr[u]:adj.indptr[u + 1]][part[adj.indices[adj.indptr[u]:adj.indptr[u + 1]]] < 0].sum()
                    return conn[u] - deg
                u = max(conn, key=lambda x: (gain(x), -x))
                del conn[u]
                part[u] = c
                weight += vwgt[u]
                for k in range(adj.indptr[u], adj.indptr[u + 1]):
                    w = adj.indices[k]
                    if part[w] < 0:
                        conn[w] = conn.get(w, 0.0) + adj.data[k]
                if not conn and weight < budget:
                    # region closed off (disconnected input): jump to another free vertex
                    free = np.flatnonzero(part < 0)
                    if len(free) <= remaining - 1:
                        break
                    s = int(rng.choice(free))
                    conn[s] = 0.0
        # regions that never got a vertex (only possible when n is tiny)
        part[part < 0] = num_blocks - 1
        part = _fill_empty_blocks(part, num_blocks, rng)
        cut = _cut(adj, part)
        if cut < best_cut:
            best, best_cut = part, cut
    return best


def _block_weights(part: np.ndarray, vwgt: np.ndarray, num_blocks: int) -> np.ndarray:
    return np.bincount(part, weights=vwgt, minlength=num_blocks)


def _refine(adj: sp.csr_matrix, vwgt: np.ndarray, part: np.ndarray, num_blocks: int, cap: float,
            rng: np.random.Generator, max_passes: int = 8, cut_log: list | None = None) -> np.ndarray:
    """Boundary greedy k-way refinement: only strictly cut-reducing moves that respect ``cap``."""
    indptr, indices, data = adj.indptr, adj.indices, adj.data
    bw = _block_weights(part, vwgt, num_blocks)
    counts = np.bincount(part, minlength=num_blocks)
    cut = _cut(adj, part)
    for _ in range(max_passes):
        moved = 0
        dst = np.repeat(np.arange(adj.shape[0]), np.diff(indptr))
        boundary = np.unique(dst[part[dst] != part[indices]])
        for v in rng.permutation(boundary):
            pv = part[v]
            if counts[pv] <= 1:
                continue
            ext: dict[int, float] = {}
            internal = 0.0
            for k in range(indptr[v], indptr[v + 1]):
                b = part[indices[k]]
                if b == pv:
                    internal += data[k]
                else:
                    ext[b] = ext.get(b, 0.0) + data[k]
            best_b, best_gain = -1, 0.0
            for b, w in ext.items():
                g = w - internal
                if g > best_gain and bw[b] + vwgt[v] <= cap:
                    best_b, best_gain = b, g
            if best_b >= 0:
                part[v] = best_b
                bw[pv] -= vwgt[v]
                bw[best_b] += vwgt[v]
                counts[pv] -= 1
                counts[best_b] += 1
                cut -= best_gain
                moved += 1
        if cut_log is not None:
            cut_log.append(cut)
        if moved == 0:
            break
    return part


def _rebalance(adj: sp.csr_matrix, vwgt: np.ndarray, part: np.ndarray, num_blocks: int, cap: float) -> np.ndarray:
    """Move vertices out of overweight blocks, cheapest cut increase first (batched per round)."""
    n = len(part)
    bw = _block_weights(part, vwgt, num_blocks)
    for _ in range(4 * num_blocks + 10):
        if bw.max() <= cap + 1e-9:
            break
        onehot = sp.csr_matrix((np.ones(n), (np.arange(n), part)), shape=(n, num_blocks))
        conn = np.asarray((adj @ onehot).todense())
        for src in np.flatnonzero(bw > cap + 1e-9):
            members = np.flatnonzero(part == src)
            room = cap - bw
            room[src] = -np.inf
            ok = room[None, :] >= vwgt[members][:, None]
            if not ok.any():
                continue
            score = np.where(ok, conn[members], -np.inf)
            target = np.argmax(score, axis=1)
            gain = score[np.arange(len(members)), target] - conn[members, src]
            order = np.lexsort((members, vwgt[members], -gain))
            for i in order:
                if bw[src] <= cap + 1e-9:
                    break
                v, b = members[i], target[i]
                if not np.isfinite(gain[i]) or bw[b] + vwgt[v] > cap:
                    continue
                part[v] = b
                bw[src] -= vwgt[v]
                bw[b] += vwgt[v]
    return part


def partition_multilevel(graph: Graph, num_blocks: int, balance_eps: float = 0.1, seed: int = 0,
                         *, cut_log: list | None = None) -> Partition:
    """Multilevel k-way partitioning minimising edge cut under a balance cap.

    Heavy-edge matching coarsens until at most ``max(4C, 64)`` vertices remain,
    greedy graph growing seeds the C-way split, and boundary refinement runs at
    every level while projecting back.  Blocks hold at most
    ``(1 + balance_eps) * ceil(n / C)`` nodes.
    """
    _check_blocks(graph, num_blocks)
    n = graph.num_nodes
    rng = np.random.default_rng(seed)
    if num_blocks == 1:
        return Partition.from_assignment(np.zeros(n, dtype=np.int64), 1)
    cap = (1.0 + balance_eps) * math.ceil(n / num_blocks)

    levels = [_Level(graph.adjacency().astype(np.float64), np.ones(n))]
    stop = max(4 * num_blocks, 64)
    while levels[-1].adj.shape[0] > stop:
        cur = levels[-1]
        cmap, nc = _heavy_edge_matching(cur.adj, cur.vwgt, cap / 2, rng)
        if nc > 0.95 * cur.adj.shape[0] or nc < num_blocks:
            break
        cur.cmap = cmap
        levels.append(_contract(cur, cmap, nc))

    coarsest = levels[-1]
    part = _grow_initial(coarsest, num_blocks, rng)
    part = _refine(coarsest.adj, coarsest.vwgt, part, num_blocks, cap, rng)
    for lvl in reversed(levels[:-1]):
        part = part[lvl.cmap]
        log = cut_log if lvl is levels[0] else None
        part = _refine(lvl.adj, lvl.vwgt, part, num_blocks, cap, rng, cut_log=log)
    finest = levels[0]
    part = _rebalance(finest.adj, finest.vwgt, part, num_blocks, cap)
    part = _fill_empty_blocks(part, num_blocks, rng)
    part = _refine(finest.adj, finest.vwgt, part, num_blocks, cap, rng, cut_log=cut_log)
    return Partition.from_assignment(part, num_blocks)


# BFS regions ---------------------------------------------------------------

def partition_bfs(graph: Graph, num_blocks: int, seed: int) -> Partition:
    """Grow C regions round-robin from mutually distant seeds."""
    from .graph import bfs_distances

    _check_blocks(graph, num_blocks)
    n = graph.num_nodes
    rng = np.random.default_rng(seed)
    cap = math.ceil(n / num_blocks)
    start = int(rng.integers(n))
    d0 = bfs_distances(graph, start)
    finite = np.where(np.isinf(d0), -1, d0)
    seeds = [int(np.argmax(finite))]
    mind = bfs_distances(graph, seeds[0])
    while len(seeds) < num_blocks:
        score = np.where(np.isinf(mind), np.inf, mind)
        score[seeds] = -1
        nxt = int(np.argmax(score))
        seeds.append(nxt)
        mind = np.minimum(mind, bfs_distances(graph, nxt))

    part = np.full(n, -1, dtype=np.int64)
    queues = []
    for c, s in enumerate(seeds):
        part[s] = c
        queues.append(deque([s]))
    sizes = np.ones(num_blocks, dtype=np.int64)
    active = True
    while active:
        active = False
        for c in range(num_blocks):
            if sizes[c] >= cap:
                continue
            q = queues[c]
            while q:
                v = q[0]
                nbrs = [u for u in graph.neighbors(v) if part[u] < 0]
                if not nbrs:
                    q.popleft()
                    continue
                u = nbrs[0]
                part[u] = c
                sizes[c] += 1
                q.append(u)
                active = True
                break
    leftover = list(np.flatnonzero(part < 0))
    while leftover:
        progress = False
        for v in list(leftover):
            owners = [part[u] for u in graph.neighbors(v) if part[u] >= 0]
            if owners:
                part[v] = min(owners, key=lambda c: (sizes[c], c))
                sizes[part[v]] += 1
                leftover.remove(v)
                progress = True
        if not progress:
            v = leftover.pop(0)
            part[v] = int(np.argmin(sizes))
            sizes[part[v]] += 1
    return Partition.from_assignment(part, num_blocks)


# Louvain -------------------------------------------------------------------

def _louvain_level(adj: sp.csr_matrix, rng: np.random.Generator, resolution: float = 1.0) -> np.ndarray:
    n = adj.shape[0]
    k = np.asarray(adj.sum(axis=1)).ravel()
    m2 = k.sum()
    comm = np.arange(n)
    tot = k.copy()
    if m2 == 0:
        return comm
    indptr, indices, data = adj.indptr, adj.indices, adj.data
    improved = True
    while improved:
        improved = False
        for v in rng.permutation(n):
            cv = comm[v]
            links: dict[int, float] = {}
            self_w = 0.0
            for j in range(indptr[v], indptr[v + 1]):
                u = indices[j]
                if u == v:
                    self_w += data[j]
                    continue
                links[comm[u]] = links.get(comm[u], 0.0) + data[j]
            tot[cv] -= k[v]
            best_c = cv
            best_gain = links.get(cv, 0.0) - resolution * tot[cv] * k[v] / m2
            for c, w in links.items():
                gain = w - resolution * tot[c] * k[v] / m2
                if gain > best_gain + 1e-12:
                    best_c, best_gain = c, gain
            tot[best_c] += k[v]
            if best_c != cv:
                comm[v] = best_c
                improved = True
    _, comm = np.unique(comm, return_inverse=True)
    return comm


def louvain_communities(graph: Graph, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    adj = graph.adjacency().astype(np.float64)
    labels = np.arange(graph.num_nodes)
    while True:
        comm = _louvain_level(adj, rng)
        nc = comm.max() + 1 if len(comm) else 0
        labels = comm[labels]
        if nc == adj.shape[0]:
            return labels
        p = sp.csr_matrix((np.ones(len(comm)), (np.arange(len(comm)), comm)), shape=(len(comm), nc))
        adj = (p.T @ adj @ p).tocsr()


def modularity(graph: Graph, assignment: np.ndarray) -> float:
    adj = graph.adjacency()
    k = graph.degrees.astype(np.float64)
    m2 = k.sum()
    if m2 == 0:
        return 0.0
    dst, src = graph.edge_index()
    same = assignment[dst] == assignment[src]
    internal = same.sum() / m2
    tot = np.bincount(assignment, weights=k)
    return float(internal - ((tot / m2) ** 2).sum())


def partition_louvain(graph: Graph, num_blocks: int, seed: int) -> Partition:
    """Louvain communities, then merged (smallest first) or split (largest first, by BFS) to C blocks."""
    from .graph import bfs_distances

    _check_blocks(graph, num_blocks)
    comm = louvain_communities(graph, seed)
    groups = [list(np.flatnonzero(comm == c)) for c in range(comm.max() + 1)]
    adj = graph.adjacency()
    while len(groups) > num_blocks:
        groups.sort(key=lambda g: (len(g), min(g)))
        small = groups.pop(0)
        owner = np.full(graph.num_nodes, -1)
        for i, g in enumerate(groups):
            owner[g] = i
        nbr_owner = owner[adj[small].indices]
        links = np.bincount(nbr_owner[nbr_owner >= 0], minlength=len(groups))
        target = int(np.argmax(links)) if links.max(initial=0) > 0 else 0
        groups[target] = groups[target] + small
    while len(groups) < num_blocks:
        groups.sort(key=lambda g: (-len(g), min(g)))
        big = np.array(sorted(groups.pop(0)))
        sub_nodes = set(big.tolist())
        # BFS order inside the community from a peripheral node
        start = int(big[0])
        dist = bfs_distances(graph, start)
        far = big[np.argmax(np.where(np.isinf(dist[big]), -1, dist[big]))]
        order, seen, q = [], {int(far)}, deque([int(far)])
        while len(order) < len(big):
            if not q:
                rest = [v for v in big if v not in seen]
                seen.add(rest[0])
                q.append(rest[0])
            v = q.popleft()
            order.append(v)
            for u in graph.neighbors(v):
                u = int(u)
                if u in sub_nodes and u not in seen:
                    seen.add(u)
                    q.append(u)
        half = len(order) // 2
        groups += [order[:half], order[half:]]
    groups.sort(key=lambda g: min(g))
    assignment = np.empty(graph.num_nodes, dtype=np.int64)
    for c, g in enumerate(groups):
        assignment[g] = c
    return Partition.from_assignment(assignment, num_blocks)


# expansion and coarsening --------------------------------------------------

def expand_k_hop(graph: Graph, partition: Partition, k: int) -> Partition:
    """Grow every base block by all nodes within ``k`` hops of it."""
    if k < 0:
        raise ValueError("k must be >= 0")
    base = partition.base_membership().astype(bool)
    reach = base
    step = (graph.adjacency() + sp.identity(graph.num_nodes, format="csr")).astype(bool)
    for _ in range(k):
        nxt = (reach @ step).astype(bool)
        if nxt.nnz == reach.nnz:
            break
        reach = nxt
    reach = reach.tocsr()
    reach.sort_indices()
    blocks = tuple(reach.indices[reach.indptr[i]: reach.indptr[i + 1]].astype(np.int64).copy()
                   for i in range(partition.num_blocks))
    return Partition(partition.num_blocks, partition.base_assignment.copy(), blocks, k)


def coarsened_adjacency(graph: Graph, partition: Partition, mode: str = "edges") -> np.ndarray:
    """C x C coarsened adjacency.

    ``mode="edges"`` gives ``M A M^T`` over base blocks: off-diagonal entries
    count edges between blocks, the diagonal is twice the internal edge count.
    ``mode="membership"`` gives ``M M^T`` over the expanded blocks (shared
    node counts).
    """
    if mode == "edges":
        m = partition.base_membership()
        return np.asarray((m @ graph.adjacency() @ m.T).todense())
    if mode == "membership":
        m = partition.membership()
        return np.asarray((m @ m.T).todense())
    raise ValueError(f"unknown coarsening mode {mode!r}")


PARTITIONERS = {
    "multilevel": lambda g, c, seed: partition_multilevel(g, c, seed=seed),
    "random": partition_random,
    "louvain": partition_louvain,
    "bfs": partition_bfs,
}


def make_partition(graph: Graph, method: str, num_blocks: int, k_hop: int = 0, seed: int = 0,
                   balance_eps: float = 0.1) -> Partition:
    if method == "multilevel":
        part = partition_multilevel(graph, num_blocks, balance_eps, seed)
    elif method in PARTITIONERS:
        part = PARTITIONERS[method](graph, num_blocks, seed)
    else:
        raise ValueError(f"unknown partitioner {method!r}")
    return expand_k_hop(graph, part, k_hop) if k_hop else part


# IO ------------------------------------------------------------------------

def write_partition(partition: Partition, path: str | Path) -> None:
    lines = [f"{partition.num_nodes} {partition.num_blocks} {partition.k_hop}"]
    lines += [f"{v} {b}" for v, b in enumerate(partition.base_assignment)]
    for i, blk in enumerate(partition.blocks):
        lines.append(" ".join([str(i), str(len(blk))] + [str(x) for x in blk]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_partition(path: str | Path) -> Partition:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such partition file: {path}")
    rows = path.read_text().split("\n")
    n, c, k = (int(x) for x in rows[0].split())
    base = np.array([int(rows[1 + v].split()[1]) for v in range(n)], dtype=np.int64)
    blocks = []
    for i in range(c):
        parts = [int(x) for x in rows[1 + n + i].split()]
        blocks.append(np.array(parts[2: 2 + parts[1]], dtype=np.int64))
    return Partition(c, base, tuple(blocks), k)
