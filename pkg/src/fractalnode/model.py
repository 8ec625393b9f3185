"""Message-passing backbones with fractal nodes, the fractal mixer, positional
encodings and output heads.

Parameters live in a flat ``dict[str, Tensor]``; :func:`forward` is a pure
function of ``(config, params, batch)``.  A :class:`Batch` stacks several
graphs block-diagonally and precomputes every constant sparse operator the
forward pass needs (normalised adjacency weights, block-mean and broadcast
maps, pooling), so one training step is a sequence of sparse/dense products
linear in the number of nodes and edges.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from . import autograd as ad
from .autograd import Tensor
from .graph import Graph
from .partition import Partition, coarsened_adjacency

BACKBONES = ("gcn", "gine", "gatedgcn")
VARIANTS = ("plain", "fn", "fn_m", "fn_a")
HEADS = ("graph-classification", "graph-regression", "multilabel", "node-classification")
OMEGA_MODES = ("scalar", "vector", "off")
PE_KINDS = ("none", "lap", "rwse")


@dataclass(frozen=True)
class ModelConfig:
    backbone: str = "gcn"
    num_layers: int = 4
    dim_h: int = 64
    num_blocks: int = 4
    k_hop: int = 1
    omega_mode: str = "scalar"
    use_hpf: bool = True
    variant: str = "fn"
    mixer_layers: int = 1
    mixer_expansion: int = 2
    mixer_summary: str = "mean"
    pe: str = "none"
    pe_dim: int = 8
    fractal_pe: bool = False
    fractal_pe_dim: int | None = None
    head: str = "graph-classification"
    in_dim: int = 1
    out_dim: int = 2
    edge_dim: int = 0
    encoder: bool = True
    gcn_norm: str = "graph"          # "graph" or "augmented" (counts fractal-node edges in d_v)
    partitioner: str = "multilevel"

    def __post_init__(self):
        object.__setattr__(self, "backbone", self.backbone.lower())
        object.__setattr__(self, "variant", self.variant.lower())
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}; choose from {BACKBONES}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}; choose from {HEADS}")
        if self.omega_mode not in OMEGA_MODES:
            raise ValueError(f"unknown omega_mode {self.omega_mode!r}")
        if self.pe not in PE_KINDS:
            raise ValueError(f"unknown pe {self.pe!r}; choose from {PE_KINDS}")
        if self.mixer_summary not in ("mean", "mean+std"):
            raise ValueError(f"unknown mixer_summary {self.mixer_summary!r}")
        if self.gcn_norm not in ("graph", "augmented"):
            raise ValueError(f"unknown gcn_norm {self.gcn_norm!r}")
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.dim_h <= 0:
            raise ValueError("dim_h must be > 0")
        if self.variant == "fn_m" and self.mixer_layers < 1:
            raise ValueError("fn_m needs mixer_layers >= 1")
        if self.num_blocks < 1 or self.k_hop < 0:
            raise ValueError("num_blocks must be >= 1 and k_hop >= 0")
        if self.fractal_pe and self.variant != "fn_m":
            raise ValueError("fractal_pe is injected before the mixer and needs variant fn_m")
        if not self.encoder and self.in_dim + self.node_pe_dim != self.dim_h:
            raise ValueError("encoder=False needs in_dim (+ pe_dim) == dim_h")

    @property
    def uses_fractal(self) -> bool:
        return self.variant != "plain"

    @property
    def node_pe_dim(self) -> int:
        return 0 if self.pe == "none" else self.pe_dim

    @property
    def fpe_dim(self) -> int:
        return self.fractal_pe_dim if self.fractal_pe_dim is not None else min(self.num_blocks - 1, 8)

    def replace(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


# positional encodings ------------------------------------------------------

def lap_pe(graph: Graph, k: int) -> np.ndarray:
    """Eigenvectors of the k smallest nonzero normalised-Laplacian eigenvalues, zero padded."""
    from .spectral import laplacian

    n = graph.num_nodes
    out = np.zeros((n, k))
    if n < 2 or k == 0:
        return out
    w, v = np.linalg.eigh(laplacian(graph, normalized=True))
    keep = np.flatnonzero(w > 1e-8)[:k]
    out[:, : len(keep)] = v[:, keep]
    return out


def rwse(graph: Graph, k: int) -> np.ndarray:
    """Return probabilities ``diag((D^-1 A)^t)`` for ``t = 1..k``."""
    n = graph.num_nodes
    deg = graph.degrees.astype(np.float64)
    inv = np.divide(1.0, deg, out=np.zeros(n), where=deg > 0)
    walk = sp.diags(inv) @ graph.adjacency()
    out = np.zeros((n, k))
    power = sp.identity(n, format="csr")
    for t in range(k):
        power = (power @ walk).tocsr()
        out[:, t] = power.diagonal()
    return out


def fractal_positional_encoding(graph: Graph, partition: Partition, k: int) -> np.ndarray:
    """Laplacian eigenvectors of the coarsened block graph (edge-count weights), skipping the constant one."""
    c = partition.num_blocks
    out = np.zeros((c, k))
    if k == 0 or c < 2:
        return out
    a = coarsened_adjacency(graph, partition).astype(np.float64)
    np.fill_diagonal(a, 0.0)
    lap = np.diag(a.sum(axis=1)) - a
    _, v = np.linalg.eigh(lap)
    m = min(k, c - 1)
    out[:, :m] = v[:, 1: 1 + m]
    return out


# batching ------------------------------------------------------------------

@dataclass
class Batch:
    num_graphs: int
    graph: Graph                      # block-diagonal union
    x: np.ndarray
    node_graph: np.ndarray
    edge_attr: np.ndarray | None
    gcn_weights: np.ndarray
    pool: sp.csr_matrix               # G x N mean pooling
    node_pe: np.ndarray | None = None
    num_blocks: int = 0
    lpf: sp.csr_matrix | None = None  # G*C x N, mean over expanded blocks
    base: np.ndarray | None = None    # N -> global base block id
    fractal_adj: sp.csr_matrix | None = None
    fractal_pe: np.ndarray | None = None
    node_labels: np.ndarray | None = None
    graph_labels: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    @property
    def num_nodes(self) -> int:
        return self.graph.num_nodes


def _block_diag_graph(graphs: Sequence[Graph]) -> Graph:
    offsets = np.cumsum([0] + [g.num_nodes for g in graphs])
    eoff = np.cumsum([0] + [len(g.indices) for g in graphs])
    indptr = np.concatenate([[0]] + [g.indptr[1:] + eoff[i] for i, g in enumerate(graphs)])
    indices = np.concatenate([g.indices + offsets[i] for i, g in enumerate(graphs)]).astype(np.int64)
    feats = np.concatenate([g.node_features for g in graphs])
    return Graph(int(offsets[-1]), indptr.astype(np.int64), indices, feats)


def _stack_labels(graphs: Sequence[Graph]):
    node_labels = None
    if all(g.node_labels is not None for g in graphs):
        node_labels = np.concatenate([np.asarray(g.node_labels) for g in graphs])
    graph_labels = None
    if all(g.graph_label is not None for g in graphs):
        graph_labels = np.stack([np.asarray(g.graph_label) for g in graphs])
    return node_labels, graph_labels


def make_batch(cfg: ModelConfig, graphs: Sequence[Graph], partitions: Sequence[Partition] | None = None,
               node_pe: Sequence[np.ndarray] | None = None, fractal_pe: Sequence[np.ndarray] | None = None) -> Batch:
    """Stack graphs into one block-diagonal batch and precompute constant operators.

    ``node_pe`` / ``fractal_pe`` may be passed precomputed (one array per
    graph); otherwise they are computed here when the config asks for them.
    """
    graphs = list(graphs)
    if not graphs:
        raise ValueError("make_batch needs at least one graph")
    num = len(graphs)
    big = _block_diag_graph(graphs)
    n = big.num_nodes
    sizes = np.array([g.num_nodes for g in graphs])
    node_graph = np.repeat(np.arange(num), sizes)
    pool = sp.csr_matrix((1.0 / sizes[node_graph], (node_graph, np.arange(n))), shape=(num, n))
    if graphs[0].num_features != cfg.in_dim:
        raise ValueError(f"graph has {graphs[0].num_features} features but config in_dim={cfg.in_dim}")

    edge_attr = None
    if cfg.edge_dim > 0:
        parts = []
        for g in graphs:
            e = g.edge_features if g.edge_features is not None else np.zeros((len(g.indices), cfg.edge_dim))
            if e.shape[1] != cfg.edge_dim:
                raise ValueError(f"edge features have width {e.shape[1]}, config edge_dim={cfg.edge_dim}")
            parts.append(e)
        edge_attr = np.concatenate(parts)

    batch = Batch(num, big, big.node_features, node_graph, edge_attr, np.zeros(0), pool)
    batch.node_labels, batch.graph_labels = _stack_labels(graphs)

    if cfg.pe != "none":
        if node_pe is None:
            fn = lap_pe if cfg.pe == "lap" else rwse
            node_pe = [fn(g, cfg.pe_dim) for g in graphs]
        batch.node_pe = np.concatenate(node_pe)

    extra_deg = np.zeros(n)
    if cfg.uses_fractal:
        if partitions is None or len(partitions) != num:
            raise ValueError("fractal variants need one partition per graph")
        c = cfg.num_blocks
        rows, cols, base = [], [], []
        off = 0
        for i, (g, p) in enumerate(zip(graphs, partitions)):
            if p.num_blocks != c or p.num_nodes != g.num_nodes:
                raise ValueError(f"partition {i} has C={p.num_blocks}, n={p.num_nodes}; "
                                 f"expected C={c}, n={g.num_nodes}")
            for b, members in enumerate(p.blocks):
                rows.append(np.full(len(members), i * c + b))
                cols.append(np.asarray(members) + off)
            base.append(p.base_assignment + i * c)
            off += g.num_nodes
        rows, cols = np.concatenate(rows), np.concatenate(cols)
        batch.num_blocks = c
        batch.lpf = ad.membership_mean_matrix(rows, cols, num * c, n)
        batch.base = np.concatenate(base)
        if cfg.gcn_norm == "augmented":
            extra_deg = np.bincount(cols, minlength=n).astype(np.float64)
        if cfg.variant == "fn_a":
            mats = []
            for g, p in zip(graphs, partitions):
                a = coarsened_adjacency(g, p).astype(np.float64)
                np.fill_diagonal(a, 0.0)
                rs = a.sum(axis=1, keepdims=True)
                mats.append(sp.csr_matrix(np.divide(a, rs, out=np.zeros_like(a), where=rs > 0)))
            batch.fractal_adj = sp.block_diag(mats, format="csr")
        if cfg.fractal_pe:
            if fractal_pe is None:
                fractal_pe = [fractal_positional_encoding(g, p, cfg.fpe_dim) for g, p in zip(graphs, partitions)]
            batch.fractal_pe = np.concatenate(fractal_pe)

    deg = big.degrees.astype(np.float64) + extra_deg
    inv = np.divide(1.0, np.sqrt(deg), out=np.zeros(n), where=deg > 0)
    dst, src = big.edge_index()
    batch.gcn_weights = inv[dst] * inv[src]
    return batch


# parameters ----------------------------------------------------------------

def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Glorot-uniform weights, zero biases, ``omega = 0``, ``eps = 0``."""
    rng = np.random.default_rng(seed)
    d = cfg.dim_h
    p: dict[str, np.ndarray] = {}
    if cfg.encoder:
        fin = cfg.in_dim + cfg.node_pe_dim
        p["enc.W"] = _glorot(rng, fin, d)
        p["enc.b"] = np.zeros(d)
    for layer in range(cfg.num_layers):
        pre = f"layer{layer}."
        if cfg.backbone == "gcn":
            p[pre + "W"] = _glorot(rng, d, d)
            p[pre + "b"] = np.zeros(d)
        elif cfg.backbone == "gatedgcn":
            for name in ("Omega", "W1", "W2", "W3"):
                p[pre + name] = _glorot(rng, d, d)
            p[pre + "b"] = np.zeros(d)
        else:
            p[pre + "eps"] = np.zeros(1)
            p[pre + "mlp1.W"] = _glorot(rng, d, d)
            p[pre + "mlp1.b"] = np.zeros(d)
            p[pre + "mlp2.W"] = _glorot(rng, d, d)
            p[pre + "mlp2.b"] = np.zeros(d)
            if cfg.edge_dim > 0:
                p[pre + "edge.W"] = _glorot(rng, cfg.edge_dim, d)
                p[pre + "edge.b"] = np.zeros(d)
        if cfg.uses_fractal and cfg.use_hpf and cfg.omega_mode != "off":
            p[pre + "omega"] = np.zeros(1 if cfg.omega_mode == "scalar" else d)
    if cfg.variant == "fn_m":
        c = cfg.num_blocks
        t_hidden = cfg.mixer_expansion * c
        c_hidden = cfg.mixer_expansion * d
        if cfg.mixer_summary == "mean+std":
            p["summary.W"] = _glorot(rng, 2 * d, d)
            p["summary.b"] = np.zeros(d)
        if cfg.fractal_pe:
            p["fpe.T"] = _glorot(rng, cfg.fpe_dim, d) if cfg.fpe_dim > 0 else np.zeros((0, d))
            p["fpe.O"] = np.eye(d)
            p["fpe.b"] = np.zeros(d)
        for m in range(cfg.mixer_layers):
            pre = f"mixer{m}."
            p[pre + "tok1.W"] = _glorot(rng, c, t_hidden, (t_hidden, c))
            p[pre + "tok1.b"] = np.zeros((t_hidden, 1))
            p[pre + "tok2.W"] = _glorot(rng, t_hidden, c, (c, t_hidden))
            p[pre + "tok2.b"] = np.zeros((c, 1))
            p[pre + "ch1.W"] = _glorot(rng, d, c_hidden)
            p[pre + "ch1.b"] = np.zeros(c_hidden)
            p[pre + "ch2.W"] = _glorot(rng, c_hidden, d)
            p[pre + "ch2.b"] = np.zeros(d)
    p["head.W1"] = _glorot(rng, d, d)
    p["head.b1"] = np.zeros(d)
    p["head.W2"] = _glorot(rng, d, cfg.out_dim)
    p["head.b2"] = np.zeros(cfg.out_dim)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}


# layers --------------------------------------------------------------------

def gcn_layer(h: Tensor, graph: Graph, weights: np.ndarray, params: dict, pre: str) -> Tensor:
    """``relu(h_v + sum_u w_vu h_u W + b)`` with ``w_vu = 1/sqrt(d_v d_u)``."""
    w = params[pre + "W"]
    if h.shape[-1] != w.shape[0]:
        raise ValueError(f"gcn_layer: state width {h.shape[-1]} does not match W {w.shape}")
    agg = ad.sparse_neighbor_aggregate(graph, h, weights)
    return ad.relu(h + agg @ w + params[pre + "b"])


def gatedgcn_layer(h: Tensor, graph: Graph, params: dict, pre: str) -> Tensor:
    """``relu(h_v Omega + sum_u sigmoid(h_v W2 + h_u W3) * (h_u W1) + b)``."""
    if h.shape[-1] != params[pre + "W1"].shape[0]:
        raise ValueError(f"gatedgcn_layer: state width {h.shape[-1]} does not match W1")
    dst, src = graph.edge_index()
    gate = ad.sigmoid(ad.gather(h @ params[pre + "W2"], dst) + ad.gather(h @ params[pre + "W3"], src))
    agg = ad.sparse_neighbor_aggregate(graph, h @ params[pre + "W1"], gate)
    return ad.relu(h @ params[pre + "Omega"] + agg + params[pre + "b"])


def gine_layer(h: Tensor, graph: Graph, edge_attr: np.ndarray | None, params: dict, pre: str) -> Tensor:
    """``MLP((1 + eps) h_v + sum_u relu(h_u + e_uv))``."""
    if h.shape[-1] != params[pre + "mlp1.W"].shape[0]:
        raise ValueError(f"gine_layer: state width {h.shape[-1]} does not match MLP")
    dst, src = graph.edge_index()
    msg = ad.gather(h, src)
    if edge_attr is not None and pre + "edge.W" in params:
        msg = msg + (Tensor(edge_attr) @ params[pre + "edge.W"] + params[pre + "edge.b"])
    agg = ad.scatter_sum(ad.relu(msg), dst, graph.num_nodes)
    z = h * (params[pre + "eps"] + 1.0) + agg
    return ad.relu(z @ params[pre + "mlp1.W"] + params[pre + "mlp1.b"]) @ params[pre + "mlp2.W"] + params[pre + "mlp2.b"]


def backbone_layer(cfg: ModelConfig, h: Tensor, batch: Batch, params: dict, layer: int) -> Tensor:
    pre = f"layer{layer}."
    if cfg.backbone == "gcn":
        return gcn_layer(h, batch.graph, batch.gcn_weights, params, pre)
    if cfg.backbone == "gatedgcn":
        return gatedgcn_layer(h, batch.graph, params, pre)
    return gine_layer(h, batch.graph, batch.edge_attr, params, pre)


def fractal_update(h_tilde: Tensor, lpf_matrix: sp.spmatrix, base: np.ndarray, omega: Tensor | None,
                   fractal_adj: sp.spmatrix | None = None) -> tuple[Tensor, Tensor]:
    """Personalised fractal message.

    ``lpf = block means of h_tilde`` (expanded blocks), node ``v`` in base
    block ``c`` receives ``m_v = lpf_c + omega * (h_tilde_v - lpf_c)`` and
    the new state is ``h_tilde_v + m_v``.  With ``fractal_adj`` the low-pass
    part delivered to nodes is ``lpf + A lpf`` (fractal-to-fractal exchange).
    Returns ``(H_next, lpf)``.
    """
    if omega is not None and omega.shape not in ((1,), (h_tilde.shape[-1],)):
        raise ValueError(f"fractal_update: omega shape {omega.shape} incompatible with width {h_tilde.shape[-1]}")
    lpf = ad.sparse_matmul(lpf_matrix, h_tilde)
    low = lpf if fractal_adj is None else lpf + ad.sparse_matmul(fractal_adj, lpf)
    msg = ad.gather(low, base)
    if omega is not None:
        msg = msg + omega * (h_tilde - ad.gather(lpf, base))
    return h_tilde + msg, lpf


def block_summary(h_tilde: Tensor, lpf: Tensor, lpf_matrix: sp.spmatrix, params: dict, mode: str) -> Tensor:
    """Per-block vector fed to the mixer: the mean, or a projection of [mean | std]."""
    if mode == "mean":
        return lpf
    sq = ad.sparse_matmul(lpf_matrix, h_tilde * h_tilde)
    var = ad.relu(sq - lpf * lpf)
    std = ad.sqrt(var + 1e-8)
    return ad.concat([lpf, std], axis=-1) @ params["summary.W"] + params["summary.b"]


def fractal_mix(f: Tensor, params: dict, num_layers: int) -> Tensor:
    """MLP-Mixer over fractal nodes.  ``f`` is ``(G, C, d)``.

    Token mixing: ``U = F + W2 gelu(W1 LN(F) + b1) + b2`` (mixes across C).
    Channel mixing: ``F' = U + gelu(LN(U) W3 + b3) W4 + b4`` (mixes across d).
    """
    for m in range(num_layers):
        pre = f"mixer{m}."
        z = ad.gelu(params[pre + "tok1.W"] @ ad.layer_norm(f) + params[pre + "tok1.b"])
        u = f + (params[pre + "tok2.W"] @ z + params[pre + "tok2.b"])
        z = ad.gelu(ad.layer_norm(u) @ params[pre + "ch1.W"] + params[pre + "ch1.b"])
        f = u + (z @ params[pre + "ch2.W"] + params[pre + "ch2.b"])
    return f


# forward -------------------------------------------------------------------

@dataclass
class Encoded:
    h: Tensor                      # N x d final node states
    f_tilde: Tensor | None = None  # G x C x d mixed fractal states (fn_m only)
    layers: list = field(default_factory=list)


def node_input(cfg: ModelConfig, batch: Batch, training: bool = False,
               rng: np.random.Generator | None = None) -> np.ndarray:
    x = batch.x
    if batch.node_pe is not None:
        pe = batch.node_pe
        if training and cfg.pe == "lap":
            rng = rng or np.random.default_rng()
            signs = rng.choice([-1.0, 1.0], size=(batch.num_graphs, pe.shape[1]))
            pe = pe * signs[batch.node_graph]
        x = np.concatenate([x, pe], axis=1)
    return x


def encode(cfg: ModelConfig, params: dict, batch: Batch, training: bool = False,
           rng: np.random.Generator | None = None, keep_layers: bool = False) -> Encoded:
    x = Tensor(node_input(cfg, batch, training, rng))
    h = x @ params["enc.W"] + params["enc.b"] if cfg.encoder else x
    layers = [h] if keep_layers else []
    lpf = h_tilde = None
    for layer in range(cfg.num_layers):
        h_tilde = backbone_layer(cfg, h, batch, params, layer)
        if cfg.uses_fractal:
            omega = params.get(f"layer{layer}.omega")
            h, lpf = fractal_update(h_tilde, batch.lpf, batch.base, omega,
                                    batch.fractal_adj if cfg.variant == "fn_a" else None)
        else:
            h = h_tilde
        if keep_layers:
            layers.append(h)
    out = Encoded(h, layers=layers)
    if cfg.variant == "fn_m":
        f = block_summary(h_tilde, lpf, batch.lpf, params, cfg.mixer_summary)
        if cfg.fractal_pe:
            f = Tensor(batch.fractal_pe) @ params["fpe.T"] + f @ params["fpe.O"] + params["fpe.b"]
        f = ad.reshape(f, (batch.num_graphs, cfg.num_blocks, cfg.dim_h))
        out.f_tilde = fractal_mix(f, params, cfg.mixer_layers)
    return out


def head(params: dict, z: Tensor) -> Tensor:
    return ad.relu(z @ params["head.W1"] + params["head.b1"]) @ params["head.W2"] + params["head.b2"]


def forward(cfg: ModelConfig, params: dict, batch: Batch, training: bool = False,
            rng: np.random.Generator | None = None) -> Tensor:
    """Logits / predictions: ``(G, out)`` for graph heads, ``(N, out)`` for the node head."""
    enc = encode(cfg, params, batch, training, rng)
    if cfg.head == "node-classification":
        z = enc.h
        if enc.f_tilde is not None:
            flat = ad.reshape(enc.f_tilde, (batch.num_graphs * cfg.num_blocks, cfg.dim_h))
            z = z + ad.gather(flat, batch.base)
        return head(params, z)
    if enc.f_tilde is not None:
        hg = ad.mean(enc.f_tilde, axis=1)
    else:
        hg = ad.sparse_matmul(batch.pool, enc.h)
    return head(params, hg)


def num_parameters(params: dict) -> int:
    return int(sum(t.data.size for t in params.values()))
