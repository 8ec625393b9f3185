import itertools

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from _util import kink_free_setup, reference_forward, setup, small_graph
from fractalnode import autograd as ad
from fractalnode.autograd import Tensor, grad_check
from fractalnode.graph import from_edge_list
from fractalnode.model import (
    ModelConfig, encode, fractal_mix, fractal_positional_encoding, fractal_update, forward,
    gcn_layer, init_params, lap_pe, make_batch, num_parameters, rwse,
)
from fractalnode.partition import Partition, make_partition


def _cfg(**kw):
    base = dict(backbone="gcn", num_layers=2, dim_h=5, num_blocks=3, k_hop=1, in_dim=3, out_dim=2)
    base.update(kw)
    return ModelConfig(**base)


def _path(n, d=1):
    return from_edge_list(n, [(i, i + 1) for i in range(n - 1)], np.ones((n, d)))


# config --------------------------------------------------------------------

@pytest.mark.parametrize("kw", [
    dict(backbone="gat"), dict(variant="fm"), dict(head="x"), dict(omega_mode="both"),
    dict(num_layers=0), dict(fractal_pe=True, variant="fn"), dict(encoder=False, in_dim=3, dim_h=4),
])
def test_config_rejects(kw):
    with pytest.raises(ValueError):
        _cfg(**kw)


def test_config_case_insensitive():
    assert _cfg(backbone="GCN", variant="FN_M").variant == "fn_m"


def test_omega_shapes():
    assert init_params(_cfg(omega_mode="scalar"))["layer0.omega"].shape == (1,)
    assert init_params(_cfg(omega_mode="vector"))["layer1.omega"].shape == (5,)
    assert "layer0.omega" not in init_params(_cfg(omega_mode="off"))
    assert "layer0.omega" not in init_params(_cfg(use_hpf=False))
    assert "layer0.omega" not in init_params(_cfg(variant="plain"))
    assert np.all(init_params(_cfg())["layer0.omega"].data == 0)


def test_param_count_gcn():
    cfg = _cfg(variant="plain")
    # encoder + 2 layers + head
    want = (3 * 5 + 5) + 2 * (25 + 5) + (25 + 5 + 10 + 2)
    assert num_parameters(init_params(cfg)) == want


# dense oracle --------------------------------------------------------------

CASES = list(itertools.product(
    ["gcn", "gatedgcn", "gine"], ["plain", "fn", "fn_a", "fn_m"], ["scalar", "vector", "off"]))


@pytest.mark.parametrize("backbone,variant,omega", CASES)
def test_forward_matches_dense_reference(backbone, variant, omega):
    cfg = _cfg(backbone=backbone, variant=variant, omega_mode=omega, edge_dim=2 if backbone == "gine" else 0,
               gcn_norm="augmented" if variant == "fn_m" else "graph")
    g = small_graph(11, 3, edge_dim=cfg.edge_dim)
    batch, params, parts = setup(cfg, [g])
    got = forward(cfg, params, batch).data
    want = reference_forward(cfg, params, g, parts[0] if parts else None)
    assert np.allclose(got, want, rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("summary,head", [("mean", "node-classification"), ("mean+std", "graph-classification"),
                                          ("mean+std", "node-classification")])
def test_fn_m_dense_reference_variants(summary, head):
    cfg = _cfg(variant="fn_m", mixer_summary=summary, head=head, mixer_layers=2, num_blocks=4)
    g = small_graph(12, 5)
    batch, params, parts = setup(cfg, [g])
    assert np.allclose(forward(cfg, params, batch).data, reference_forward(cfg, params, g, parts[0]),
                       rtol=1e-10, atol=1e-12)


def test_batching_equals_separate_graphs():
    cfg = _cfg(variant="fn_m", num_blocks=2)
    graphs = [small_graph(n, n) for n in (8, 10, 13)]
    batch, params, parts = setup(cfg, graphs)
    joint = forward(cfg, params, batch).data
    for i, (g, p) in enumerate(zip(graphs, parts)):
        alone = forward(cfg, params, make_batch(cfg, [g], [p])).data
        assert np.allclose(joint[i], alone[0], atol=1e-12)


def test_make_batch_validation():
    cfg = _cfg()
    g = small_graph(8, 0)
    with pytest.raises(ValueError, match="partition"):
        make_batch(cfg, [g])
    with pytest.raises(ValueError, match="features"):
        make_batch(_cfg(in_dim=4), [g], [make_partition(g, "random", 3)])
    with pytest.raises(ValueError, match="C="):
        make_batch(cfg, [g], [make_partition(g, "random", 2)])


# layers --------------------------------------------------------------------

def test_gcn_layer_two_nodes_by_hand():
    g = from_edge_list(2, [(0, 1)], np.zeros((2, 1)))
    h = Tensor(np.array([[1.0], [2.0]]))
    params = {"W": Tensor(np.array([[3.0]])), "b": Tensor(np.array([-1.0]))}
    out = gcn_layer(h, g, np.ones(2), params, "")
    # node 0: 1 + 2*3 - 1, node 1: 2 + 1*3 - 1
    assert out.data.ravel().tolist() == [6.0, 4.0]


def test_gcn_layer_width_error():
    g = from_edge_list(2, [(0, 1)])
    with pytest.raises(ValueError, match="width"):
        gcn_layer(Tensor(np.ones((2, 3))), g, np.ones(2), {"W": Tensor(np.ones((2, 2))), "b": Tensor(np.zeros(2))}, "")


def test_gcn_on_path_smooths():
    # zero weights leave a constant signal unchanged; positive weights mix neighbours in
    g = _path(5)
    cfg = ModelConfig(backbone="gcn", variant="plain", num_layers=1, dim_h=1, in_dim=1, encoder=False)
    batch = make_batch(cfg, [g.with_features(np.array([[1.0], [0], [0], [0], [0]]))])
    params = init_params(cfg)
    params["layer0.W"].data[:] = 1.0
    h = encode(cfg, params, batch).h.data.ravel()
    assert h[1] > 0 and h[2] == 0
    assert h[1] == pytest.approx(1 / np.sqrt(2))


# fractal update invariants ------------------------------------------------------

def _instance(seed, n=20, d=4, c=3, k=1):
    g = small_graph(n, seed, in_dim=1)
    part = make_partition(g, "multilevel", c, k_hop=k, seed=seed)
    rows = np.concatenate([np.full(len(b), i) for i, b in enumerate(part.blocks)])
    cols = np.concatenate(part.blocks)
    lpf_m = ad.membership_mean_matrix(rows, cols, c, n)
    h = Tensor(np.random.default_rng(seed).normal(size=(n, d)) * 3)
    return g, part, lpf_m, h


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 2))
def test_hpf_block_sums_vanish(seed, k):
    g, part, lpf_m, h = _instance(seed, k=k)
    lpf = lpf_m @ h.data
    scale = np.abs(h.data).max()
    for c, blk in enumerate(part.blocks):
        hpf = h.data[blk] - lpf[c]
        assert np.abs(hpf.sum(axis=0)).max() <= 1e-12 * len(blk) * scale


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([(1,), (4,)]))
def test_zero_omega_is_mean_pooling(seed, shape):
    g, part, lpf_m, h = _instance(seed)
    out, _ = fractal_update(h, lpf_m, part.base_assignment, Tensor(np.zeros(shape)))
    mean_path = h + ad.gather(ad.sparse_matmul(lpf_m, h), part.base_assignment)
    assert np.array_equal(out.data, mean_path.data)
    explicit = np.stack([h.data[b].mean(axis=0) for b in part.blocks])[part.base_assignment]
    assert np.allclose(out.data, h.data + explicit, rtol=1e-13, atol=1e-13)


def test_omega_one_adds_hpf():
    g, part, lpf_m, h = _instance(1)
    out, lpf = fractal_update(h, lpf_m, part.base_assignment, Tensor(np.ones(1)))
    # lpf_c + (h_v - lpf_c) = h_v
    assert np.allclose(out.data, 2 * h.data)


def test_omega_shape_error():
    g, part, lpf_m, h = _instance(2)
    with pytest.raises(ValueError, match="omega"):
        fractal_update(h, lpf_m, part.base_assignment, Tensor(np.zeros(3)))


def test_fractal_exchange_uses_neighbour_blocks():
    g, part, lpf_m, h = _instance(3)
    a = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], float)
    a = a / a.sum(axis=1, keepdims=True)
    out, lpf = fractal_update(h, lpf_m, part.base_assignment, None, sp.csr_matrix(a))
    low = lpf.data + a @ lpf.data
    assert np.allclose(out.data, h.data + low[part.base_assignment])


def test_single_block_k0_every_node_gets_graph_mean():
    g = small_graph(9, 0, in_dim=1)
    part = Partition.from_assignment(np.zeros(9, dtype=int), 1)
    m = ad.membership_mean_matrix(np.zeros(9, dtype=int), np.arange(9), 1, 9)
    h = Tensor(np.arange(9.0)[:, None])
    out, lpf = fractal_update(h, m, part.base_assignment, None)
    assert lpf.data.ravel().tolist() == [4.0]
    assert np.allclose(out.data.ravel(), np.arange(9.0) + 4.0)


# mixer ---------------------------------------------------------------------

def test_mixer_zero_weights_is_identity():
    cfg = _cfg(variant="fn_m")
    params = init_params(cfg)
    for k in params:
        if k.startswith("mixer"):
            params[k].data[:] = 0
    f = Tensor(np.random.default_rng(0).normal(size=(2, 3, 5)))
    assert np.array_equal(fractal_mix(f, params, 1).data, f.data)


def test_mixer_token_step_mixes_blocks():
    cfg = _cfg(variant="fn_m")
    params = init_params(cfg, 1)
    f = np.zeros((1, 3, 5))
    f[0, 0] = np.arange(5.0)
    out = fractal_mix(Tensor(f), params, 1).data
    assert np.abs(out[0, 1:]).max() > 0


def test_mixer_permutation_equivariance_in_graphs():
    cfg = _cfg(variant="fn_m")
    params = init_params(cfg, 2)
    f = np.random.default_rng(1).normal(size=(4, 3, 5))
    a = fractal_mix(Tensor(f), params, 1).data
    b = fractal_mix(Tensor(f[::-1].copy()), params, 1).data
    assert np.allclose(a[::-1], b, atol=1e-14)


# gradients -----------------------------------------------------------------

GRAD_CASES = [(b, v, o, hpf) for b in ("gcn", "gatedgcn", "gine") for v in ("fn", "fn_a", "fn_m")
              for o in ("scalar", "vector", "off") for hpf in (True, False) if not (o == "off" and not hpf)]


@pytest.mark.parametrize("backbone,variant,omega,hpf", GRAD_CASES)
def test_end_to_end_gradients(backbone, variant, omega, hpf):
    cfg = _cfg(backbone=backbone, variant=variant, omega_mode=omega, use_hpf=hpf, dim_h=3, num_blocks=2,
               edge_dim=1 if backbone == "gine" else 0, mixer_summary="mean+std" if omega == "vector" else "mean")
    batch, params, _ = kink_free_setup(cfg, lambda s: [small_graph(10 + s % 4, s, edge_dim=cfg.edge_dim)], 0)
    labels = np.array([1])
    rep = grad_check(lambda: ad.cross_entropy(forward(cfg, params, batch), labels), list(params.values()))
    assert rep.max_rel_error < 1e-4, rep


@pytest.mark.parametrize("backbone", ["gcn", "gatedgcn", "gine"])
def test_plain_gradients_node_head(backbone):
    cfg = _cfg(backbone=backbone, variant="plain", head="node-classification", dim_h=3,
               edge_dim=2 if backbone == "gine" else 0)
    batch, params, _ = kink_free_setup(cfg, lambda s: [small_graph(12, s, edge_dim=cfg.edge_dim)], 0)
    labels = batch.node_labels
    rep = grad_check(lambda: ad.cross_entropy(forward(cfg, params, batch), labels), list(params.values()))
    assert rep.max_rel_error < 1e-4, rep


# equivariance and plain-path isolation ------------------------------------------

@pytest.mark.parametrize("variant", ["plain", "fn", "fn_m", "fn_a"])
def test_permutation_equivariance(variant):
    cfg = _cfg(variant=variant, head="node-classification", gcn_norm="augmented")
    g = small_graph(14, 4)
    batch, params, parts = setup(cfg, [g])
    perm = np.random.default_rng(0).permutation(14)
    gp = g.permuted(perm)
    pp = [parts[0].permuted(perm)] if parts else None
    a = forward(cfg, params, batch).data
    b = forward(cfg, params, make_batch(cfg, [gp], pp)).data
    assert np.allclose(a, b[perm], atol=1e-11)


def test_plain_ignores_fractal_settings():
    g = small_graph(10, 1)
    base = _cfg(variant="plain")
    batch, params, _ = setup(base, [g])
    ref = forward(base, params, batch).data
    for kw in (dict(num_blocks=7, k_hop=3), dict(omega_mode="vector"), dict(gcn_norm="augmented")):
        cfg = base.replace(**kw)
        assert np.array_equal(forward(cfg, params, make_batch(cfg, [g])).data, ref)


# positional encodings ------------------------------------------------------------

def test_lap_pe_cycle():
    n = 8
    g = from_edge_list(n, [(i, (i + 1) % n) for i in range(n)])
    pe = lap_pe(g, 3)
    lap = np.eye(n) - g.adjacency().toarray() / 2
    # each column is an eigenvector with eigenvalue 1 - cos(2 pi k / n)
    for j, lam in enumerate([1 - np.cos(2 * np.pi / n)] * 2 + [1 - np.cos(4 * np.pi / n)]):
        assert np.allclose(lap @ pe[:, j], lam * pe[:, j], atol=1e-10)
    assert np.allclose(np.linalg.norm(pe, axis=0), 1)


def test_lap_pe_pads_small_graphs():
    pe = lap_pe(from_edge_list(3, [(0, 1), (1, 2)]), 5)
    assert pe.shape == (3, 5) and np.all(pe[:, 2:] == 0)


def test_rwse_closed_forms():
    # cycle: return prob after 2 steps is 1/2; path of 2: returns at even steps
    c = from_edge_list(5, [(i, (i + 1) % 5) for i in range(5)])
    r = rwse(c, 4)
    assert np.allclose(r[:, 0], 0) and np.allclose(r[:, 1], 0.5)
    e = rwse(from_edge_list(2, [(0, 1)]), 4)
    assert np.allclose(e, [[0, 1, 0, 1]] * 2)


def test_lap_pe_sign_flip_in_training_only():
    cfg = ModelConfig(variant="plain", pe="lap", pe_dim=2, in_dim=1, dim_h=4)
    g = small_graph(10, 0, in_dim=1)
    batch = make_batch(cfg, [g, g])
    params = init_params(cfg)
    from fractalnode.model import node_input
    x0 = node_input(cfg, batch, training=False)
    assert np.array_equal(x0, node_input(cfg, batch, training=False))
    flips = [node_input(cfg, batch, True, np.random.default_rng(s)) for s in range(8)]
    assert any(not np.array_equal(f, x0) for f in flips)
    assert all(np.allclose(np.abs(f), np.abs(x0)) for f in flips)
    forward(cfg, params, batch, training=True, rng=np.random.default_rng(0))


def test_fractal_pe_is_coarse_laplacian_eigvecs():
    g = small_graph(20, 2)
    part = make_partition(g, "multilevel", 4)
    pe = fractal_positional_encoding(g, part, 3)
    a = np.zeros((4, 4))
    for u, v in g.undirected_edges():
        bu, bv = part.base_assignment[u], part.base_assignment[v]
        if bu != bv:
            a[bu, bv] += 1
            a[bv, bu] += 1
    lap = np.diag(a.sum(1)) - a
    w = np.linalg.eigvalsh(lap)
    for j in range(3):
        assert np.allclose(lap @ pe[:, j], w[j + 1] * pe[:, j], atol=1e-9)
        assert abs(pe[:, j].sum()) < 1e-9


def test_fractal_pe_forward_runs_and_identity_init():
    cfg = _cfg(variant="fn_m", fractal_pe=True, num_blocks=4)
    params = init_params(cfg)
    assert np.array_equal(params["fpe.O"].data, np.eye(5))
    assert params["fpe.T"].shape == (3, 5)
    g = small_graph(16, 1)
    batch, params, _ = setup(cfg, [g])
    assert batch.fractal_pe.shape == (4, 3)
    assert forward(cfg, params, batch).shape == (1, 2)
