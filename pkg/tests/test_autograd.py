import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st
from scipy.special import erf

from fractalnode import autograd as ad
from fractalnode.autograd import Tape, Tensor, grad_check
from fractalnode.graph import erdos_renyi

H = 1e-5


def _t(rng, *shape, scale=1.0):
    return Tensor(rng.normal(size=shape) * scale, requires_grad=True)


def _check(fn, inputs, tol=1e-6):
    rep = grad_check(fn, inputs, h=H)
    assert rep.max_rel_error < tol, rep


def _kink_free(build, seed, margin=10 * H):
    # resample until no relu input sits within a few steps of 0
    for s in range(seed, seed + 50):
        rng = np.random.default_rng(s)
        fn, inputs = build(rng)
        with ad.KinkMonitor() as mon:
            fn()
        if mon.margin > margin:
            return fn, inputs
    raise RuntimeError("no kink-free instance found")


def test_backward_simple_values():
    x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    w = Tensor([2.0, 0.5, -1.0], requires_grad=True)
    with Tape() as tape:
        y = (x * w).sum()
    tape.backward(y)
    assert np.array_equal(x.grad, w.data) and np.array_equal(w.grad, x.data)


def test_grad_accumulates_over_reuse():
    x = Tensor(np.array([3.0]), requires_grad=True)
    with Tape() as tape:
        y = (x * x + x).sum()
    tape.backward(y)
    assert x.grad[0] == pytest.approx(7.0)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad() as tape:
        (x * 2).sum()
    assert len(tape) == 0


@pytest.mark.parametrize("op", ["add", "sub", "mul"])
def test_broadcast_binary(op):
    rng = np.random.default_rng(0)
    a, b = _t(rng, 4, 3), _t(rng, 1, 3)
    f = getattr(ad, op)
    _check(lambda: (f(a, b) * f(a, b)).sum(), [a, b])


def test_broadcast_mismatch_message():
    with pytest.raises(ValueError, match="add"):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


def test_matmul_batched():
    rng = np.random.default_rng(1)
    a, b = _t(rng, 2, 3, 4), _t(rng, 4, 5)
    _check(lambda: ad.matmul(a, b).sum() * 1.0 + (ad.matmul(a, b) * ad.matmul(a, b)).sum(), [a, b])


def test_matmul_shape_error():
    with pytest.raises(ValueError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


def test_relu_value_and_grad():
    def build(rng):
        x = _t(rng, 5, 4)
        return (lambda: (ad.relu(x) * ad.relu(x)).sum()), [x]
    fn, inputs = _kink_free(build, 0, margin=1e-3)
    _check(fn, inputs)


def test_kink_monitor_flags_zero():
    x = Tensor(np.array([0.0, 1.0]))
    with ad.KinkMonitor() as mon:
        ad.relu(x)
    assert mon.margin == 0.0


def test_gelu_exact_form():
    x = np.linspace(-4, 4, 17)
    y = ad.gelu(Tensor(x)).data
    assert np.allclose(y, 0.5 * x * (1 + erf(x / np.sqrt(2))), atol=1e-15)


@pytest.mark.parametrize("name", ["gelu", "sigmoid", "softmax", "layer_norm"])
def test_smooth_unary(name):
    rng = np.random.default_rng(2)
    x = _t(rng, 4, 6)
    w = rng.normal(size=(4, 6))
    f = getattr(ad, name)
    _check(lambda: (f(x) * Tensor(w)).sum(), [x])


def test_sqrt():
    rng = np.random.default_rng(3)
    x = Tensor(rng.uniform(0.5, 2.0, size=(3, 3)), requires_grad=True)
    _check(lambda: ad.sqrt(x).sum(), [x])


def test_softmax_rows_sum_to_one():
    x = Tensor(np.random.default_rng(0).normal(size=(5, 7)) * 50)
    assert np.allclose(ad.softmax(x).data.sum(axis=-1), 1.0)


def test_layer_norm_stats():
    x = Tensor(np.random.default_rng(0).normal(size=(5, 16)) * 3 + 2)
    y = ad.layer_norm(x).data
    assert np.allclose(y.mean(-1), 0, atol=1e-12)
    assert np.allclose(y.var(-1), 1, atol=1e-3)


def test_shape_ops():
    rng = np.random.default_rng(4)
    a, b = _t(rng, 2, 3, 4), _t(rng, 2, 3, 2)
    w = Tensor(rng.normal(size=(2, 6, 3)))

    def fn():
        c = ad.concat([a, b], axis=-1)
        t = ad.transpose(c, (0, 2, 1))
        return (t * w).sum() + (ad.reshape(a, (6, 4)).mean(axis=0) * ad.reshape(a, (6, 4)).mean(axis=0)).sum()
    _check(fn, [a, b])


def test_sum_mean_axes():
    rng = np.random.default_rng(5)
    x = _t(rng, 3, 4, 2)
    _check(lambda: (x.sum(axis=1) * x.mean(axis=(0, 2), keepdims=True).sum()).sum(), [x])


def test_gather_duplicates():
    rng = np.random.default_rng(6)
    x = _t(rng, 4, 3)
    idx = np.array([0, 0, 3, 1, 0])
    w = Tensor(rng.normal(size=(5, 3)))
    _check(lambda: (ad.gather(x, idx) * w).sum(), [x])
    with Tape() as tape:
        y = ad.gather(x, idx).sum()
    x.grad = None
    tape.backward(y)
    assert np.array_equal(x.grad[:, 0], [3, 1, 0, 1])


def test_scatter_gather_adjoint():
    # <scatter(x), y> == <x, gather(y)>
    rng = np.random.default_rng(7)
    idx = rng.integers(0, 5, 12)
    x, y = rng.normal(size=(12, 3)), rng.normal(size=(5, 3))
    lhs = (ad.scatter_sum(Tensor(x), idx, 5).data * y).sum()
    rhs = (x * ad.gather(Tensor(y), idx).data).sum()
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_sparse_matmul_grad():
    rng = np.random.default_rng(8)
    s = sp.random(6, 4, density=0.5, random_state=0, format="csr")
    x = _t(rng, 4, 3)
    w = Tensor(rng.normal(size=(6, 3)))
    _check(lambda: (ad.sparse_matmul(s, x) * w).sum(), [x])


def test_segment_mean_and_broadcast():
    rng = np.random.default_rng(9)
    assign = np.array([0, 1, 1, 2, 0, 2, 2])
    x = _t(rng, 7, 2)
    m = ad.segment_mean(x, assign, 3).data
    for c in range(3):
        assert np.allclose(m[c], x.data[assign == c].mean(axis=0))
    b = ad.segment_broadcast(Tensor(m), assign).data
    assert np.array_equal(b, m[assign])
    with pytest.raises(ValueError, match="empty segment"):
        ad.segment_mean(x, assign, 4)


def test_membership_mean_overlap():
    rows = np.array([0, 0, 1, 1, 1])
    cols = np.array([0, 1, 1, 2, 3])
    m = ad.membership_mean_matrix(rows, cols, 2, 4).toarray()
    assert np.allclose(m, [[0.5, 0.5, 0, 0], [0, 1 / 3, 1 / 3, 1 / 3]])


def test_neighbor_aggregate_dense_oracle():
    g = erdos_renyi(12, 0.3, 1)
    rng = np.random.default_rng(0)
    h = rng.normal(size=(12, 3))
    a = g.adjacency().toarray()
    assert np.allclose(ad.sparse_neighbor_aggregate(g, Tensor(h)).data, a @ h)
    w = rng.normal(size=len(g.indices))
    wa = sp.csr_matrix((w, g.indices, g.indptr), shape=(12, 12)).toarray()
    assert np.allclose(ad.sparse_neighbor_aggregate(g, Tensor(h), w).data, wa @ h)
    wt = Tensor(np.tile(w[:, None], (1, 3)), requires_grad=True)
    ht = Tensor(h, requires_grad=True)
    assert np.allclose(ad.sparse_neighbor_aggregate(g, ht, wt).data, wa @ h)
    _check(lambda: (ad.sparse_neighbor_aggregate(g, ht, wt) * ad.sparse_neighbor_aggregate(g, ht, wt)).sum(), [ht, wt])


def test_neighbor_aggregate_bad_weights():
    g = erdos_renyi(5, 0.5, 0)
    with pytest.raises(ValueError):
        ad.sparse_neighbor_aggregate(g, Tensor(np.ones((5, 2))), np.ones(len(g.indices) + 1))


def test_cross_entropy_value_and_grad():
    rng = np.random.default_rng(10)
    z = _t(rng, 6, 4)
    y = rng.integers(0, 4, 6)
    logp = z.data - np.log(np.exp(z.data).sum(1, keepdims=True))
    assert ad.cross_entropy(z, y).data == pytest.approx(-logp[np.arange(6), y].mean())
    _check(lambda: ad.cross_entropy(z, y), [z])


def test_cross_entropy_stable():
    z = Tensor(np.array([[1000.0, 0.0]]))
    assert np.isfinite(ad.cross_entropy(z, np.array([1])).data)


def test_bce_masks_nan():
    rng = np.random.default_rng(11)
    z = _t(rng, 4, 3)
    y = rng.integers(0, 2, (4, 3)).astype(float)
    y[0, 1] = np.nan
    mask = ~np.isnan(y)
    p = 1 / (1 + np.exp(-z.data))
    ref = -(np.where(mask, np.nan_to_num(y) * np.log(p) + (1 - np.nan_to_num(y)) * np.log(1 - p), 0)).sum() / mask.sum()
    assert ad.binary_cross_entropy(z, y).data == pytest.approx(ref)
    _check(lambda: ad.binary_cross_entropy(z, y), [z])


def test_l1():
    rng = np.random.default_rng(12)
    z = _t(rng, 5, 2)
    y = rng.normal(size=(5, 2))
    assert ad.l1_loss(z, y).data == pytest.approx(np.abs(z.data - y).mean())
    _check(lambda: ad.l1_loss(z, y), [z])


def test_grad_check_catches_wrong_backward():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)

    def bad_square(t):
        return ad._emit(t.data ** 2, (t,), lambda g: (g * t.data,))   # missing factor 2
    rep = grad_check(lambda: bad_square(x).sum(), [x])
    assert not rep.passed and rep.max_rel_error > 0.4


def test_grad_check_needs_scalar():
    x = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ValueError):
        grad_check(lambda: x * 2.0, [x])


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 10_000))
def test_mlp_gradients(n, d, k, seed):
    def build(rng):
        x, w1, w2 = _t(rng, n, d), _t(rng, d, k), _t(rng, k, 2)
        return (lambda: ad.gelu(ad.relu(x @ w1) @ w2).sum()), [x, w1, w2]
    fn, inputs = _kink_free(build, seed)
    _check(fn, inputs, tol=1e-4)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    params = {"a": _t(rng, 3, 2), "b": _t(rng, 4), "c": Tensor(np.array(1.5))}
    ad.save_checkpoint(params, tmp_path / "ck")
    back = ad.load_checkpoint(tmp_path / "ck")
    assert list(back) == ["a", "b", "c"]
    for k in params:
        assert np.array_equal(params[k].data, back[k].data)
        assert back[k].data.dtype == np.float64
