import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pkmem.memory_layer import (MemoryLayer, StateError, attach_layers, make_layer, make_pool, memory_backward,
                                memory_flops, memory_lookup, memory_plus_forward, pool_parameter_count)
from pkmem.tensor import DimensionError, Tensor, finite_diff_check

from oracles import dense_memory, silu


def tiny(seed=0, half_n=4, n=8, v_dim=8, k=2, qk_norm=False, use_swilu=True, precision="wide"):
    rng = np.random.default_rng(seed)
    pool = make_pool(half_n, n, v_dim, rng, qk_norm=qk_norm, precision=precision)
    return pool, make_layer(pool, k, n, rng, use_swilu=use_swilu, precision=precision)


@pytest.mark.parametrize("qk_norm", [False, True])
@pytest.mark.parametrize("seed", range(10))
def test_lookup_matches_dense_oracle(seed, qk_norm):
    pool, layer = tiny(seed, qk_norm=qk_norm)
    x = np.random.default_rng(100 + seed).standard_normal(8)
    y, res = memory_lookup(layer, x)
    order, y_ref = dense_memory(pool.index.K1.data, pool.index.K2.data, pool.V.data, x, 2, qk_norm=qk_norm)
    assert res.indices.tolist() == order.tolist()
    assert np.abs(y - y_ref).max() < 1e-6


def test_k1_returns_value_row():
    pool, layer = tiny(1, k=1)
    x = np.random.default_rng(0).standard_normal(8)
    y, res = memory_lookup(layer, x)
    np.testing.assert_array_equal(y, pool.V.data[res.indices[0]])


def test_equal_scores_average_rows():
    pool, layer = tiny(2, half_n=2, n=2, v_dim=2, k=2)
    pool.index.K1.data[...] = [[1.0], [1.0]]
    pool.index.K2.data[...] = [[0.0], [-1.0]]
    y, res = memory_lookup(layer, np.array([1.0, 1.0]))
    assert res.indices.tolist() == [0, 2]
    np.testing.assert_allclose(y, (pool.V.data[0] + pool.V.data[2]) / 2, rtol=1e-15)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(1, 4))
def test_softmax_weights_are_a_distribution(seed, k):
    _, layer = tiny(seed, k=k, precision="standard")
    X = np.random.default_rng(seed).standard_normal((6, 8)).astype(np.float32)
    _, _, cache = layer.lookup(X)
    w = cache["w"]
    assert np.all(w >= 0) and np.abs(w.sum(axis=1) - 1).max() < 1e-6


def test_memory_plus_matches_stepwise_oracle():
    pool, layer = tiny(3, v_dim=6)
    x = np.random.default_rng(4).standard_normal(8)
    order, y = dense_memory(pool.index.K1.data, pool.index.K2.data, pool.V.data, x, 2)
    gate = silu(x @ layer.W1.data)
    ref = (y * gate) @ layer.W2.data
    np.testing.assert_allclose(memory_plus_forward(layer, x), ref, rtol=1e-12, atol=1e-14)


def test_zero_input_zero_gate():
    _, layer = tiny(5)
    np.testing.assert_array_equal(memory_plus_forward(layer, np.zeros(8)), np.zeros(8))


def test_identity_gating_passes_y_through():
    pool, layer = tiny(6)
    layer.W1.data[...] = np.eye(8)
    layer.W2.data[...] = np.eye(8)
    # silu(z) -> z for large z, so the gate passes y scaled by x
    x = 40 + np.random.default_rng(7).uniform(0, 1, 8)
    y, _ = memory_lookup(layer, x)
    np.testing.assert_allclose(memory_plus_forward(layer, x), y * x, rtol=1e-15)


def test_vanilla_memory_modes():
    pool, layer = tiny(8, use_swilu=False)
    x = np.random.default_rng(0).standard_normal(8)
    y, _ = memory_lookup(layer, x)
    np.testing.assert_array_equal(memory_plus_forward(layer, x), y)
    pool, layer = tiny(8, v_dim=5, use_swilu=False)
    y, _ = memory_lookup(layer, x)
    np.testing.assert_allclose(memory_plus_forward(layer, x), y @ layer.value_proj.data, rtol=1e-14)


def test_shape_errors():
    _, layer = tiny(0)
    with pytest.raises(DimensionError):
        memory_plus_forward(layer, np.zeros(7))
    pool = make_pool(4, 8, 8, np.random.default_rng(0))
    with pytest.raises(ValueError):
        MemoryLayer(pool, 5, 8, use_swilu=False)


def test_backward_before_forward():
    _, layer = tiny(0)
    with pytest.raises(StateError):
        memory_backward(layer, np.zeros(8))


def test_zero_grad_output():
    _, layer = tiny(9)
    memory_plus_forward(layer, np.random.default_rng(0).standard_normal(8))
    g = memory_backward(layer, np.zeros(8))
    for arr in (g.x, g.K1, g.K2, g.W1, g.W2, g.V.grads):
        assert not np.any(arr)


def test_k1_key_grads_vanish():
    pool, layer = tiny(10, k=1)
    x = np.random.default_rng(1).standard_normal(8)
    out = memory_plus_forward(layer, x)
    go = np.random.default_rng(2).standard_normal(8)
    g = memory_backward(layer, go)
    assert not np.any(g.K1) and not np.any(g.K2)
    y, res = memory_lookup(layer, x)
    gate = silu(x @ layer.W1.data)
    assert g.V.rows.tolist() == res.indices.tolist()
    np.testing.assert_allclose(g.V.grads[0], gate * (layer.W2.data @ go), rtol=1e-12)
    assert out.shape == (8,)


def _readout(layer_out, seed):
    w = Tensor(np.random.default_rng(seed).standard_normal(layer_out.shape))
    return (layer_out * w).mean()


@pytest.mark.parametrize("use_swilu", [False, True])
@pytest.mark.parametrize("qk_norm", [False, True])
def test_gradient_check_all_groups(use_swilu, qk_norm):
    pool, layer = tiny(11, v_dim=6, k=3, qk_norm=qk_norm, use_swilu=use_swilu)
    x = Tensor(np.random.default_rng(12).standard_normal((5, 8)), requires_grad=True, precision="wide")
    params = [x, pool.index.K1, pool.index.K2, pool.V, *layer.parameters()]
    err, per = finite_diff_check(lambda: _readout(layer(x), 13), params, h=3e-5, max_coords=30, details=True)
    assert len(per) == len(params)
    assert err < 1e-4


def test_shared_pool_two_layers_gradient_and_accumulation():
    rng = np.random.default_rng(14)
    pool = make_pool(4, 8, 8, rng, precision="wide")
    layers = attach_layers(pool, 2, {"k": 3, "n": 8, "precision": "wide"}, rng)
    x = Tensor(rng.standard_normal((4, 8)), requires_grad=True, precision="wide")

    def f():
        h = x
        for m in layers:
            h = h + m(h)
        return _readout(h, 15)

    params = [x, pool.index.K1, pool.index.K2, pool.V] + [p for m in layers for p in m.parameters()]
    assert finite_diff_check(f, params, h=3e-5, max_coords=30) < 1e-4
    # same input through both layers: the pool's V gradient is the sum of both
    X = x.data
    grads = []
    for m in layers:
        m.forward(X)
        grads.append(m.backward(np.ones((4, 8))).V)
    pool.V.zero_grad()
    xt = Tensor(X, precision="wide")
    (layers[0](xt) + layers[1](xt)).sum().backward()
    np.testing.assert_allclose(pool.V.dense_grad(), grads[0].to_dense(pool.V.shape) + grads[1].to_dense(pool.V.shape),
                               rtol=1e-12)


def test_attach_layers_param_counts():
    rng = np.random.default_rng(0)
    pool = make_pool(8, 16, 16, rng)
    before = pool.param_count()
    layers = attach_layers(pool, 3, {"k": 4, "n": 16}, rng)
    assert pool.ref_count == 3
    assert pool_parameter_count(layers) == before == 2 * 8 * 8 + 64 * 16
    assert sum(m.param_count() for m in layers) == 3 * 2 * 16 * 16
    assert len({id(m.W1) for m in layers}) == 3
    single = attach_layers(make_pool(8, 16, 16, rng), 1, {"k": 4, "n": 16}, rng)
    assert pool_parameter_count(single) == before
    with pytest.raises(ValueError):
        attach_layers(pool, 0)


def test_access_counter_k_rows_per_token():
    pool, layer = tiny(16, k=3, precision="standard")
    X = np.random.default_rng(0).standard_normal((7, 8)).astype(np.float32)
    pool.rows_touched = 0
    layer.forward(X)
    assert pool.rows_touched == 7 * 3


def test_flops_grow_with_sqrt_n_only():
    base = memory_flops(1, 64, 32, 16, 8, 64, True)
    double = memory_flops(1, 64, 32, 32, 8, 64, True)
    assert double - base == 2 * 16 * 32  # quadrupled N, doubled half table
    budget = 2 * 16 * 32 + 8 * 8 + 4 * 8 + 2 * 8 * 64 + 2 * 64 * 64 + 5 * 64 + 2 * 64 * 64
    assert base == budget
