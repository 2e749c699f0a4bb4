import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pkmem.embedding_bag import BagBatch, backward_reverse_indices, bag_forward, uniform_batch
from pkmem.sharded_memory import (INDEX_GATHER, PARTIAL_EMBEDDING, PARTIAL_GRAD, ProtocolError, ShardConfigError,
                                  activation_accounting, shard_values, sharded_backward, sharded_bag,
                                  unsharded_reference)


def setup(G, n=16, N_v=64, sizes=None, k=3, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    V = rng.standard_normal((N_v, n)).astype(dtype)
    sizes = sizes or [5] * G
    batches = [uniform_batch(B, k, N_v, rng, n, dtype) for B in sizes]
    return V, batches, rng


def test_shard_shapes_and_reconstruct():
    V = np.random.default_rng(0).standard_normal((10, 8)).astype(np.float32)
    g1 = shard_values(V, 1)
    np.testing.assert_array_equal(g1.shards[0], V)
    g2 = shard_values(V, 2)
    assert [s.shape for s in g2.shards] == [(10, 4), (10, 4)]
    np.testing.assert_array_equal(g2.reconstruct(), V)
    assert g2.bounds == [(0, 4), (4, 8)]


@pytest.mark.parametrize("G", [3, 5, 0])
def test_group_size_must_divide(G):
    with pytest.raises(ShardConfigError):
        shard_values(np.zeros((4, 8)), G)


@settings(max_examples=20, deadline=None)
@given(G=st.sampled_from([1, 2, 4, 8]), seed=st.integers(0, 10_000))
def test_round_trip_and_forward_bit_exact(G, seed):
    V, batches, _ = setup(G, seed=seed, sizes=[int(s) for s in np.random.default_rng(seed).integers(0, 6, G)])
    group = shard_values(V, G)
    np.testing.assert_array_equal(group.reconstruct(), V)
    outs = sharded_bag(group, batches)
    for out, b in zip(outs, batches):
        np.testing.assert_array_equal(out, bag_forward(V, b))


@pytest.mark.parametrize("G", [1, 2, 4, 8])
def test_backward_matches_unsharded(G):
    V, batches, rng = setup(G, seed=G)
    group = shard_values(V, G)
    sharded_bag(group, batches)
    grads = [rng.standard_normal((b.B, 16)).astype(np.float32) for b in batches]
    shard_grads = sharded_backward(group, grads)
    _, gathered = unsharded_reference(V, batches)
    ref = backward_reverse_indices(np.concatenate(grads), gathered)
    for g, sg in enumerate(shard_grads):
        lo, hi = group.bounds[g]
        assert sg.equals(ref.dim_slice(lo, hi))
    full = np.concatenate([sg.grads for sg in shard_grads], axis=1)
    np.testing.assert_array_equal(full, ref.grads)


def test_empty_worker_still_serves_lookups():
    V, batches, _ = setup(2, sizes=[0, 6])
    outs = sharded_bag(shard_values(V, 2), batches)
    assert outs[0].shape == (0, 16)
    np.testing.assert_array_equal(outs[1], bag_forward(V, batches[1]))


def test_accounting_single_worker_no_exchange():
    V, batches, _ = setup(1)
    acc = activation_accounting(shard_values(V, 1), batches)
    assert acc["bytes_exchanged"] == 0 and acc["messages"] == 0


@pytest.mark.parametrize("G", [2, 4])
def test_accounting_phase_bytes(G):
    V, batches, _ = setup(G, sizes=[3, 7] * (G // 2))
    group = shard_values(V, G)
    acc = activation_accounting(group, batches)
    total = sum(b.B for b in batches)
    assert acc["phase_bytes"]["partial_embedding"] == total * 16 * 4
    assert acc["messages"] == 2 * G * G
    assert not acc["full_output_materialized"]
    assert all(r <= total for r in acc["peak_rows"])
    assert all(e <= max(total * 16 // G, max(b.B for b in batches) * 16) for e in acc["peak_elements"])
    assert {"G", "bytes_exchanged", "peak_rows", "messages"} <= set(acc)


def test_zero_grad_sends_headers_only():
    V, batches, _ = setup(4)
    group = shard_values(V, 4)
    sharded_bag(group, batches)
    sgs = sharded_backward(group, [np.zeros((b.B, 16), np.float32) for b in batches])
    assert group.accounting.phase_bytes["partial_grad"] == 0
    assert all(not sg.grads.any() for sg in sgs)


@pytest.mark.parametrize("action", ["drop", "duplicate"])
@pytest.mark.parametrize("kind", [INDEX_GATHER, PARTIAL_EMBEDDING])
def test_protocol_faults_detected(action, kind):
    V, batches, _ = setup(2)
    group = shard_values(V, 2)
    group.timeout = 0.5
    group.fault = (action, kind)
    with pytest.raises(ProtocolError):
        sharded_bag(group, batches)


def test_backward_fault_and_misuse():
    V, batches, _ = setup(2)
    group = shard_values(V, 2)
    with pytest.raises(ProtocolError):
        sharded_backward(group, [np.zeros((5, 16), np.float32)] * 2)
    sharded_bag(group, batches)
    with pytest.raises(ProtocolError):
        sharded_backward(group, [np.zeros((4, 16), np.float32)] * 2)
    group.timeout = 0.5
    group.fault = ("drop", PARTIAL_GRAD)
    with pytest.raises(ProtocolError):
        sharded_backward(group, [np.ones((5, 16), np.float32)] * 2)


def test_wrong_worker_count():
    V, batches, _ = setup(2)
    with pytest.raises(ProtocolError):
        sharded_bag(shard_values(V, 4), batches)


def test_mixed_k_rejected():
    V = np.zeros((8, 4), np.float32)
    a = BagBatch([[0, 1]], [[1.0, 1.0]], 4)
    b = BagBatch([[0]], [[1.0]], 4)
    with pytest.raises(ProtocolError):
        sharded_bag(shard_values(V, 2), [a, b])
