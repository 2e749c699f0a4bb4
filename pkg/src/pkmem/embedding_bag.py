"""Weighted bag-of-rows forward and three sparse backward strategies.

Forward: ``out[b] = sum_j weights[b, j] * V[indices[b, j]]``.

Backward produces a :class:`SparseGrad` for ``V``.  Positions ``p = b*k + j``
that hit the same row must be summed; the strategies differ only in how
concurrent workers resolve that contention:

* ``atomics``: workers own contiguous position blocks and add every element
  with a compare-and-swap loop.
* ``lock``: same partition, but a worker takes a per-row spinlock once and
  adds the whole row under it.
* ``reverse_indices``: positions are first grouped by row; workers own
  contiguous row blocks and sum each row sequentially, so no synchronization
  is needed and the result is bit-reproducible.
"""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import _native

STRATEGIES = ("atomics", "lock", "reverse_indices")


class ConsistencyError(RuntimeError):
    pass


@dataclass
class BagBatch:
    indices: np.ndarray  # [B, k] int64
    weights: np.ndarray  # [B, k]
    value_dim: int

    def __post_init__(self):
        self.indices = np.ascontiguousarray(self.indices, dtype=np.int64)
        self.weights = np.ascontiguousarray(self.weights)
        if self.indices.ndim != 2 or self.indices.shape != self.weights.shape:
            raise ValueError(f"indices {self.indices.shape} and weights {self.weights.shape} must be equal [B, k]")

    @property
    def B(self) -> int:
        return self.indices.shape[0]

    @property
    def k(self) -> int:
        return self.indices.shape[1]

    @property
    def num_positions(self) -> int:
        return self.indices.size

    def validate(self, num_rows: int):
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= num_rows):
            raise IndexError(f"bag index out of range for {num_rows} value rows")


@dataclass
class SparseGrad:
    rows: np.ndarray  # strictly ascending
    grads: np.ndarray  # [len(rows), n]

    @classmethod
    def empty(cls, n: int, dtype=np.float32) -> "SparseGrad":
        return cls(np.zeros(0, dtype=np.int64), np.zeros((0, n), dtype=dtype))

    @property
    def dim(self) -> int:
        return self.grads.shape[1]

    def to_dense(self, shape) -> np.ndarray:
        out = np.zeros(shape, dtype=self.grads.dtype)
        out[self.rows] = self.grads
        return out

    def checksum(self) -> float:
        return float(self.grads.sum(dtype=np.float64))

    def scaled(self, c: float) -> "SparseGrad":
        return SparseGrad(self.rows, self.grads * self.grads.dtype.type(c))

    def dim_slice(self, lo: int, hi: int) -> "SparseGrad":
        return SparseGrad(self.rows, np.ascontiguousarray(self.grads[:, lo:hi]))

    def merge(self, other: "SparseGrad") -> "SparseGrad":
        """Row-wise sum of two sparse gradients over the same table."""
        return merge_sparse([self, other])

    def equals(self, other: "SparseGrad") -> bool:
        return np.array_equal(self.rows, other.rows) and np.array_equal(self.grads, other.grads)

    def check(self):
        if len(self.rows) > 1 and not np.all(np.diff(self.rows) > 0):
            raise ConsistencyError("SparseGrad rows must be strictly ascending")


def merge_sparse(parts: list[SparseGrad]) -> SparseGrad:
    parts = [p for p in parts if p is not None]
    if not parts:
        raise ValueError("nothing to merge")
    if len(parts) == 1:
        return parts[0]
    rows = np.concatenate([p.rows for p in parts])
    uniq, inv = np.unique(rows, return_inverse=True)
    out = np.zeros((len(uniq), parts[0].dim), dtype=parts[0].grads.dtype)
    offset = 0
    # part order is preserved, so each row sums its contributions in list order
    for p in parts:
        out[inv[offset: offset + len(p.rows)]] += p.grads
        offset += len(p.rows)
    return SparseGrad(uniq, out)


@dataclass
class ReverseIndex:
    """Positions grouped by value row, stable in ``(b, j)`` order within a row."""

    rows: np.ndarray  # [U] ascending distinct rows
    offsets: np.ndarray  # [U + 1]
    positions: np.ndarray  # [P] flat positions b*k + j
    k: int

    @property
    def num_positions(self) -> int:
        return len(self.positions)

    def group(self, i: int) -> list[tuple[int, int]]:
        ps = self.positions[self.offsets[i]: self.offsets[i + 1]]
        return [(int(p) // self.k, int(p) % self.k) for p in ps]

    def as_dict(self) -> dict[int, list[tuple[int, int]]]:
        return {int(r): self.group(i) for i, r in enumerate(self.rows)}


def _values(V) -> np.ndarray:
    return np.asarray(getattr(V, "data", V))


def _blocks(total: int, workers: int) -> list[tuple[int, int]]:
    workers = max(1, min(workers, total)) if total else 1
    bounds = np.linspace(0, total, workers + 1).astype(np.int64)
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def _run_blocks(fn, blocks):
    if len(blocks) <= 1:
        for a, b in blocks:
            fn(a, b)
        return
    with ThreadPoolExecutor(max_workers=len(blocks)) as pool:
        list(pool.map(lambda ab: fn(*ab), blocks))


def bag_forward(V, batch: BagBatch, workers: int = 1) -> np.ndarray:
    """Weighted sum of the selected rows for every batch item."""
    V = _values(V)
    batch.validate(V.shape[0])
    out = np.zeros((batch.B, V.shape[1]), dtype=V.dtype)
    w = batch.weights.astype(V.dtype, copy=False)

    def run(a, b):
        idx = batch.indices[a:b]
        acc = out[a:b]
        # fixed j order per output element, whatever the partition
        for j in range(batch.k):
            acc += w[a:b, j, None] * V[idx[:, j]]

    _run_blocks(run, _blocks(batch.B, workers))
    return out


def _compact(batch: BagBatch):
    rows, slot = np.unique(batch.indices.reshape(-1), return_inverse=True)
    return rows.astype(np.int64), np.ascontiguousarray(slot.reshape(-1), dtype=np.int64)


def _prep(grad_out, batch: BagBatch):
    g = np.ascontiguousarray(_values(grad_out))
    if g.shape[0] != batch.B:
        raise ValueError(f"grad_out has {g.shape[0]} rows for a batch of {batch.B}")
    w = np.ascontiguousarray(batch.weights.reshape(-1), dtype=g.dtype)
    return g, w


def backward_atomics(grad_out, batch: BagBatch, workers: int = 1) -> SparseGrad:
    g, w = _prep(grad_out, batch)
    n = g.shape[1]
    if batch.num_positions == 0:
        return SparseGrad.empty(n, g.dtype)
    rows, slot = _compact(batch)
    out = np.zeros((len(rows), n), dtype=g.dtype)
    lib = _native.load()
    if lib is not None:
        fn = getattr(lib, f"backward_atomics_{_native.suffix(g.dtype)}")
        fn(g, w, slot, batch.num_positions, batch.k, n, out, int(workers))
    else:
        _py_locked(g, w, slot, batch.k, out, workers)
    return SparseGrad(rows, out)


def backward_lock(grad_out, batch: BagBatch, workers: int = 1) -> SparseGrad:
    g, w = _prep(grad_out, batch)
    n = g.shape[1]
    if batch.num_positions == 0:
        return SparseGrad.empty(n, g.dtype)
    rows, slot = _compact(batch)
    out = np.zeros((len(rows), n), dtype=g.dtype)
    lib = _native.load()
    if lib is not None:
        locks = np.zeros(len(rows), dtype=np.uint8)
        fn = getattr(lib, f"backward_lock_{_native.suffix(g.dtype)}")
        fn(g, w, slot, batch.num_positions, batch.k, n, out, locks, int(workers))
    else:
        _py_locked(g, w, slot, batch.k, out, workers)
    return SparseGrad(rows, out)


def _py_locked(g, w, slot, k, out, workers):
    # fallback: row locks around whole-row adds (no element atomics in Python)
    locks = [threading.Lock() for _ in range(len(out))]

    def run(a, b):
        for p in range(a, b):
            r = slot[p]
            with locks[r]:
                out[r] += w[p] * g[p // k]

    _run_blocks(run, _blocks(len(slot), workers))


def build_reverse_index(batch: BagBatch) -> ReverseIndex:
    flat = batch.indices.reshape(-1)
    rows, slot = np.unique(flat, return_inverse=True)
    positions = np.argsort(slot.reshape(-1), kind="stable").astype(np.int64)
    counts = np.bincount(slot.reshape(-1), minlength=len(rows))
    offsets = np.zeros(len(rows) + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return ReverseIndex(rows.astype(np.int64), offsets, positions, batch.k)


def backward_reverse_indices(grad_out, batch: BagBatch, rev: ReverseIndex | None = None,
                             workers: int = 1) -> SparseGrad:
    g, w = _prep(grad_out, batch)
    n = g.shape[1]
    if rev is None:
        rev = build_reverse_index(batch)
    if rev.num_positions != batch.num_positions or rev.k != batch.k:
        raise ConsistencyError(
            f"reverse index covers {rev.num_positions} positions, batch has {batch.num_positions}")
    U = len(rev.rows)
    out = np.zeros((U, n), dtype=g.dtype)
    if U == 0:
        return SparseGrad(rev.rows, out)
    lib = _native.load()
    if lib is not None:
        fn = getattr(lib, f"backward_reverse_{_native.suffix(g.dtype)}")
        fn(g, w, rev.offsets, rev.positions, U, batch.k, n, out, int(workers))
    else:
        def run(a, b):
            for r in range(a, b):
                acc = out[r]
                for p in rev.positions[rev.offsets[r]: rev.offsets[r + 1]]:
                    acc += w[p] * g[p // batch.k]

        _run_blocks(run, _blocks(U, workers))
    return SparseGrad(rev.rows, out)


def sequential_backward(grad_out, batch: BagBatch) -> SparseGrad:
    """Single-threaded scatter-add in ascending position order (oracle)."""
    g, w = _prep(grad_out, batch)
    n = g.shape[1]
    rows = np.unique(batch.indices.reshape(-1)).astype(np.int64)
    out = np.zeros((len(rows), n), dtype=g.dtype)
    where = {int(r): i for i, r in enumerate(rows)}
    flat = batch.indices.reshape(-1)
    for p in range(batch.num_positions):
        out[where[int(flat[p])]] += w[p] * g[p // batch.k]
    return SparseGrad(rows, out)


def backward(strategy: str, grad_out, batch: BagBatch, workers: int = 1) -> SparseGrad:
    if strategy == "atomics":
        return backward_atomics(grad_out, batch, workers)
    if strategy == "lock":
        return backward_lock(grad_out, batch, workers)
    if strategy == "reverse_indices":
        return backward_reverse_indices(grad_out, batch, None, workers)
    if strategy == "sequential":
        return sequential_backward(grad_out, batch)
    raise ValueError(f"unknown backward strategy {strategy!r}")


# -- batch generators -------------------------------------------------------

def collision_batch(B: int, k: int, num_rows: int, collision: float, rng: np.random.Generator,
                    n: int = 0, dtype=np.float32) -> BagBatch:
    """Batch where a ``collision`` fraction of positions share one hot row.

    The remaining positions get distinct rows, so ``collision=0`` is
    contention-free and ``collision=1`` sends everything to a single row.
    """
    P = B * k
    hot_count = int(round(collision * P))
    if P - hot_count + 1 > num_rows:
        raise ValueError("not enough value rows for the requested distinct positions")
    distinct = rng.choice(num_rows, size=P - hot_count + 1, replace=False)
    hot, rest = distinct[0], distinct[1:]
    flat = np.concatenate([np.full(hot_count, hot), rest])
    rng.shuffle(flat)
    weights = rng.uniform(0.0, 1.0, size=(B, k)).astype(dtype)
    return BagBatch(flat.reshape(B, k), weights, n)


def zipf_batch(B: int, k: int, num_rows: int, rng: np.random.Generator, exponent: float = 1.1,
               n: int = 0, dtype=np.float32) -> BagBatch:
    """Row popularity follows a bounded Zipf law over a random row permutation."""
    ranks = np.arange(1, num_rows + 1, dtype=np.float64)
    p = ranks ** -exponent
    p /= p.sum()
    perm = rng.permutation(num_rows)
    flat = perm[rng.choice(num_rows, size=B * k, p=p)]
    weights = rng.uniform(0.0, 1.0, size=(B, k)).astype(dtype)
    return BagBatch(flat.reshape(B, k), weights, n)


def uniform_batch(B: int, k: int, num_rows: int, rng: np.random.Generator, n: int = 0,
                  dtype=np.float32) -> BagBatch:
    flat = rng.integers(0, num_rows, size=B * k)
    weights = rng.uniform(0.0, 1.0, size=(B, k)).astype(dtype)
    return BagBatch(flat.reshape(B, k), weights, n)
