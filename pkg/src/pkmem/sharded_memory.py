"""Simulated memory group: a value table sharded along the embedding dimension.

Each of ``G`` workers is a thread that owns the dim slice
``[g*n/G, (g+1)*n/G)`` of every value row.  A forward bag over the group runs
in three barrier-separated phases:

1. every worker sends its ``(indices, weights)`` to every worker;
2. every worker runs the bag over *all* gathered positions, restricted to its
   own slice, producing partial rows ``[total_rows, n/G]``;
3. every worker sends each peer the partial rows belonging to that peer's
   batch; a worker concatenates the ``G`` slices of its own rows.

No worker ever holds full-width rows for another worker's batch.  Workers
talk only through bounded in-memory mailboxes.  The backward pass reverses
the route: gradient slices go to their owning shard, which runs the
reverse-indices scatter over the gathered batch.
"""

from __future__ import annotations

import queue
import threading
from dataclasses import dataclass, field

import numpy as np

from .embedding_bag import BagBatch, SparseGrad, backward_reverse_indices, bag_forward

INDEX_GATHER = "IndexGather"
PARTIAL_EMBEDDING = "PartialEmbedding"
PARTIAL_GRAD = "PartialGrad"
HEADER_BYTES = 0  # payload-only accounting; headers are not wire-counted


class ShardConfigError(ValueError):
    pass


class ProtocolError(RuntimeError):
    pass


@dataclass
class ShardMessage:
    kind: str
    source: int
    dest: int
    payload: object
    nbytes: int


@dataclass
class Accounting:
    G: int
    phase_bytes: dict = field(default_factory=dict)
    messages: int = 0
    received: int = 0
    peak_rows: list = field(default_factory=list)
    peak_elements: list = field(default_factory=list)
    foreign_full_rows: int = 0

    @property
    def bytes_exchanged(self) -> int:
        return sum(self.phase_bytes.values())

    def to_json(self) -> dict:
        return {
            "G": self.G,
            "bytes_exchanged": self.bytes_exchanged,
            "peak_rows": list(self.peak_rows),
            "messages": self.messages,
            "phase_bytes": dict(self.phase_bytes),
            "peak_elements": list(self.peak_elements),
            "full_output_materialized": self.foreign_full_rows > 0,
        }


class MemoryGroup:
    def __init__(self, V: np.ndarray, G: int, timeout: float = 30.0, workers_per_shard: int = 1):
        V = np.asarray(getattr(V, "data", V))
        n = V.shape[1]
        if G < 1 or n % G:
            raise ShardConfigError(f"group size {G} does not divide value dim {n}")
        self.G = G
        self.n = n
        self.dtype = V.dtype
        self.width = n // G
        self.bounds = [(g * self.width, (g + 1) * self.width) for g in range(G)]
        self.shards = [np.ascontiguousarray(V[:, lo:hi]) for lo, hi in self.bounds]
        self.mailboxes = [queue.Queue(maxsize=max(G, 1)) for _ in range(G)]
        self.timeout = timeout
        self.workers_per_shard = workers_per_shard
        self.accounting = Accounting(G)
        self.fault: tuple[str, str] | None = None  # (action, kind) for protocol self-tests
        self._lock = threading.Lock()
        self._gathered: list[BagBatch] | None = None
        self._batch_sizes: list[int] | None = None

    # -- plumbing
    def reconstruct(self) -> np.ndarray:
        return np.concatenate(self.shards, axis=1)

    def _reset_accounting(self):
        self.accounting = Accounting(self.G, peak_rows=[0] * self.G, peak_elements=[0] * self.G)

    def _note_buffer(self, worker: int, rows: int, width: int, foreign_rows: int = 0):
        with self._lock:
            acc = self.accounting
            acc.peak_rows[worker] = max(acc.peak_rows[worker], rows)
            acc.peak_elements[worker] = max(acc.peak_elements[worker], rows * width)
            if foreign_rows and width == self.n and self.G > 1:
                acc.foreign_full_rows += foreign_rows

    def _send(self, msg: ShardMessage, phase: str):
        copies = 1
        if self.fault == ("drop", msg.kind) and msg.source == 0 and msg.dest == self.G - 1:
            copies = 0
        elif self.fault == ("duplicate", msg.kind) and msg.source == 0 and msg.dest == self.G - 1:
            copies = 2
        with self._lock:
            self.accounting.messages += 1
            self.accounting.phase_bytes[phase] = self.accounting.phase_bytes.get(phase, 0) + msg.nbytes
        for _ in range(copies):
            try:
                self.mailboxes[msg.dest].put(msg, timeout=self.timeout)
            except queue.Full:
                raise ProtocolError(f"mailbox of worker {msg.dest} overflowed ({msg.kind})") from None

    def _receive_all(self, worker: int, kind: str) -> list[ShardMessage]:
        got: dict[int, ShardMessage] = {}
        while len(got) < self.G:
            try:
                msg = self.mailboxes[worker].get(timeout=self.timeout)
            except queue.Empty:
                missing = sorted(set(range(self.G)) - set(got))
                raise ProtocolError(f"worker {worker} missing {kind} from {missing}") from None
            if msg.kind != kind or msg.dest != worker:
                raise ProtocolError(f"worker {worker} got unexpected {msg.kind} in {kind} phase")
            if msg.source in got:
                raise ProtocolError(f"worker {worker} got duplicate {kind} from {msg.source}")
            got[msg.source] = msg
        with self._lock:
            self.accounting.received += len(got)
        return [got[s] for s in range(self.G)]

    def _run(self, body):
        """Run ``body(worker, barrier)`` on G threads; surface the first failure."""
        barrier = threading.Barrier(self.G)
        errors: list[BaseException] = []
        results: list = [None] * self.G

        def target(g):
            try:
                results[g] = body(g, barrier)
            except threading.BrokenBarrierError:
                pass
            except BaseException as exc:  # noqa: BLE001 - re-raised below
                errors.append(exc)
                barrier.abort()

        threads = [threading.Thread(target=target, args=(g,), daemon=True) for g in range(self.G)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if errors:
            exc = errors[0]
            if isinstance(exc, ProtocolError):
                raise exc
            raise ProtocolError(f"worker failed: {exc!r}") from exc
        self._check_drained()
        return results

    def _check_drained(self):
        for g, box in enumerate(self.mailboxes):
            if not box.empty():
                leftover = box.get_nowait()
                while not box.empty():
                    box.get_nowait()
                raise ProtocolError(f"undelivered {leftover.kind} left for worker {g}")

    # -- forward
    def bag(self, batches: list[BagBatch]) -> list[np.ndarray]:
        if len(batches) != self.G:
            raise ProtocolError(f"expected {self.G} worker batches, got {len(batches)}")
        for b in batches:
            b.validate(self.shards[0].shape[0])
        self._reset_accounting()
        sizes = [b.B for b in batches]
        k = batches[0].k
        if any(b.k != k for b in batches):
            raise ProtocolError("all workers must use the same k")
        if self.G == 1:
            self._gathered = [batches[0]]
            self._batch_sizes = sizes
            self._note_buffer(0, sizes[0], self.n)
            return [bag_forward(self.shards[0], batches[0], self.workers_per_shard)]

        gathered: list[BagBatch | None] = [None] * self.G
        offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)

        def body(g, barrier):
            mine = batches[g]
            payload_bytes = mine.indices.nbytes + mine.weights.nbytes
            for d in range(self.G):
                self._send(ShardMessage(INDEX_GATHER, g, d, (mine.indices, mine.weights), payload_bytes),
                           "index_gather")
            msgs = self._receive_all(g, INDEX_GATHER)
            gb = BagBatch(np.concatenate([m.payload[0] for m in msgs]).reshape(-1, k),
                          np.concatenate([m.payload[1] for m in msgs]).reshape(-1, k), self.width)
            gathered[g] = gb
            barrier.wait()

            partial = bag_forward(self.shards[g], gb, self.workers_per_shard)
            self._note_buffer(g, partial.shape[0], partial.shape[1], partial.shape[0] - sizes[g])
            barrier.wait()

            for d in range(self.G):
                rows = partial[offsets[d]: offsets[d + 1]]
                self._send(ShardMessage(PARTIAL_EMBEDDING, g, d, rows, rows.nbytes), "partial_embedding")
            msgs = self._receive_all(g, PARTIAL_EMBEDDING)
            out = np.concatenate([m.payload for m in msgs], axis=1)
            self._note_buffer(g, out.shape[0], out.shape[1])
            return out

        outputs = self._run(body)
        self._gathered = gathered
        self._batch_sizes = sizes
        return outputs

    # -- backward
    def backward(self, grad_outs: list[np.ndarray]) -> list[SparseGrad]:
        if self._gathered is None:
            raise ProtocolError("backward before forward")
        sizes = self._batch_sizes
        if len(grad_outs) != self.G or any(np.shape(go)[0] != s for go, s in zip(grad_outs, sizes)):
            raise ProtocolError("grad_out shapes do not match the cached forward batches")
        grad_outs = [np.ascontiguousarray(go, dtype=self.dtype) for go in grad_outs]
        if self.G == 1:
            return [backward_reverse_indices(grad_outs[0], self._gathered[0], None, self.workers_per_shard)]
        self.accounting.phase_bytes.pop("partial_grad", None)

        def body(g, barrier):
            go = grad_outs[g]
            for d, (lo, hi) in enumerate(self.bounds):
                part = np.ascontiguousarray(go[:, lo:hi])
                if not part.any():
                    # header-only message: receiver substitutes zeros
                    self._send(ShardMessage(PARTIAL_GRAD, g, d, None, HEADER_BYTES), "partial_grad")
                else:
                    self._send(ShardMessage(PARTIAL_GRAD, g, d, part, part.nbytes), "partial_grad")
            msgs = self._receive_all(g, PARTIAL_GRAD)
            parts = [np.zeros((sizes[m.source], self.width), self.dtype) if m.payload is None else m.payload
                     for m in msgs]
            gslice = np.concatenate(parts, axis=0)
            return backward_reverse_indices(gslice, self._gathered[g], None, self.workers_per_shard)

        return self._run(body)


def shard_values(V, G: int) -> MemoryGroup:
    return MemoryGroup(V, G)


def sharded_bag(group: MemoryGroup, per_worker_batches: list[BagBatch]) -> list[np.ndarray]:
    return group.bag(per_worker_batches)


def sharded_backward(group: MemoryGroup, grad_outs: list[np.ndarray]) -> list[SparseGrad]:
    return group.backward(grad_outs)


def activation_accounting(group: MemoryGroup, batches: list[BagBatch]) -> dict:
    """Run a forward bag and report exchange volume and per-worker peaks."""
    group.bag(batches)
    acc = group.accounting
    total_rows = sum(b.B for b in batches)
    for g in range(group.G):
        if acc.peak_elements[g] > max(total_rows * group.width, max(b.B for b in batches) * group.n):
            raise AssertionError(f"worker {g} exceeded its slice budget")
    if acc.foreign_full_rows:
        raise AssertionError("a worker materialized full-width rows of another worker's batch")
    if acc.messages != acc.received:
        raise AssertionError(f"{acc.messages} messages sent, {acc.received} received")
    return acc.to_json()


def unsharded_reference(V, batches: list[BagBatch]):
    """Forward outputs and the gathered batch as one unsharded table would see them."""
    outs = [bag_forward(V, b) for b in batches]
    k = batches[0].k
    gathered = BagBatch(np.concatenate([b.indices for b in batches]).reshape(-1, k),
                        np.concatenate([b.weights for b in batches]).reshape(-1, k), np.shape(V)[1])
    return outs, gathered
