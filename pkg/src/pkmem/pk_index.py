"""Product-key top-k search.

The virtual key set has ``half_n**2`` rows; row ``i1 * half_n + i2`` is the
concatenation ``K1[i1] ++ K2[i2]``.  Because the score of a concatenated key
splits into the two half scores, an exact top-k over all rows only needs the
top-k of each half table followed by a ``k x k`` candidate grid.

Ordering everywhere is score descending, ties broken by ascending flat index.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .tensor import DimensionError, Tensor, dtype_of

NORM_EPS = 1e-6
BRUTE_FORCE_LIMIT = 2 ** 20


class ConfigError(ValueError):
    pass


class OracleGuardError(RuntimeError):
    """The brute-force oracle was asked to materialize too many keys."""


@dataclass
class ScoreCounter:
    half_macs: int = 0
    combine_adds: int = 0
    queries: int = 0

    @property
    def total(self) -> int:
        return self.half_macs + self.combine_adds

    def reset(self):
        self.half_macs = self.combine_adds = self.queries = 0


@dataclass
class TopkResult:
    indices: np.ndarray
    scores: np.ndarray

    def __eq__(self, other):
        return (isinstance(other, TopkResult)
                and np.array_equal(self.indices, other.indices)
                and np.array_equal(self.scores, other.scores))


@dataclass(eq=False)
class PkIndex:
    K1: Tensor
    K2: Tensor
    qk_norm: bool = False
    counter: ScoreCounter = field(default_factory=ScoreCounter)
    # writers (optimizer steps) hold this; lookups are read-only
    update_lock: threading.Lock = field(default_factory=threading.Lock)

    def __post_init__(self):
        if self.K1.shape != self.K2.shape or self.K1.data.ndim != 2:
            raise DimensionError("K1 and K2 must be matrices of identical shape")

    @property
    def half_n(self) -> int:
        return self.K1.shape[0]

    @property
    def half_dim(self) -> int:
        return self.K1.shape[1]

    @property
    def key_dim(self) -> int:
        return 2 * self.half_dim

    @property
    def num_keys(self) -> int:
        return self.half_n ** 2

    def param_count(self) -> int:
        return self.K1.size + self.K2.size

    def half_tables(self) -> tuple[np.ndarray, np.ndarray]:
        """Key tables as used for scoring (L2-normalized rows under qk_norm)."""
        if self.qk_norm:
            return l2_normalize(self.K1.data)[0], l2_normalize(self.K2.data)[0]
        return self.K1.data, self.K2.data


def init_pk_index(half_n: int, key_dim: int, rng: np.random.Generator, qk_norm: bool = False,
                  precision="standard") -> PkIndex:
    if key_dim % 2:
        raise DimensionError("key_dim must be even")
    half_dim = key_dim // 2
    bound = 1.0 / np.sqrt(half_dim)
    dt = dtype_of(precision)
    k1 = rng.uniform(-bound, bound, size=(half_n, half_dim)).astype(dt)
    k2 = rng.uniform(-bound, bound, size=(half_n, half_dim)).astype(dt)
    return PkIndex(Tensor(k1, requires_grad=True, precision=dt), Tensor(k2, requires_grad=True, precision=dt),
                   qk_norm=qk_norm)


def l2_normalize(x: np.ndarray, eps: float = NORM_EPS) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise ``x / sqrt(|x|^2 + eps)``; also returns the row norms."""
    r = np.sqrt((x * x).sum(axis=-1, keepdims=True) + eps)
    return x / r, r


def l2_normalize_backward(g: np.ndarray, u: np.ndarray, r: np.ndarray) -> np.ndarray:
    return (g - u * (g * u).sum(axis=-1, keepdims=True)) / r


def _half_scores(K: np.ndarray, q: np.ndarray) -> np.ndarray:
    # row-wise reduction: each row's sum is independent of how many rows K has
    return (K * q).sum(axis=-1)


def _rank(scores: np.ndarray, flat: np.ndarray, k: int) -> np.ndarray:
    order = np.lexsort((flat, -scores), axis=-1)
    return order[..., :k]


def split_query(q) -> tuple[np.ndarray, np.ndarray]:
    q = np.asarray(getattr(q, "data", q))
    n = q.shape[-1]
    if n % 2:
        raise DimensionError(f"query dimension {n} is odd")
    return q[..., : n // 2], q[..., n // 2:]


def tie_margin(s1: np.ndarray, s2: np.ndarray) -> np.ndarray:
    """Half-score slack under which two candidates may still tie after the add.

    Float addition is only weakly monotone: a strictly larger half score can
    round to the same full score and then lose the index tie-break.  Any
    half score more than two ulps of ``max|s1| + max|s2|`` below the k-th is
    safe to drop.
    """
    bound = np.abs(s1).max(axis=-1) + np.abs(s2).max(axis=-1)
    return 2 * np.spacing(bound.astype(s1.dtype))


def half_topk(K_half, q_half, k: int, counter: ScoreCounter | None = None, margin: float = 0.0):
    """Top-k inner products of ``q_half`` against the rows of ``K_half``.

    With ``margin > 0`` every row within ``margin`` of the k-th score is kept
    too, so the result may hold more than ``k`` candidates.
    """
    K = np.asarray(getattr(K_half, "data", K_half))
    q = np.asarray(getattr(q_half, "data", q_half))
    if k > K.shape[0]:
        raise ConfigError(f"k={k} exceeds half-key count {K.shape[0]}")
    if k < 1:
        raise ConfigError("k must be positive")
    s = _half_scores(K, q)
    if counter is not None:
        counter.half_macs += K.size
    return _candidates(s, k, margin)


def _candidates(s: np.ndarray, k: int, margin) -> tuple[np.ndarray, np.ndarray]:
    order = _rank(s, np.arange(s.shape[0]), s.shape[0])
    if not margin:
        # exact ties at the k-th score lose to lower indices in the grid too
        return order[:k], s[order[:k]]
    kth = s[order[k - 1]]
    m = max(k, int(np.count_nonzero(s >= kth - margin)))
    idx = order[:m]
    return idx, s[idx]


def combine_topk(I1, s1, I2, s2, k: int, half_n: int, counter: ScoreCounter | None = None) -> TopkResult:
    I1, I2 = np.asarray(I1), np.asarray(I2)
    s1, s2 = np.asarray(s1), np.asarray(s2)
    if len(I1) != len(s1) or len(I2) != len(s2):
        raise ConfigError("candidate indices and scores differ in length")
    grid = (s1[:, None] + s2[None, :]).reshape(-1)
    flat = (I1[:, None] * half_n + I2[None, :]).reshape(-1)
    if counter is not None:
        counter.combine_adds += grid.size
    if k > grid.size:
        raise ConfigError(f"k={k} exceeds candidate grid of {grid.size}")
    order = _rank(grid, flat, k)
    return TopkResult(flat[order], grid[order])


def topk(index: PkIndex, q, k: int) -> TopkResult:
    """Exact top-k over the virtual product key set for a single query."""
    q = np.asarray(getattr(q, "data", q))
    if q.shape != (index.key_dim,):
        raise DimensionError(f"query shape {q.shape} != ({index.key_dim},)")
    if not 1 <= k <= index.half_n:
        raise ConfigError(f"k={k} must be in [1, {index.half_n}]")
    q1, q2 = split_query(q)
    K1, K2 = index.half_tables()
    if index.qk_norm:
        q1, q2 = l2_normalize(q1)[0], l2_normalize(q2)[0]
    c = index.counter
    c.queries += 1
    S1, S2 = _half_scores(K1, q1), _half_scores(K2, q2)
    c.half_macs += K1.size + K2.size
    margin = tie_margin(S1, S2)
    I1, s1 = _candidates(S1, k, margin)
    I2, s2 = _candidates(S2, k, margin)
    return combine_topk(I1, s1, I2, s2, k, index.half_n, c)


@dataclass
class BatchTopk:
    """Batched lookup result plus the intermediates the memory layer needs."""

    indices: np.ndarray  # [T, k] flat
    scores: np.ndarray  # [T, k]
    i1: np.ndarray
    i2: np.ndarray
    q1: np.ndarray  # scored query halves (normalized under qk_norm)
    q2: np.ndarray
    q1_norm: np.ndarray | None = None
    q2_norm: np.ndarray | None = None


def topk_batch(index: PkIndex, Q: np.ndarray, k: int, tables=None) -> BatchTopk:
    """Vectorized top-k for queries ``Q[T, key_dim]``.

    Same ordering rules as :func:`topk`; half scores come from a matmul, so
    scores agree with the single-query path to rounding only.
    """
    if Q.ndim != 2 or Q.shape[1] != index.key_dim:
        raise DimensionError(f"queries {Q.shape} do not match key_dim {index.key_dim}")
    half_n = index.half_n
    if not 1 <= k <= half_n:
        raise ConfigError(f"k={k} must be in [1, {half_n}]")
    q1, q2 = split_query(Q)
    r1 = r2 = None
    if index.qk_norm:
        q1, r1 = l2_normalize(q1)
        q2, r2 = l2_normalize(q2)
    K1, K2 = tables if tables is not None else index.half_tables()
    S1 = q1 @ K1.T
    S2 = q2 @ K2.T
    T = Q.shape[0]
    index.counter.half_macs += T * (K1.size + K2.size)
    index.counter.combine_adds += T * k * k
    index.counter.queries += T

    ar = np.broadcast_to(np.arange(half_n), S1.shape)
    O1 = _rank(S1, ar, half_n)
    O2 = _rank(S2, ar, half_n)
    margin = tie_margin(S1, S2)[:, None]
    kth1 = np.take_along_axis(S1, O1[:, k - 1: k], axis=1)
    kth2 = np.take_along_axis(S2, O2[:, k - 1: k], axis=1)
    # widest near-tie set over the batch; extra candidates never change the answer
    m1 = max(k, int((S1 >= kth1 - margin).sum(axis=1).max()))
    m2 = max(k, int((S2 >= kth2 - margin).sum(axis=1).max()))
    J1, J2 = O1[:, :m1], O2[:, :m2]
    index.counter.combine_adds += T * (m1 * m2 - k * k)
    s1 = np.take_along_axis(S1, J1, axis=1)
    s2 = np.take_along_axis(S2, J2, axis=1)
    grid = (s1[:, :, None] + s2[:, None, :]).reshape(T, m1 * m2)
    flat = (J1[:, :, None] * half_n + J2[:, None, :]).reshape(T, m1 * m2)
    order = _rank(grid, flat, k)
    idx = np.take_along_axis(flat, order, axis=1)
    sc = np.take_along_axis(grid, order, axis=1)
    return BatchTopk(idx, sc, idx // half_n, idx % half_n, q1, q2, r1, r2)


def materialize_keys(index: PkIndex) -> np.ndarray:
    """All ``half_n**2`` full keys; oracle use only."""
    h = index.half_n
    if h * h > BRUTE_FORCE_LIMIT:
        raise OracleGuardError(f"refusing to materialize {h * h} keys")
    K1, K2 = index.half_tables()
    return np.concatenate([np.repeat(K1, h, axis=0), np.tile(K2, (h, 1))], axis=1)


def brute_force_topk(index: PkIndex, q, k: int) -> TopkResult:
    """Reference top-k: builds every full key, scores all of them, sorts all."""
    q = np.asarray(getattr(q, "data", q))
    keys = materialize_keys(index)
    q1, q2 = split_query(q)
    if index.qk_norm:
        q1, q2 = l2_normalize(q1)[0], l2_normalize(q2)[0]
    hd = index.half_dim
    # per-half accumulation keeps the float rounding identical to the factored path
    scores = _half_scores(keys[:, :hd], q1) + _half_scores(keys[:, hd:], q2)
    flat = np.arange(keys.shape[0])
    order = np.lexsort((flat, -scores))[:k]
    return TopkResult(flat[order], scores[order])
