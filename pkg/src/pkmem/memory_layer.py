"""Product-key memory layer, gated Memory+ block and shared memory pools.

Per token ``x``::

    I = top-k indices of K q          (q = x, or x @ query_proj)
    s = softmax(scores of I)
    y = s V_I
    out = (y * silu(x W1)) W2          Memory+ (use_swilu)
    out = y  or  y @ value_proj        vanilla Memory

Top-k selection is treated as piecewise constant: gradients reach the keys
only through the scores of the selected indices.  The value-table gradient is
a :class:`~pkmem.embedding_bag.SparseGrad` produced by one of the bag backward
strategies and accumulated on ``pool.V.sparse_grad``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import embedding_bag as eb
from .pk_index import PkIndex, TopkResult, init_pk_index, l2_normalize, l2_normalize_backward, topk_batch
from .tensor import (DimensionError, Tensor, _softmax_np, add_flops, dtype_of, silu_grad_np,
                     silu_np)


class StateError(RuntimeError):
    pass


@dataclass(eq=False)
class MemoryPool:
    """Keys and values shared by every attached layer."""

    index: PkIndex
    V: Tensor
    ref_count: int = 0
    rows_touched: int = 0

    def __post_init__(self):
        if self.V.shape[0] != self.index.half_n ** 2:
            raise DimensionError(f"value table has {self.V.shape[0]} rows, expected {self.index.half_n ** 2}")

    @property
    def num_values(self) -> int:
        return self.V.shape[0]

    @property
    def v_dim(self) -> int:
        return self.V.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.index.K1, self.index.K2, self.V]

    def param_count(self) -> int:
        return self.index.param_count() + self.V.size

    def accumulate_value_grad(self, sg: eb.SparseGrad):
        V = self.V
        V.sparse_grad = sg if V.sparse_grad is None else V.sparse_grad.merge(sg)


def make_pool(half_n: int, key_dim: int, v_dim: int, rng: np.random.Generator, qk_norm: bool = False,
              precision="standard") -> MemoryPool:
    index = init_pk_index(half_n, key_dim, rng, qk_norm=qk_norm, precision=precision)
    bound = 1.0 / np.sqrt(key_dim // 2)
    values = rng.uniform(-bound, bound, size=(half_n * half_n, v_dim)).astype(dtype_of(precision))
    return MemoryPool(index, Tensor(values, requires_grad=True, precision=precision))


def _uniform(rng, fan_in, fan_out, precision) -> Tensor:
    b = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-b, b, size=(fan_in, fan_out)).astype(dtype_of(precision)),
                  requires_grad=True, precision=precision)


def memory_flops(tokens: int, n: int, key_dim: int, half_n: int, k: int, v_dim: int, use_swilu: bool,
                 query_proj: bool = False, value_proj: bool = False, qk_norm: bool = False) -> int:
    """FLOPs of one memory-layer forward over ``tokens`` queries.

    Per token: half-key scoring ``2*half_n*key_dim`` (a multiply-add is two
    FLOPs), ``k*k`` candidate adds, softmax ``4k``, bag ``2*k*v_dim`` and the
    dense projections.  Index selection is comparisons only and not counted.
    """
    per = 2 * half_n * key_dim + k * k + 4 * k + 2 * k * v_dim
    if query_proj:
        per += 2 * n * key_dim
    if qk_norm:
        per += 3 * key_dim
    if use_swilu:
        per += 2 * n * v_dim + 4 * v_dim + v_dim + 2 * v_dim * n
    elif value_proj:
        per += 2 * v_dim * n
    fixed = 3 * 2 * half_n * (key_dim // 2) if qk_norm else 0
    return tokens * per + fixed


@dataclass
class MemoryGrads:
    x: np.ndarray
    K1: np.ndarray
    K2: np.ndarray
    V: eb.SparseGrad
    W1: np.ndarray | None = None
    W2: np.ndarray | None = None
    value_proj: np.ndarray | None = None
    query_proj: np.ndarray | None = None


@dataclass(eq=False)
class MemoryLayer:
    pool: MemoryPool
    k: int
    n: int
    use_swilu: bool = True
    W1: Tensor | None = None
    W2: Tensor | None = None
    value_proj: Tensor | None = None
    query_proj: Tensor | None = None
    strategy: str = "reverse_indices"
    workers: int = 1
    _cache: dict | None = field(default=None, repr=False)

    def __post_init__(self):
        if not 1 <= self.k <= self.pool.index.half_n:
            raise ValueError(f"k={self.k} must be in [1, half_n={self.pool.index.half_n}]")
        if self.use_swilu and (self.W1 is None or self.W2 is None):
            raise ValueError("Memory+ needs W1 and W2")
        if self.query_proj is None and self.pool.index.key_dim != self.n:
            raise DimensionError("key_dim differs from model dim but no query projection given")
        if not self.use_swilu and self.value_proj is None and self.pool.v_dim != self.n:
            raise DimensionError("v_dim differs from model dim but no value projection given")

    @property
    def v_dim(self) -> int:
        return self.pool.v_dim

    def parameters(self) -> list[Tensor]:
        """Per-layer dense parameters (the pool is not included)."""
        return [p for p in (self.W1, self.W2, self.value_proj, self.query_proj) if p is not None]

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def flops(self, tokens: int) -> int:
        idx = self.pool.index
        return memory_flops(tokens, self.n, idx.key_dim, idx.half_n, self.k, self.v_dim, self.use_swilu,
                            self.query_proj is not None, self.value_proj is not None, idx.qk_norm)

    # -- forward / backward on raw arrays
    def lookup(self, X: np.ndarray):
        """Top-k, softmax weights and ``y`` for queries ``X[T, n]``."""
        pool, idx = self.pool, self.pool.index
        if X.ndim != 2 or X.shape[1] != self.n:
            raise DimensionError(f"input {X.shape} does not match model dim {self.n}")
        Q = X @ self.query_proj.data if self.query_proj is not None else X
        if idx.qk_norm:
            K1n, rk1 = l2_normalize(idx.K1.data)
            K2n, rk2 = l2_normalize(idx.K2.data)
        else:
            K1n, K2n, rk1, rk2 = idx.K1.data, idx.K2.data, None, None
        res = topk_batch(idx, Q, self.k, tables=(K1n, K2n))
        w = _softmax_np(res.scores)
        batch = eb.BagBatch(res.indices, w, self.v_dim)
        y = eb.bag_forward(pool.V.data, batch, self.workers)
        pool.rows_touched += res.indices.size
        cache = dict(X=X, Q=Q, res=res, w=w, batch=batch, y=y, K1n=K1n, K2n=K2n, rk1=rk1, rk2=rk2)
        return y, res, cache

    def forward(self, X: np.ndarray) -> np.ndarray:
        single = X.ndim == 1
        X2 = X[None, :] if single else X
        y, _, cache = self.lookup(X2)
        if self.use_swilu:
            P = X2 @ self.W1.data
            G = silu_np(P)
            H = y * G
            out = H @ self.W2.data
            cache.update(P=P, G=G, H=H)
        elif self.value_proj is not None:
            out = y @ self.value_proj.data
        else:
            out = y.copy()
        add_flops("memory", self.flops(X2.shape[0]))
        cache["single"] = single
        self._cache = cache
        return out[0] if single else out

    def backward(self, grad_output: np.ndarray, cache: dict | None = None) -> MemoryGrads:
        cache = self._cache if cache is None else cache
        if cache is None:
            raise StateError("backward called before forward")
        idx = self.pool.index
        Gout = grad_output[None, :] if cache["single"] else grad_output
        X, y, w, res, batch = cache["X"], cache["y"], cache["w"], cache["res"], cache["batch"]
        grads = MemoryGrads(x=np.zeros_like(X), K1=None, K2=None, V=None)
        if self.use_swilu:
            H, G, P = cache["H"], cache["G"], cache["P"]
            grads.W2 = H.T @ Gout
            gH = Gout @ self.W2.data.T
            gY = gH * G
            gP = gH * y * silu_grad_np(P)
            grads.W1 = X.T @ gP
            grads.x += gP @ self.W1.data.T
        elif self.value_proj is not None:
            grads.value_proj = y.T @ Gout
            gY = Gout @ self.value_proj.data.T
        else:
            gY = Gout
        gY = np.ascontiguousarray(gY, dtype=y.dtype)

        grads.V = eb.backward(self.strategy, gY, batch, self.workers)
        Vsel = self.pool.V.data[res.indices]  # [T, k, v]
        gw = np.einsum("tkd,td->tk", Vsel, gY)
        gs = w * (gw - (w * gw).sum(axis=1, keepdims=True))

        K1n, K2n = cache["K1n"], cache["K2n"]
        gq1 = np.einsum("tk,tkd->td", gs, K1n[res.i1])
        gq2 = np.einsum("tk,tkd->td", gs, K2n[res.i2])
        gK1 = np.zeros_like(K1n)
        gK2 = np.zeros_like(K2n)
        np.add.at(gK1, res.i1.reshape(-1), (gs[:, :, None] * res.q1[:, None, :]).reshape(-1, K1n.shape[1]))
        np.add.at(gK2, res.i2.reshape(-1), (gs[:, :, None] * res.q2[:, None, :]).reshape(-1, K2n.shape[1]))
        if idx.qk_norm:
            gq1 = l2_normalize_backward(gq1, res.q1, res.q1_norm)
            gq2 = l2_normalize_backward(gq2, res.q2, res.q2_norm)
            gK1 = l2_normalize_backward(gK1, K1n, cache["rk1"])
            gK2 = l2_normalize_backward(gK2, K2n, cache["rk2"])
        grads.K1, grads.K2 = gK1, gK2
        gQ = np.concatenate([gq1, gq2], axis=1)
        if self.query_proj is not None:
            grads.query_proj = X.T @ gQ
            grads.x += gQ @ self.query_proj.data.T
        else:
            grads.x += gQ
        if cache["single"]:
            grads.x = grads.x[0]
        return grads

    # -- autograd integration
    def __call__(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        X = x.data.reshape(-1, self.n)
        out = self.forward(X)
        cache = self._cache
        idx = self.pool.index
        dense = self.parameters()
        inputs = (x, idx.K1, idx.K2, *dense)

        def backward(g):
            mg = self.backward(g.reshape(-1, self.n), cache)
            self.pool.accumulate_value_grad(mg.V)
            by_param = {id(self.W1): mg.W1, id(self.W2): mg.W2,
                        id(self.value_proj): mg.value_proj, id(self.query_proj): mg.query_proj}
            return (mg.x.reshape(x.shape), mg.K1, mg.K2, *[by_param[id(p)] for p in dense])

        return Tensor.from_op("memory", out.reshape(*lead, out.shape[-1]), inputs, backward)


def make_layer(pool: MemoryPool, k: int, n: int, rng: np.random.Generator, use_swilu: bool = True,
               strategy: str = "reverse_indices", workers: int = 1, precision=None) -> MemoryLayer:
    precision = pool.V.precision if precision is None else precision
    v_dim, key_dim = pool.v_dim, pool.index.key_dim
    W1 = W2 = vproj = qproj = None
    if use_swilu:
        W1 = _uniform(rng, n, v_dim, precision)
        W2 = _uniform(rng, v_dim, n, precision)
    elif v_dim != n:
        vproj = _uniform(rng, v_dim, n, precision)
    if key_dim != n:
        qproj = _uniform(rng, n, key_dim, precision)
    layer = MemoryLayer(pool, k, n, use_swilu, W1, W2, vproj, qproj, strategy, workers)
    pool.ref_count += 1
    return layer


def attach_layers(pool: MemoryPool, count: int, configs: list[dict] | dict | None = None,
                  rng: np.random.Generator | None = None) -> list[MemoryLayer]:
    """Create ``count`` layers that all reference ``pool``; each owns its gating weights."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(0) if rng is None else rng
    if configs is None:
        configs = {}
    if isinstance(configs, dict):
        configs = [configs] * count
    if len(configs) != count:
        raise ValueError("one config per layer required")
    return [make_layer(pool, rng=rng, **{"k": 8, "n": pool.index.key_dim, **cfg}) for cfg in configs]


def memory_lookup(layer: MemoryLayer, x) -> tuple[np.ndarray, TopkResult]:
    x = np.asarray(getattr(x, "data", x))
    if x.shape != (layer.n,):
        raise DimensionError(f"expected a single query of size {layer.n}")
    y, res, _ = layer.lookup(x[None, :])
    return y[0], TopkResult(res.indices[0], res.scores[0])


def memory_plus_forward(layer: MemoryLayer, x) -> np.ndarray:
    x = np.asarray(getattr(x, "data", x))
    return layer.forward(x)


def memory_backward(layer: MemoryLayer, grad_output) -> MemoryGrads:
    return layer.backward(np.asarray(getattr(grad_output, "data", grad_output)))


def pool_parameter_count(layers: list[MemoryLayer]) -> int:
    """Memory parameters of a set of layers; shared pools are counted once."""
    pools = {id(l.pool): l.pool for l in layers}
    return sum(p.param_count() for p in pools.values())
