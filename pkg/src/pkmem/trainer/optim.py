"""Adam for dense parameters plus lazy row-wise Adam for the value table."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..embedding_bag import SparseGrad
from ..tensor import Tensor


def lr_at(step: int, base_lr: float, warmup: int, total: int, min_ratio: float = 0.1) -> float:
    """Linear warmup then cosine decay to ``min_ratio * base_lr``; ``step`` is 1-based."""
    if warmup > 0 and step <= warmup:
        return base_lr * step / warmup
    if total <= warmup:
        return base_lr
    t = min(1.0, (step - warmup) / max(1, total - warmup))
    return base_lr * (min_ratio + (1 - min_ratio) * 0.5 * (1 + math.cos(math.pi * t)))


@dataclass
class AdamHyper:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 0.0


class DenseAdam:
    def __init__(self, params: list[Tensor], hyper: AdamHyper):
        self.params = params
        self.h = hyper
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, lrs: list[float], grads: list[np.ndarray | None], decay: list[bool]):
        self.t += 1
        b1, b2 = self.h.beta1, self.h.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, m, v, g, lr, wd in zip(self.params, self.m, self.v, grads, lrs, decay):
            if g is None:
                g = np.zeros_like(p.data)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if wd and self.h.weight_decay:
                p.data *= 1 - lr * self.h.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.h.eps)


class SparseRowAdam:
    """Adam over the rows of a large table, touching only rows with gradient.

    Moment rows are allocated the first time a row receives a gradient and
    carry their own step counter for bias correction; untouched rows and their
    state are never modified.
    """

    def __init__(self, table: Tensor, hyper: AdamHyper):
        self.table = table
        self.h = hyper
        n_rows, dim = table.shape
        self.slot = np.full(n_rows, -1, dtype=np.int64)
        self.m = np.zeros((0, dim), dtype=table.dtype)
        self.v = np.zeros((0, dim), dtype=table.dtype)
        self.steps = np.zeros(0, dtype=np.int64)
        self.allocated = 0

    def _ensure(self, rows: np.ndarray) -> np.ndarray:
        new = rows[self.slot[rows] < 0]
        if len(new):
            need = self.allocated + len(new)
            if need > len(self.steps):
                cap = max(need, 2 * len(self.steps), 64)
                for name in ("m", "v"):
                    old = getattr(self, name)
                    grown = np.zeros((cap, old.shape[1]), dtype=old.dtype)
                    grown[: self.allocated] = old[: self.allocated]
                    setattr(self, name, grown)
                steps = np.zeros(cap, dtype=np.int64)
                steps[: self.allocated] = self.steps[: self.allocated]
                self.steps = steps
            self.slot[new] = np.arange(self.allocated, need)
            self.allocated = need
        return self.slot[rows]

    def step(self, lr: float, grad: SparseGrad | None):
        if grad is None or len(grad.rows) == 0:
            return
        grad.check()
        s = self._ensure(grad.rows)
        b1, b2 = self.h.beta1, self.h.beta2
        g = grad.grads.astype(self.table.dtype, copy=False)
        self.steps[s] += 1
        t = self.steps[s][:, None].astype(np.float64)
        m = self.m[s] * b1 + (1 - b1) * g
        v = self.v[s] * b2 + (1 - b2) * g * g
        self.m[s], self.v[s] = m, v
        c1 = (1 - b1 ** t).astype(self.table.dtype)
        c2 = (1 - b2 ** t).astype(self.table.dtype)
        upd = lr * (m / c1) / (np.sqrt(v / c2) + self.h.eps)
        self.table.data[grad.rows] -= upd.astype(self.table.dtype)

    def touched_rows(self) -> np.ndarray:
        return np.flatnonzero(self.slot >= 0)

    def state_dict(self) -> dict:
        a = self.allocated
        return {"slot": self.slot.copy(), "m": self.m[:a].copy(), "v": self.v[:a].copy(),
                "steps": self.steps[:a].copy()}

    def load_state_dict(self, d: dict):
        self.slot = d["slot"].copy()
        self.m, self.v, self.steps = d["m"].copy(), d["v"].copy(), d["steps"].copy()
        self.allocated = len(self.steps)


@dataclass
class OptimizerState:
    dense: DenseAdam
    values: SparseRowAdam | None
    base_lr: float
    warmup: int
    total_steps: int
    min_lr_ratio: float = 0.1
    memory_lr_mult: float = 1.0
    grad_clip: float | None = 1.0
    memory_params: set = field(default_factory=set)
    no_decay: set = field(default_factory=set)
    step: int = 0
    last_grad_norm: float = 0.0

    def lr(self) -> float:
        return lr_at(self.step, self.base_lr, self.warmup, self.total_steps, self.min_lr_ratio)


def make_optimizer(model, cfg) -> OptimizerState:
    hyper = AdamHyper(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    dense_params = model.dense_parameters()
    mem_dense = []
    if model.pool is not None:
        mem_dense = [model.pool.index.K1, model.pool.index.K2]
    values = SparseRowAdam(model.pool.V, hyper) if model.pool is not None else None
    no_decay = {id(t) for t in dense_params if t.data.ndim == 1}
    return OptimizerState(DenseAdam(dense_params + mem_dense, hyper), values, cfg.lr, cfg.warmup, cfg.steps,
                          cfg.min_lr_ratio, cfg.memory_lr_mult, cfg.grad_clip,
                          memory_params={id(t) for t in mem_dense}, no_decay=no_decay)


def global_grad_norm(dense_grads: list[np.ndarray | None], sparse: SparseGrad | None) -> float:
    total = sum(float((g.astype(np.float64) ** 2).sum()) for g in dense_grads if g is not None)
    if sparse is not None:
        total += float((sparse.grads.astype(np.float64) ** 2).sum())
    return math.sqrt(total)


def sparse_adam_update(state: OptimizerState, sparse: SparseGrad | None,
                       dense_grads: list[np.ndarray | None]) -> OptimizerState:
    """One optimizer step: clip by global norm, dense Adam, lazy row Adam.

    ``memory_lr_mult`` scales the value-row learning rate only; the keys move
    with the dense rate because fast keys reshuffle the top-k and undo what
    the values have learned.
    """
    state.step += 1
    norm = global_grad_norm(dense_grads, sparse)
    state.last_grad_norm = norm
    scale = 1.0
    if state.grad_clip and norm > state.grad_clip:
        scale = state.grad_clip / (norm + 1e-6)
    if scale != 1.0:
        dense_grads = [None if g is None else g * g.dtype.type(scale) for g in dense_grads]
        sparse = None if sparse is None else sparse.scaled(scale)
    lr = state.lr()
    mem_lr = lr * state.memory_lr_mult
    params = state.dense.params
    lrs = [lr] * len(params)
    decay = [id(p) not in state.memory_params and id(p) not in state.no_decay for p in params]
    state.dense.step(lrs, dense_grads, decay)
    if state.values is not None:
        state.values.step(mem_lr, sparse)
    return state
