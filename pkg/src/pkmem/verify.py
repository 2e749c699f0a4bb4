"""Verification suites: each compares a fast path against a slow reference."""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np

from . import embedding_bag as eb
from .memory_layer import make_layer, make_pool
from .pk_index import TopkResult, brute_force_topk, init_pk_index, topk
from .sharded_memory import MemoryGroup, unsharded_reference
from .tensor import Tensor, finite_diff_check


# -- product-key exactness ---------------------------------------------------

@dataclass
class TopkMismatch:
    half_n: int
    k: int
    seed: int
    query: np.ndarray
    expected: TopkResult
    actual: TopkResult

    def describe(self) -> str:
        return (f"half_n={self.half_n} k={self.k} seed={self.seed}\n"
                f"  query    {np.array2string(self.query, precision=6)}\n"
                f"  expected {self.expected.indices.tolist()} {self.expected.scores.tolist()}\n"
                f"  actual   {self.actual.indices.tolist()} {self.actual.scores.tolist()}")


@dataclass
class TopkReport:
    cases: int = 0
    queries: int = 0
    mismatches: list = field(default_factory=list)
    elapsed_s: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.mismatches


def _topk_case(half_n: int, k: int, seed: int, key_dim: int, queries: int):
    """Index and queries for one seed; every fourth seed uses a coarse grid so scores tie."""
    rng = np.random.default_rng([half_n, k, seed])
    index = init_pk_index(half_n, key_dim, rng, qk_norm=seed % 2 == 1)
    Q = rng.standard_normal((queries, key_dim)).astype(np.float32)
    if seed % 4 == 3:
        index.K1.data[...] = np.round(index.K1.data * 4) / 4
        index.K2.data[...] = np.round(index.K2.data * 4) / 4
        Q = np.round(Q)
    return index, Q


def verify_topk(half_ns=(4, 16, 64), ks=(1, 4, 16), seeds=range(200), key_dim: int = 16,
                queries: int = 4, inject_fault: bool = False, max_report: int = 10) -> TopkReport:
    """Product-key top-k against the materialized brute force, indices and scores.

    ``k > half_n`` pairs are skipped since a half table cannot supply them.
    ``inject_fault`` perturbs one score of the fast path per case so the
    harness can prove it detects a mismatch.
    """
    rep = TopkReport()
    t0 = time.perf_counter()
    for half_n in half_ns:
        for k in ks:
            if k > half_n:
                continue
            for seed in seeds:
                index, Q = _topk_case(half_n, k, seed, key_dim, queries)
                rep.cases += 1
                for q in Q:
                    rep.queries += 1
                    got = topk(index, q, k)
                    if inject_fault:
                        got = TopkResult(got.indices.copy(), got.scores.copy())
                        got.scores[0] = np.nextafter(got.scores[0], np.float32(np.inf))
                    want = brute_force_topk(index, q, k)
                    if got != want:
                        if len(rep.mismatches) < max_report:
                            rep.mismatches.append(TopkMismatch(half_n, k, seed, q, want, got))
                        else:
                            rep.mismatches.append(None)
                        break
    rep.elapsed_s = time.perf_counter() - t0
    return rep


# -- gradient fidelity -------------------------------------------------------

GRAD_STEP = 3e-5
GRAD_TOL = 1e-4
MODEL_GRAD_TOL = 1e-3


def _readout(out: Tensor, rng) -> Tensor:
    w = Tensor(rng.standard_normal(out.shape))
    return (out * w).mean()


def _layer_case(seed: int, use_swilu: bool, layers: int):
    rng = np.random.default_rng(seed)
    n, v_dim = 8, 6
    pool = make_pool(4, n, v_dim, rng, qk_norm=seed % 2 == 1, precision="wide")
    mods = [make_layer(pool, 3, n, rng, use_swilu=use_swilu, precision="wide") for _ in range(layers)]
    x = Tensor(rng.standard_normal((5, n)), requires_grad=True, precision="wide")
    wts_rng = np.random.default_rng(seed + 10_000)
    wts = Tensor(wts_rng.standard_normal((5, n)))

    def f():
        h = x
        for m in mods:
            h = h + m(h)
        return (h * wts).mean()

    params = [x, pool.index.K1, pool.index.K2, pool.V]
    for m in mods:
        params.extend(m.parameters())
    return f, params


def _model_case(seed: int):
    from .trainer.config import ModelConfig
    from .trainer.model import build_model
    cfg = ModelConfig(vocab=24, dim=8, depth=2, heads=2, ffn_hidden=8, seq_len=3, memory_placement=[1],
                      half_n=4, v_dim=12, k=3, key_dim=8, seed=seed, precision="wide")
    model = build_model(cfg)
    rng = np.random.default_rng(seed + 1)
    tokens = rng.integers(0, cfg.vocab, size=(4, 3))
    targets = rng.integers(0, cfg.vocab, size=4)
    return (lambda: model.loss(tokens, targets)), model.parameters()


@dataclass
class GradReport:
    errors: dict  # case -> worst relative error over seeds
    tolerances: dict
    elapsed_s: float

    @property
    def ok(self) -> bool:
        return all(self.errors[c] < self.tolerances[c] for c in self.errors)


GRAD_CASES = {
    "memory": lambda s: _layer_case(s, use_swilu=False, layers=1),
    "memory_plus": lambda s: _layer_case(s, use_swilu=True, layers=1),
    "shared_pool_2_layers": lambda s: _layer_case(s, use_swilu=True, layers=2),
    "toy_model": _model_case,
}


def verify_gradients(seeds=range(5), h: float = GRAD_STEP, max_coords: int | None = 40) -> GradReport:
    """Wide-precision central differences for each layer arrangement.

    The objective is a random linear readout averaged over outputs; the mean
    keeps the loss small enough that structurally zero gradients stay under
    the finite-difference noise floor.
    """
    t0 = time.perf_counter()
    errors, tols = {}, {}
    for name, build in GRAD_CASES.items():
        worst = 0.0
        for s in seeds:
            f, params = build(int(s))
            err = finite_diff_check(f, params, h=h, max_coords=max_coords, rng=np.random.default_rng(s))
            worst = max(worst, err)
        errors[name] = worst
        tols[name] = MODEL_GRAD_TOL if name == "toy_model" else GRAD_TOL
    return GradReport(errors, tols, time.perf_counter() - t0)


# -- backward strategies -----------------------------------------------------

@dataclass
class StrategyCase:
    profile: str
    precision: str
    workers: int
    reverse_exact: bool
    atomics_rel: float
    lock_rel: float


@dataclass
class StrategyReport:
    cases: list
    tolerance: dict
    elapsed_s: float

    @property
    def ok(self) -> bool:
        return all(c.reverse_exact and c.atomics_rel < self.tolerance[c.precision]
                   and c.lock_rel < self.tolerance[c.precision] for c in self.cases)


def relative_error(got: eb.SparseGrad, want: eb.SparseGrad) -> float:
    """Largest elementwise deviation relative to the largest reference entry."""
    if not np.array_equal(got.rows, want.rows):
        return float("inf")
    scale = float(np.abs(want.grads).max()) if want.grads.size else 0.0
    diff = float(np.abs(got.grads.astype(np.float64) - want.grads).max()) if want.grads.size else 0.0
    return diff / scale if scale else diff


def strategy_profiles(B: int, k: int, N_v: int, n: int, dtype, seed: int):
    rng = np.random.default_rng(seed)
    out = {}
    for c in (0.0, 0.5, 1.0):
        out[f"collision_{int(c * 100)}"] = eb.collision_batch(B, k, N_v, c, rng, n, dtype)
    z = eb.zipf_batch(B, k, N_v, rng)
    out["zipf"] = eb.BagBatch(z.indices, z.weights.astype(dtype), n)
    return out


def verify_strategies(workers=(1, 2, 8), B: int = 256, k: int = 8, N_v: int = 4096, n: int = 64,
                      seed: int = 0) -> StrategyReport:
    t0 = time.perf_counter()
    tol = {"standard": 1e-5, "wide": 1e-10}
    cases = []
    for precision, dtype in (("standard", np.float32), ("wide", np.float64)):
        for profile, batch in strategy_profiles(B, k, N_v, n, dtype, seed).items():
            g = np.random.default_rng(seed + 1).standard_normal((B, n)).astype(dtype)
            oracle = eb.sequential_backward(g, batch)
            for w in workers:
                rev = eb.backward_reverse_indices(g, batch, None, w)
                cases.append(StrategyCase(profile, precision, w, rev.equals(oracle),
                                          relative_error(eb.backward_atomics(g, batch, w), oracle),
                                          relative_error(eb.backward_lock(g, batch, w), oracle)))
    return StrategyReport(cases, tol, time.perf_counter() - t0)


# -- sharding ----------------------------------------------------------------

@dataclass
class ShardCase:
    G: int
    forward_exact: bool
    backward_exact: bool
    accounting: dict
    expected_phase3_bytes: int
    mismatch: str = ""

    @property
    def ok(self) -> bool:
        phase3 = self.accounting["phase_bytes"].get("partial_embedding", 0)
        phase3_ok = phase3 == self.expected_phase3_bytes if self.G > 1 else self.accounting["messages"] == 0
        return (self.forward_exact and self.backward_exact and phase3_ok
                and not self.accounting["full_output_materialized"])


def _first_diff(a: np.ndarray, b: np.ndarray) -> str:
    bad = np.argwhere(a != b)
    if not len(bad):
        return ""
    r, c = bad[0]
    return f"row {r} dim {c}: {a[r, c]!r} != {b[r, c]!r}"


def verify_sharding(Gs=(1, 2, 4, 8), N_v: int = 1024, n: int = 64, k: int = 8, batch_per_worker: int = 32,
                    seed: int = 0, zero_slice: bool = True) -> list[ShardCase]:
    """Sharded forward and backward against one unsharded table, bit for bit.

    With ``zero_slice`` one worker's gradient is zero on the first dim slice so
    the header-only message path is exercised.
    """
    out = []
    for G in Gs:
        rng = np.random.default_rng([seed, G])
        V = rng.standard_normal((N_v, n)).astype(np.float32)
        batches = [eb.uniform_batch(batch_per_worker, k, N_v, rng, n) for _ in range(G)]
        grads = [rng.standard_normal((b.B, n)).astype(np.float32) for b in batches]
        if zero_slice and G > 1:
            grads[0][:, : n // G] = 0
        group = MemoryGroup(V, G)
        outs = group.bag(batches)
        acc = group.accounting.to_json()
        ref_outs, gathered = unsharded_reference(V, batches)
        fwd = all(np.array_equal(a, b) for a, b in zip(outs, ref_outs))
        mismatch = "" if fwd else next(_first_diff(a, b) for a, b in zip(outs, ref_outs) if not np.array_equal(a, b))
        parts = group.backward(grads)
        ref = eb.sequential_backward(np.concatenate(grads), gathered)
        bwd = all(p.equals(ref.dim_slice(lo, hi)) for p, (lo, hi) in zip(parts, group.bounds))
        if not bwd and not mismatch:
            mismatch = "backward slice differs"
        acc["phase_bytes"] = dict(group.accounting.phase_bytes)
        rows = sum(b.B for b in batches)
        out.append(ShardCase(G, fwd, bwd, acc, rows * n * V.itemsize, mismatch))
    return out


# -- FLOP and parameter accounting -------------------------------------------

@dataclass
class AccountingReport:
    dense_flops: float
    memory_flops: float
    dense_params: dict
    memory_params: dict
    pool_params: int
    shared_pool_params: dict  # layer count -> memory param count

    @property
    def flop_gap(self) -> float:
        return abs(self.memory_flops - self.dense_flops) / self.dense_flops

    @property
    def ok(self) -> bool:
        counts = set(self.shared_pool_params.values())
        return (self.flop_gap < 0.05
                and self.memory_params["total"] - self.dense_params["total"] == self.pool_params
                and len(counts) == 1)


def check_accounting(cfg) -> AccountingReport:
    """FLOPs per token and parameter counts of ``cfg`` against its dense twin."""
    from .trainer.model import build_model, dense_baseline
    tokens = np.random.default_rng(0).integers(0, cfg.vocab, size=(8, cfg.seq_len))
    mem = build_model(cfg)
    dense = build_model(dense_baseline(cfg))
    pool = mem.pool.param_count() if mem.pool is not None else 0
    shared = {}
    for layers in (1, 3):
        if layers <= cfg.depth:
            placement = list(range(cfg.depth - layers, cfg.depth))
            shared[layers] = build_model(dataclasses.replace(cfg, memory_placement=placement)).param_counts()["memory"]
    return AccountingReport(dense.flops_per_token(tokens), mem.flops_per_token(tokens), dense.param_counts(),
                            mem.param_counts(), pool, shared)
