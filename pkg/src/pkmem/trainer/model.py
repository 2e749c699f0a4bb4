"""Desk-scale pre-norm transformer whose FFN slots may hold memory layers."""

from __future__ import annotations

import numpy as np

from ..memory_layer import MemoryLayer, MemoryPool, make_layer, make_pool
from ..tensor import (Tensor, count_flops, cross_entropy, dtype_of, embedding, matmul, no_grad,
                      rms_norm, silu, softmax)
from .config import ModelConfig

MASK_VALUE = -1e9
POS_SCALE = 0.02


def _param(rng, shape, scale, precision):
    return Tensor(rng.normal(0.0, scale, size=shape).astype(dtype_of(precision)), requires_grad=True,
                  precision=precision)


def _ones(n, precision):
    return Tensor(np.ones(n, dtype=dtype_of(precision)), requires_grad=True, precision=precision)


class SwiGLU:
    def __init__(self, n, hidden, rng, precision):
        self.W_gate = _param(rng, (n, hidden), n ** -0.5, precision)
        self.W_up = _param(rng, (n, hidden), n ** -0.5, precision)
        self.W_down = _param(rng, (hidden, n), hidden ** -0.5, precision)

    def __call__(self, x):
        return matmul(silu(matmul(x, self.W_gate)) * matmul(x, self.W_up), self.W_down)

    def parameters(self):
        return [self.W_gate, self.W_up, self.W_down]


class Attention:
    def __init__(self, n, heads, rng, precision):
        self.heads = heads
        self.Wq, self.Wk, self.Wv, self.Wo = (_param(rng, (n, n), n ** -0.5, precision) for _ in range(4))

    def __call__(self, x):
        B, T, n = x.shape
        H, dh = self.heads, n // self.heads

        def split(t):
            return t.reshape(B, T, H, dh).transpose(0, 2, 1, 3)

        q, k, v = split(x @ self.Wq), split(x @ self.Wk), split(x @ self.Wv)
        mask = np.triu(np.full((T, T), MASK_VALUE, dtype=x.dtype), 1)
        att = softmax((q @ k.transpose(0, 1, 3, 2)) * (dh ** -0.5) + mask)
        out = (att @ v).transpose(0, 2, 1, 3).reshape(B, T, n)
        return out @ self.Wo

    def parameters(self):
        return [self.Wq, self.Wk, self.Wv, self.Wo]


class Block:
    def __init__(self, cfg: ModelConfig, rng, mixer):
        self.attn_norm = _ones(cfg.dim, cfg.precision)
        self.attn = Attention(cfg.dim, cfg.heads, rng, cfg.precision)
        self.ffn_norm = _ones(cfg.dim, cfg.precision)
        self.mixer = mixer  # SwiGLU or MemoryLayer

    @property
    def is_memory(self) -> bool:
        return isinstance(self.mixer, MemoryLayer)

    def __call__(self, x):
        x = x + self.attn(rms_norm(x, self.attn_norm))
        return x + self.mixer(rms_norm(x, self.ffn_norm))

    def parameters(self):
        return [self.attn_norm, self.ffn_norm, *self.attn.parameters(), *self.mixer.parameters()]


class Model:
    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        p = cfg.precision
        self.tok_emb = _param(rng, (cfg.vocab, cfg.dim), 1.0, p)
        self.pos_emb = _param(rng, (cfg.seq_len, cfg.dim), POS_SCALE, p)
        self.pool: MemoryPool | None = None
        if cfg.memory_placement:
            self.pool = make_pool(cfg.half_n, cfg.key_dim, cfg.v_dim, rng, qk_norm=cfg.qk_norm, precision=p)
        self.blocks = []
        for i in range(cfg.depth):
            if i in cfg.memory_placement:
                mixer = make_layer(self.pool, cfg.k, cfg.dim, rng, use_swilu=cfg.use_swilu,
                                   strategy=cfg.bag_strategy, workers=cfg.workers, precision=p)
            else:
                mixer = SwiGLU(cfg.dim, cfg.ffn_hidden, rng, p)
            self.blocks.append(Block(cfg, rng, mixer))
        self.final_norm = _ones(cfg.dim, p)
        self.lm_head = _param(rng, (cfg.dim, cfg.vocab), cfg.dim ** -0.5, p)

    # -- parameters
    def dense_parameters(self) -> list[Tensor]:
        out = [self.tok_emb, self.pos_emb, self.final_norm, self.lm_head]
        for b in self.blocks:
            out.extend(b.parameters())
        return out

    def memory_parameters(self) -> list[Tensor]:
        return self.pool.parameters() if self.pool is not None else []

    def parameters(self) -> list[Tensor]:
        return self.dense_parameters() + self.memory_parameters()

    def param_counts(self) -> dict:
        dense = sum(t.size for t in self.dense_parameters())
        memory = self.pool.param_count() if self.pool is not None else 0
        return {"dense": dense, "memory": memory, "total": dense + memory}

    def memory_layers(self) -> list[MemoryLayer]:
        return [b.mixer for b in self.blocks if b.is_memory]

    def zero_grad(self):
        for t in self.parameters():
            t.zero_grad()

    # -- compute
    def hidden(self, tokens: np.ndarray) -> Tensor:
        tokens = np.asarray(tokens)
        B, T = tokens.shape
        if T > self.cfg.seq_len:
            raise ValueError(f"sequence length {T} exceeds {self.cfg.seq_len}")
        x = embedding(self.tok_emb, tokens) + self.pos_emb[:T]
        for b in self.blocks:
            x = b(x)
        return x

    def __call__(self, tokens: np.ndarray) -> Tensor:
        """Logits for the token that follows each sequence, ``[B, vocab]``."""
        x = self.hidden(tokens)
        last = x[:, -1, :]
        return rms_norm(last, self.final_norm) @ self.lm_head

    def loss(self, tokens, targets) -> Tensor:
        return cross_entropy(self(tokens), targets)

    def flops_per_token(self, tokens: np.ndarray) -> float:
        with no_grad(), count_flops() as c:
            self(tokens)
        return c.total / np.asarray(tokens).size


def build_model(cfg: ModelConfig) -> Model:
    return Model(cfg)


def dense_baseline(cfg: ModelConfig) -> ModelConfig:
    """Same model with every memory slot restored to an FFN."""
    import dataclasses
    return dataclasses.replace(cfg, memory_placement=[])
