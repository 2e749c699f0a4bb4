"""Training loop, evaluation and checkpoints."""

from __future__ import annotations

import contextlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..tensor import NumericError, no_grad
from .config import TrainConfig
from .data import FactDataset, gen_facts
from .model import Model, build_model
from .optim import OptimizerState, make_optimizer, sparse_adam_update

log = logging.getLogger(__name__)
EVAL_CHUNK = 1024


class NumericAbort(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class MetricsLog:
    records: list = field(default_factory=list)

    def append(self, **rec):
        self.records.append(rec)

    @property
    def steps(self) -> list[int]:
        return [r["step"] for r in self.records]

    def column(self, name: str) -> list[float]:
        return [r[name] for r in self.records]

    def final(self) -> dict:
        return self.records[-1] if self.records else {}

    def steps_to_recall(self, threshold: float) -> float:
        """First logged step with recall >= threshold (``inf`` if never)."""
        for r in self.records:
            if r["recall"] >= threshold:
                return r["step"]
        return math.inf

    def write_jsonl(self, path, header: str | None = None):
        with open(path, "w") as fh:
            if header:
                fh.write(f"# {header}\n")
            for r in self.records:
                fh.write(json.dumps(r) + "\n")

    def write_csv(self, path, header: str | None = None):
        with open(path, "w") as fh:
            if header:
                fh.write(f"# {header}\n")
            fh.write("step,loss,eval_nll,recall\n")
            for r in self.records:
                fh.write(f"{r['step']},{r['train_loss']:.6f},{r['eval_nll']:.6f},{r['recall']:.6f}\n")

    @classmethod
    def read_jsonl(cls, path) -> "MetricsLog":
        recs = [json.loads(line) for line in Path(path).read_text().splitlines()
                if line.strip() and not line.startswith("#")]
        return cls(recs)


@contextlib.contextmanager
def single_thread(enabled: bool = True):
    """Pin BLAS to one thread so replays are bit-identical."""
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=1):
        yield


def evaluate(model: Model, data: FactDataset) -> tuple[float, float]:
    """Mean NLL of the object token and exact-match recall over the eval facts."""
    inputs = data.inputs[data.eval_idx]
    targets = data.objects[data.eval_idx]
    nll = 0.0
    hits = 0
    with no_grad():
        for a in range(0, len(targets), EVAL_CHUNK):
            logits = model(inputs[a: a + EVAL_CHUNK]).data.astype(np.float64)
            t = targets[a: a + EVAL_CHUNK]
            z = logits - logits.max(axis=1, keepdims=True)
            lse = np.log(np.exp(z).sum(axis=1))
            nll += float((lse - z[np.arange(len(t)), t]).sum())
            hits += int((logits.argmax(axis=1) == t).sum())
    return nll / len(targets), hits / len(targets)


@dataclass
class TrainState:
    model: Model
    data: FactDataset
    opt: OptimizerState
    rng: np.random.Generator
    log: MetricsLog
    cfg: TrainConfig
    running: list = field(default_factory=list)


def setup(cfg: TrainConfig, data: FactDataset | None = None) -> TrainState:
    cfg.validate()
    model = build_model(cfg.model_config())
    if data is None:
        data = gen_facts(cfg.num_facts, cfg.vocab, cfg.data_seed, cfg.num_relations, cfg.eval_size,
                         cfg.num_subjects)
    opt = make_optimizer(model, cfg)
    rng = np.random.default_rng([cfg.seed, 7919])
    return TrainState(model, data, opt, rng, MetricsLog(), cfg)


def train_step(st: TrainState) -> float:
    model, data = st.model, st.data
    idx = st.rng.integers(0, len(data), size=st.cfg.batch_size)
    model.zero_grad()
    loss = model.loss(data.inputs[idx], data.objects[idx])
    value = loss.item()
    if not math.isfinite(value):
        raise NumericAbort(f"non-finite loss at step {st.opt.step + 1}")
    loss.backward()
    dense = [p.grad for p in st.opt.dense.params]
    sparse = model.pool.V.sparse_grad if model.pool is not None else None
    sparse_adam_update(st.opt, sparse, dense)
    return value


def run(st: TrainState, steps: int | None = None, on_eval=None) -> MetricsLog:
    total = st.cfg.steps if steps is None else steps
    with single_thread(st.cfg.deterministic):
        while st.opt.step < total:
            try:
                st.running.append(train_step(st))
            except NumericError as exc:
                raise NumericAbort(f"step {st.opt.step + 1}: {exc}") from exc
            step = st.opt.step
            if step % st.cfg.eval_interval == 0 or step == total:
                eval_nll, recall = evaluate(st.model, st.data)
                rec = {"step": step, "train_loss": float(np.mean(st.running)), "eval_nll": eval_nll,
                       "recall": recall}
                st.log.append(**rec)
                st.running = []
                log.debug("step %d loss %.4f nll %.4f recall %.3f", step, rec["train_loss"], eval_nll, recall)
                if on_eval is not None and on_eval(st, rec):
                    break
    return st.log


def train(model: Model, dataset: FactDataset, steps: int, optimizer: OptimizerState | None = None,
          cfg: TrainConfig | None = None) -> MetricsLog:
    """Train ``model`` on ``dataset`` for ``steps`` optimizer steps."""
    cfg = TrainConfig(**{**(cfg or TrainConfig()).to_dict(), "steps": steps})
    opt = optimizer if optimizer is not None else make_optimizer(model, cfg)
    st = TrainState(model, dataset, opt, np.random.default_rng([cfg.seed, 7919]), MetricsLog(), cfg)
    return run(st, steps)


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(st: TrainState, path):
    arrays = {f"p{i}": p.data for i, p in enumerate(st.model.parameters())}
    for i, (m, v) in enumerate(zip(st.opt.dense.m, st.opt.dense.v)):
        arrays[f"m{i}"], arrays[f"v{i}"] = m, v
    if st.opt.values is not None:
        for k, a in st.opt.values.state_dict().items():
            arrays[f"sv_{k}"] = a
    meta = {"step": st.opt.step, "dense_t": st.opt.dense.t, "rng": st.rng.bit_generator.state,
            "running": st.running, "log": st.log.records, "config": st.cfg.to_dict()}
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path, cfg: TrainConfig | None = None) -> TrainState:
    z = np.load(path)
    meta = json.loads(z["meta"].tobytes().decode())
    if cfg is None:
        from .config import config_from_dict
        cfg = config_from_dict(meta["config"])
    st = setup(cfg)
    for i, p in enumerate(st.model.parameters()):
        p.data[...] = z[f"p{i}"]
    for i in range(len(st.opt.dense.m)):
        st.opt.dense.m[i][...] = z[f"m{i}"]
        st.opt.dense.v[i][...] = z[f"v{i}"]
    if st.opt.values is not None:
        st.opt.values.load_state_dict({k: z[f"sv_{k}"] for k in ("slot", "m", "v", "steps")})
    st.opt.step = meta["step"]
    st.opt.dense.t = meta["dense_t"]
    st.rng.bit_generator.state = meta["rng"]
    st.running = meta["running"]
    st.log = MetricsLog(meta["log"])
    return st
