"""Sweeps one configuration axis with everything else held at the base config."""

from __future__ import annotations

import csv
import dataclasses
import time
from dataclasses import dataclass

from .config import ConfigError, TrainConfig, scale_placement
from .data import gen_facts
from .loop import run, setup

AXES = ("placement", "num_memory_layers", "key_dim", "v_dim", "memory_size")
CSV_FIELDS = ["axis", "value", "seed", "steps", "train_nll", "eval_nll", "recall", "memory_params",
              "dense_params", "flops_per_token", "elapsed_s"]


@dataclass
class AblationRow:
    axis: str
    value: str
    seed: int
    steps: int
    train_nll: float
    eval_nll: float
    recall: float
    memory_params: int
    dense_params: int
    flops_per_token: float
    elapsed_s: float

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def _fmt(value) -> str:
    if isinstance(value, (list, tuple)):
        return "-".join(str(v) for v in value) or "none"
    return str(value)


def apply_axis(base: TrainConfig, axis: str, value) -> TrainConfig:
    """Config for one point of the sweep.

    ``v_dim`` keeps ``num_values * v_dim`` fixed by adjusting ``half_n`` and
    mapping values back to the model width through ``value_proj``; this needs
    the ungated layer.  ``num_memory_layers`` places the shared pool in the
    last ``value`` layers.
    """
    if axis == "placement":
        return base.replace(memory_placement=[int(i) for i in value])
    if axis == "num_memory_layers":
        count = int(value)
        if not 0 <= count <= base.depth:
            raise ConfigError(f"num_memory_layers: {count} outside [0, {base.depth}]")
        return base.replace(memory_placement=list(range(base.depth - count, base.depth)))
    if axis == "key_dim":
        return base.replace(key_dim=int(value))
    if axis == "memory_size":
        half = int(round(int(value) ** 0.5))
        if half * half != int(value):
            raise ConfigError(f"memory_size: {value} is not a perfect square")
        return base.replace(half_n=half)
    if axis == "v_dim":
        total = base.half_n ** 2 * base.v_dim
        v_dim = int(value)
        rows = total // v_dim
        half = int(round(rows ** 0.5))
        if half * half * v_dim != total:
            raise ConfigError(f"v_dim: {v_dim} does not divide {total} into a square table")
        return base.replace(v_dim=v_dim, half_n=half, use_swilu=False, k=min(base.k, half))
    raise ConfigError(f"unknown axis {axis!r}; choose from {', '.join(AXES)}")


def ablate(axis: str, values: list, base: TrainConfig, seeds: list[int] | None = None,
           progress=None) -> list[AblationRow]:
    """Train one model per (value, seed); every value shares the seed's data and init stream."""
    if axis not in AXES:
        raise ConfigError(f"unknown axis {axis!r}; choose from {', '.join(AXES)}")
    seeds = [base.seed] if seeds is None else seeds
    configs = [(v, apply_axis(base, axis, v)) for v in values]
    for _, c in configs:
        c.validate()
    rows = []
    for seed in seeds:
        data = gen_facts(base.num_facts, base.vocab, seed, base.num_relations, base.eval_size,
                         base.num_subjects)
        for value, cfg in configs:
            cfg = cfg.replace(seed=seed, data_seed=seed)
            t0 = time.perf_counter()
            st = setup(cfg, data)
            log = run(st)
            final = log.final()
            counts = st.model.param_counts()
            row = AblationRow(axis, _fmt(value), seed, st.opt.step, final["train_loss"], final["eval_nll"],
                              final["recall"], counts["memory"], counts["dense"],
                              st.model.flops_per_token(data.inputs[:16]), time.perf_counter() - t0)
            rows.append(row)
            if progress is not None:
                progress(row)
    return rows


def write_ablation_csv(rows: list[AblationRow], path, header: str | None = None):
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        for r in rows:
            d = r.as_dict()
            for k in ("train_nll", "eval_nll", "recall", "flops_per_token", "elapsed_s"):
                d[k] = f"{d[k]:.6g}"
            w.writerow(d)


def is_non_decreasing(rows: list[AblationRow], key: str = "recall") -> dict[int, bool]:
    """Per seed, whether ``key`` never drops as the sweep value grows (rows in sweep order)."""
    out = {}
    for seed in sorted({r.seed for r in rows}):
        vals = [getattr(r, key) for r in rows if r.seed == seed]
        out[seed] = all(b >= a for a, b in zip(vals, vals[1:]))
    return out


__all__ = ["AXES", "AblationRow", "ablate", "apply_axis", "write_ablation_csv", "is_non_decreasing",
           "scale_placement"]
