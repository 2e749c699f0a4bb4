"""Run configuration, serialized as one flat JSON object."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab: int = 512
    dim: int = 64
    depth: int = 4
    heads: int = 4
    ffn_hidden: int = 64
    seq_len: int = 3
    memory_placement: list = field(default_factory=list)
    half_n: int = 64
    v_dim: int = 96
    k: int = 8
    key_dim: int = 64
    use_swilu: bool = True
    qk_norm: bool = False
    seed: int = 0
    precision: str = "standard"
    bag_strategy: str = "reverse_indices"
    workers: int = 1

    def validate(self):
        if len(set(self.memory_placement)) != len(self.memory_placement):
            raise ConfigError("memory_placement: duplicate layer index")
        for i in self.memory_placement:
            if not isinstance(i, int) or not 0 <= i < self.depth:
                raise ConfigError(f"memory_placement: layer {i!r} outside [0, {self.depth})")
        if self.dim % self.heads:
            raise ConfigError("heads: must divide dim")
        if self.key_dim % 2:
            raise ConfigError("key_dim: must be even (two sub-keys)")
        if self.memory_placement and not 1 <= self.k <= self.half_n:
            raise ConfigError(f"k: must be in [1, half_n={self.half_n}]")
        if self.precision not in ("standard", "wide"):
            raise ConfigError("precision: 'standard' or 'wide'")

    @property
    def num_values(self) -> int:
        return self.half_n ** 2


@dataclass
class TrainConfig(ModelConfig):
    steps: int = 3000
    batch_size: int = 64
    lr: float = 3e-3
    memory_lr_mult: float = 1.0
    warmup: int = 100
    min_lr_ratio: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    num_facts: int = 1000
    num_relations: int = 16
    num_subjects: int = 0  # 0: every entity token can be a subject
    data_seed: int = 0
    eval_interval: int = 100
    eval_size: int = 0  # 0: evaluate on every fact
    recall_threshold: float = 0.9
    deterministic: bool = True

    def model_config(self) -> ModelConfig:
        names = {f.name for f in fields(ModelConfig)}
        return ModelConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def validate(self):
        super().validate()
        if self.steps < 0 or self.batch_size < 1 or self.eval_interval < 1:
            raise ConfigError("steps/batch_size/eval_interval: must be positive")
        if self.num_facts < 1:
            raise ConfigError("num_facts: must be positive")


_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _check_type(name, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"field {name!r}: expected {type(default).__name__}, got {value!r}")
    return value


def config_from_dict(d: dict, base: TrainConfig | None = None) -> TrainConfig:
    base = TrainConfig() if base is None else base
    known = {f.name for f in fields(TrainConfig)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown field(s): {', '.join(unknown)}")
    changes = {k: _check_type(k, v, getattr(base, k)) for k, v in d.items()}
    cfg = dataclasses.replace(base, **changes)
    cfg.validate()
    return cfg


def load_config(path) -> TrainConfig:
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    try:
        return config_from_dict(raw)
    except ConfigError as exc:
        line = _line_of(text, str(exc))
        raise ConfigError(f"{path}{f': line {line}' if line else ''}: {exc}") from None


def _line_of(text: str, message: str) -> int | None:
    # best effort: locate the offending key in the source
    if message.startswith("unknown field(s): "):
        names = message.split(": ", 1)[1].split(", ")
    else:
        names = [n for n in _TYPES if f"'{n}'" in message or message.startswith(f"{n}:")]
    for name in names:
        for i, line in enumerate(text.splitlines(), 1):
            if f'"{name}"' in line:
                return i
    return None


def save_config(cfg: TrainConfig, path):
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def scale_placement(placement: list[int], from_depth: int, to_depth: int) -> list[int]:
    """Map layer indices of a deep model onto a shallower one, keeping order."""
    out = []
    for i in placement:
        j = min(to_depth - 1, int(round(i * to_depth / from_depth)))
        if out and j <= out[-1]:
            j = out[-1] + 1
        out.append(j)
    if out and out[-1] >= to_depth:
        raise ConfigError("placement does not fit the target depth")
    return out


PRESETS = ("recall_speed", "memory_size")


def load_preset(name: str) -> TrainConfig:
    """Shipped configs: ``recall_speed`` (1k facts, paired dense/memory) and ``memory_size`` (16k facts)."""
    from importlib import resources
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    text = resources.files("pkmem").joinpath("configs", f"{name}.json").read_text()
    return config_from_dict(json.loads(text))
