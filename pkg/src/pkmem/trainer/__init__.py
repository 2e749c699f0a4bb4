"""Toy language-model training on synthetic facts, dense and memory-augmented."""

from .ablate import AXES, ablate, apply_axis, write_ablation_csv
from .config import ConfigError, ModelConfig, TrainConfig, config_from_dict, load_config, save_config
from .data import FactDataset, gen_facts
from .loop import MetricsLog, NumericAbort, evaluate, load_checkpoint, run, save_checkpoint, setup, train
from .model import Model, build_model, dense_baseline
from .optim import OptimizerState, SparseRowAdam, make_optimizer, sparse_adam_update

__all__ = [
    "AXES", "ablate", "apply_axis", "write_ablation_csv",
    "ConfigError", "ModelConfig", "TrainConfig", "config_from_dict", "load_config", "save_config",
    "FactDataset", "gen_facts",
    "MetricsLog", "NumericAbort", "evaluate", "load_checkpoint", "run", "save_checkpoint", "setup", "train",
    "Model", "build_model", "dense_baseline",
    "OptimizerState", "SparseRowAdam", "make_optimizer", "sparse_adam_update",
]
