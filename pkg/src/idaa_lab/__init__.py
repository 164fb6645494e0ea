"""Transferable targeted adversarial attacks on a from-scratch gradient engine."""

from .attack import AttackConfig, AttackOutcome, AttackTask, MIConfig, run_dim_mode, run_idaa, run_mi_baseline
from .data import Dataset, load_idx, synth_dataset
from .mixup import MixupConfig, RegionSpec, local_mixup, mix_once
from .models import ModelSpec, ModelWeights, classify, load_weights, predict, save_weights, train

__version__ = "0.1.0"

__all__ = [
    "AttackConfig",
    "AttackOutcome",
    "AttackTask",
    "Dataset",
    "MIConfig",
    "MixupConfig",
    "ModelSpec",
    "ModelWeights",
    "RegionSpec",
    "classify",
    "load_idx",
    "load_weights",
    "local_mixup",
    "mix_once",
    "predict",
    "run_dim_mode",
    "run_idaa",
    "run_mi_baseline",
    "save_weights",
    "synth_dataset",
    "train",
]
