"""Training configuration shared by the model and harness modules."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

__all__ = ["MODEL_KINDS", "TrainConfig"]

MODEL_KINDS = ("capsnet", "cnn", "mlp")


@dataclass
class TrainConfig:
    kind: str = "capsnet"
    epochs: int = 500
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dropout_keep: float = 0.5  # cnn head only
    l2_beta: float = 0.001  # cnn head only
    augment: bool = False
    augment_factor: int = 3
    seed: int = 0
    # float64 is the verifiable default; float32 trades precision for speed
    precision: str = "float64"
    early_stop_train_acc: Optional[float] = None

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"model kind must be one of {MODEL_KINDS}, got {self.kind!r}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")
        if not 0.0 < self.dropout_keep <= 1.0:
            raise ValueError(f"dropout_keep must be in (0, 1], got {self.dropout_keep}")
        if self.l2_beta < 0.0:
            raise ValueError(f"l2_beta must be non-negative, got {self.l2_beta}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64
