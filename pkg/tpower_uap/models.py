"""Dataclasses partagées entre attaques, évaluation et orchestrateur."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from .numerics import SparsityPattern
from .validation import AttackConfig


@dataclass(eq=False)
class Perturbation:
    """Perturbation universelle ε (forme d'une image) et sa provenance.

    `method` vaut "tpower", "sv", "sgd_layer_max", "sgd" ou "random".
    """

    eps: np.ndarray
    pattern: SparsityPattern
    support: tuple[int, ...]
    config: AttackConfig
    source_model_id: str
    objective_trace: list[float] = field(default_factory=list)
    method: str = "tpower"

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.eps.shape)

    @property
    def flat(self) -> np.ndarray:
        return self.eps.reshape(-1)

    @property
    def n_active_blocks(self) -> int:
        return len(self.support)


@dataclass
class EvalReport:
    fooling_rate: float
    attack_success_rate: Optional[float]
    damaged_pixel_fraction: float
    clean_accuracy: float
    attacked_accuracy: float
    n_samples: int
    config_hash: str
    magnitude: float = 1.0
    split: Optional[str] = None

    def to_dict(self) -> dict[str, Any]:
        """Clés stables du document JSON."""
        return {
            "fooling_rate": self.fooling_rate,
            "attack_success_rate": self.attack_success_rate,
            "damaged_pixel_fraction": self.damaged_pixel_fraction,
            "clean_accuracy": self.clean_accuracy,
            "attacked_accuracy": self.attacked_accuracy,
            "n_samples": self.n_samples,
            "config_hash": self.config_hash,
            "magnitude": self.magnitude,
            "split": self.split,
        }


@dataclass
class GridPoint:
    layer: str
    q: float
    patch_size: int
    top_k: int
    layer_index: int
    depth_ratio: float
    val_fr: Optional[float] = None
    error: Optional[str] = None
    perturbation: Optional[Perturbation] = field(default=None, repr=False)

    @property
    def ok(self) -> bool:
        return self.error is None

    def row(self) -> dict[str, Any]:
        return {
            "layer": self.layer,
            "q": self.q,
            "patch_size": self.patch_size,
            "top_k": self.top_k,
            "val_fr": self.val_fr,
            "layer_index": self.layer_index,
            "depth_ratio": self.depth_ratio,
            "error": self.error,
        }


@dataclass
class GridSearchResult:
    best_config: AttackConfig
    best_point: GridPoint
    points: list[GridPoint]


@dataclass
class TrainingSummary:
    model_id: str
    train_accuracy: float
    val_accuracy: Optional[float]
    train_loss: float
    initial_train_loss: float
    epochs: int
    n_train: int
