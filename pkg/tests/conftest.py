"""Configuration pytest partagée pour tous les tests."""

import json
import logging
from pathlib import Path
from typing import Any

import numpy as np
import pytest

from tpower_uap.datasets import LabeledDataset, generate_synthetic, save_dataset
from tpower_uap.diffnet import Dense, Model, build_model

# Architecture couvrant toutes les sortes de couches
ALL_KINDS_SPEC = [
    {"kind": "conv2d", "filters": 3, "kernel_size": 3, "padding": 1},
    {"kind": "relu"},
    {"kind": "maxpool", "window": 2},
    {"kind": "conv2d", "filters": 4, "kernel_size": 2, "stride": 2},
    {"kind": "avgpool", "window": 2},
    {"kind": "flatten"},
    {"kind": "dense", "units": 3},
]


@pytest.fixture
def rng() -> np.random.Generator:
    """Générateur aléatoire à graine fixe."""
    return np.random.default_rng(1234)


@pytest.fixture
def conv_model() -> Model:
    """Petit réseau (8, 8, 2) utilisant toutes les sortes de couches."""
    return build_model(ALL_KINDS_SPEC, (8, 8, 2), 3, seed=7)


@pytest.fixture
def tiny_conv_model() -> Model:
    """Réseau convolutif à entrée de dimension 12 (matérialisable)."""
    spec = [
        {"kind": "conv2d", "filters": 2, "kernel_size": 2, "padding": 1},
        {"kind": "relu"},
        {"kind": "maxpool", "window": 2},
        {"kind": "flatten"},
        {"kind": "dense", "units": 2},
    ]
    return build_model(spec, (2, 3, 2), 2, seed=3)


def dense_model(weight: np.ndarray, bias: np.ndarray | None = None) -> Model:
    """Modèle à une couche dense (opérateur explicite W)."""
    weight = np.asarray(weight, dtype=np.float64)
    bias = np.zeros(weight.shape[0]) if bias is None else np.asarray(bias, dtype=np.float64)
    return Model((Dense(weight, bias),), (weight.shape[1],), weight.shape[0])


def matrix_with_spectrum(rng: np.random.Generator, m: int, n: int, spectrum: np.ndarray) -> np.ndarray:
    """Matrice m×n aléatoire de valeurs singulières données (ordre décroissant)."""
    u, _ = np.linalg.qr(rng.normal(size=(m, m)))
    v, _ = np.linalg.qr(rng.normal(size=(n, n)))
    r = len(spectrum)
    return u[:, :r] @ np.diag(spectrum) @ v[:, :r].T


@pytest.fixture
def tiny_dataset() -> LabeledDataset:
    """Dataset synthétique 2 classes × 4 échantillons, 8×8×1."""
    return generate_synthetic(2, 8, 1, 4, seed=0, train_size=4, val_fraction=0.25)


@pytest.fixture
def dataset_dir(tmp_path: Path) -> Path:
    """Dataset synthétique écrit sur disque (3 classes, 8×8×3)."""
    dataset = generate_synthetic(3, 8, 3, 12, seed=5, train_size=18, val_fraction=0.25)
    out = tmp_path / "data"
    save_dataset(dataset, out, num_classes=3)
    return out


@pytest.fixture
def write_config(tmp_path: Path):
    """Écrit un document de configuration JSON et retourne son chemin."""

    def _write(data: dict[str, Any], name: str = "config.json") -> Path:
        path = tmp_path / "configs" / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(data), encoding="utf-8")
        return path

    return _write


@pytest.fixture
def restore_root_logger():
    """setup_logging vide les handlers racine: on les remet après le test."""
    root = logging.getLogger()
    handlers, level = list(root.handlers), root.level
    yield root
    for handler in root.handlers:
        if handler not in handlers:
            handler.close()
    root.handlers[:] = handlers
    root.setLevel(level)
