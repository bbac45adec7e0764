"""Jeux de données étiquetés: génération synthétique, découpage et manifest.

Un dataset sur disque est un dossier contenant `manifest.json` et un TensorFile
par échantillon dans `samples/`.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, EmptyDataError, FormatError, ShapeError, StorageError
from .tensorfile import read_tensor, write_tensor

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Échantillons HWC dans [0, 1], étiquettes entières et tags de split."""

    samples: np.ndarray
    labels: np.ndarray
    splits: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        samples = np.asarray(self.samples, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if samples.shape[0] != labels.shape[0]:
            raise ShapeError(f"{samples.shape[0]} échantillons pour {labels.shape[0]} étiquettes")
        if samples.size and (samples.min() < 0.0 or samples.max() > 1.0):
            raise DataError("Les valeurs des pixels doivent être dans [0, 1]")
        splits = self.splits
        if splits is None:
            splits = np.full(labels.shape[0], "train", dtype=object)
        splits = np.asarray(splits, dtype=object).reshape(-1)
        if splits.shape[0] != labels.shape[0]:
            raise ShapeError("Un tag de split par échantillon est requis")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "splits", splits)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.samples.shape[1:])

    def split(self, tag: str) -> LabeledDataset:
        """Sous-ensemble d'un split, ordre d'origine conservé."""
        mask = self.splits == tag
        return LabeledDataset(self.samples[mask], self.labels[mask], self.splits[mask])

    def head(self, n: int) -> LabeledDataset:
        """Les n premiers échantillons (borné à la taille du dataset)."""
        n = min(int(n), len(self))
        return LabeledDataset(self.samples[:n], self.labels[:n], self.splits[:n])


def assign_splits(n: int, train_size: int = 256, val_fraction: float = 0.1, seed: int = 0) -> np.ndarray:
    """Tire les tags train/val/test: `train_size` en train, une fraction en val, le reste en test."""
    if n <= 0:
        raise EmptyDataError("assign_splits: aucun échantillon")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_train = min(int(train_size), n)
    n_val = min(int(round(val_fraction * n)), n - n_train)
    tags = np.full(n, "test", dtype=object)
    tags[order[:n_train]] = "train"
    tags[order[n_train : n_train + n_val]] = "val"
    return tags


def grating_image(
    class_index: int,
    num_classes: int,
    size: int,
    channels: int,
    rng: np.random.Generator,
    noise: float = 0.05,
) -> np.ndarray:
    """Texture paramétrique d'une classe: réseau sinusoïdal orienté selon la classe.

    Phase, fréquence et teinte sont tirées aléatoirement; seule l'orientation
    porte l'information de classe.
    """
    theta = np.pi * class_index / num_classes
    freq = rng.uniform(3.0, 4.0)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    yy, xx = np.mgrid[0:size, 0:size] / size
    wave = 0.5 + 0.35 * np.sin(2.0 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    tint = rng.uniform(0.6, 1.0, size=channels)
    img = wave[:, :, None] * tint[None, None, :] + rng.normal(0.0, noise, size=(size, size, channels))
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(
    num_classes: int,
    image_size: int,
    channels: int,
    samples_per_class: int,
    seed: int,
    noise: float = 0.05,
    train_size: int = 256,
    val_fraction: float = 0.1,
) -> LabeledDataset:
    """Dataset synthétique déterministe: même graine, mêmes octets."""
    if samples_per_class <= 0:
        raise EmptyDataError("samples_per_class doit être > 0")
    if num_classes < 2:
        raise DataError("Au moins deux classes sont nécessaires")
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for c in range(num_classes):
        for _ in range(samples_per_class):
            images.append(grating_image(c, num_classes, image_size, channels, rng, noise))
            labels.append(c)
    samples = np.stack(images)
    labels_arr = np.asarray(labels, dtype=np.int64)
    # Mélange pour que l'ordre des fichiers ne suive pas les classes
    order = rng.permutation(len(labels_arr))
    samples, labels_arr = samples[order], labels_arr[order]
    splits = assign_splits(len(labels_arr), train_size, val_fraction, seed=seed + 1)
    return LabeledDataset(samples, labels_arr, splits)


def save_dataset(dataset: LabeledDataset, output_dir: Path, num_classes: int | None = None) -> Path:
    """Écrit un TensorFile par échantillon et le manifest; retourne le chemin du manifest."""
    output_dir = Path(output_dir)
    sample_dir = output_dir / "samples"
    try:
        sample_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise StorageError(f"Dossier de sortie non inscriptible: {output_dir}", {"reason": str(e)}) from e

    entries = []
    for i in range(len(dataset)):
        rel = f"samples/{i:05d}.tnsr"
        write_tensor(output_dir / rel, dataset.samples[i])
        entries.append({"file": rel, "label": int(dataset.labels[i]), "split": str(dataset.splits[i])})

    manifest = {
        "format_version": MANIFEST_VERSION,
        "num_classes": int(num_classes if num_classes is not None else dataset.labels.max() + 1),
        "shape": list(dataset.sample_shape),
        "samples": entries,
    }
    manifest_path = output_dir / MANIFEST_NAME
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    logger.info("Dataset écrit -> %s (%d échantillons)", output_dir, len(dataset))
    return manifest_path


def load_dataset(dataset_dir: Path) -> tuple[LabeledDataset, int]:
    """Relit un dataset (synthétique ou fourni par l'utilisateur); retourne (dataset, num_classes)."""
    dataset_dir = Path(dataset_dir)
    manifest_path = dataset_dir / MANIFEST_NAME
    if not manifest_path.is_file():
        raise StorageError(f"Manifest introuvable: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"Manifest illisible: {e}") from e
    entries = manifest.get("samples", [])
    if not entries:
        raise EmptyDataError(f"Dataset vide: {dataset_dir}")

    shape = tuple(manifest["shape"])
    samples = np.empty((len(entries), *shape))
    for i, entry in enumerate(entries):
        tensor = read_tensor(dataset_dir / entry["file"])
        if tensor.shape != shape:
            raise ShapeError(f"{entry['file']}: forme {tensor.shape}, attendu {shape}")
        samples[i] = tensor
    labels = np.asarray([e["label"] for e in entries], dtype=np.int64)
    splits = np.asarray([e.get("split", "train") for e in entries], dtype=object)
    return LabeledDataset(samples, labels, splits), int(manifest["num_classes"])
