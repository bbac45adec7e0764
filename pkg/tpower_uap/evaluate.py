"""Évaluation des perturbations: application, FR/ASR, dommages, défense par
filtre médian, transférabilité et recherche sur grille.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from typing import Any, Optional, Union

import numpy as np
from scipy import ndimage

from .attack import random_sparse_perturbation, top_k_for_budget, tpower_attack
from .datasets import LabeledDataset
from .diffnet import Model, layer_depth_ratio, predict_batch
from .errors import (
    AttackError,
    ChannelError,
    ConfigError,
    EmptyDataError,
    InvalidWindowError,
    ShapeError,
    UndefinedASRError,
    safe_call,
)
from .models import EvalReport, GridPoint, GridSearchResult, Perturbation
from .numerics import SparsityPattern
from .validation import AttackConfig

logger = logging.getLogger(__name__)

Samples = Union[LabeledDataset, np.ndarray]


def _samples_of(dataset: Samples) -> np.ndarray:
    samples = dataset.samples if isinstance(dataset, LabeledDataset) else np.asarray(dataset, dtype=np.float64)
    if samples.shape[0] == 0:
        raise EmptyDataError("Jeu d'évaluation vide")
    return samples


def apply_perturbation(x: np.ndarray, pert: Perturbation, xi: float) -> np.ndarray:
    """clamp(x + ξ·ε, 0, 1), pour un échantillon ou un batch."""
    x = np.asarray(x, dtype=np.float64)
    eps = pert.eps
    if x.shape[-eps.ndim :] != eps.shape or x.ndim not in (eps.ndim, eps.ndim + 1):
        raise ShapeError(f"Perturbation {eps.shape} incompatible avec l'entrée {x.shape}: adapter d'abord")
    return np.clip(x + xi * eps, 0.0, 1.0)


def _predictions(
    model: Model,
    samples: np.ndarray,
    pert: Perturbation,
    xi: float,
    batch_size: int,
    transform: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> tuple[np.ndarray, np.ndarray]:
    clean = predict_batch(model, samples, batch_size)
    attacked = apply_perturbation(samples, pert, xi)
    if transform is not None:
        attacked = transform(attacked)
    return clean, predict_batch(model, attacked, batch_size)


def fooling_rate(model: Model, dataset: Samples, pert: Perturbation, xi: float, batch_size: int = 256) -> float:
    """Fraction des échantillons dont la prédiction change; sans étiquettes."""
    samples = _samples_of(dataset)
    clean, attacked = _predictions(model, samples, pert, xi, batch_size)
    return int(np.count_nonzero(clean != attacked)) / len(clean)


def _asr(labels: np.ndarray, clean: np.ndarray, attacked: np.ndarray) -> float:
    correct = clean == labels
    n_correct = int(np.count_nonzero(correct))
    if n_correct == 0:
        raise UndefinedASRError("ASR indéfini: aucun échantillon correctement classé", {"n_samples": len(labels)})
    return int(np.count_nonzero(correct & (attacked != labels))) / n_correct


def attack_success_rate(
    model: Model, dataset: LabeledDataset, pert: Perturbation, xi: float, batch_size: int = 256
) -> float:
    """Parmi les échantillons bien classés sans attaque, fraction mal classée après attaque."""
    samples = _samples_of(dataset)
    clean, attacked = _predictions(model, samples, pert, xi, batch_size)
    return _asr(dataset.labels, clean, attacked)


def damaged_pixel_fraction(pert: Perturbation) -> float:
    """Positions spatiales avec au moins un canal non nul / (hauteur · largeur), mesuré sur ε."""
    eps = pert.eps
    if eps.ndim == 3:
        return float(np.mean(np.any(eps != 0.0, axis=2)))
    return float(np.mean(eps != 0.0))


def evaluate_perturbation(
    model: Model,
    dataset: LabeledDataset,
    pert: Perturbation,
    xi: float,
    split: Optional[str] = None,
    batch_size: int = 256,
    strict_asr: bool = True,
) -> EvalReport:
    """
    Rapport complet sur un split.

    Args:
        strict_asr: Si False, un ASR indéfini est rapporté comme None au lieu de lever

    Returns:
        EvalReport (FR, ASR, précisions propre/attaquée, dommages)
    """
    samples = _samples_of(dataset)
    labels = dataset.labels
    clean, attacked = _predictions(model, samples, pert, xi, batch_size)
    try:
        asr: Optional[float] = _asr(labels, clean, attacked)
    except UndefinedASRError:
        if strict_asr:
            raise
        asr = None
    report = EvalReport(
        fooling_rate=int(np.count_nonzero(clean != attacked)) / len(clean),
        attack_success_rate=asr,
        damaged_pixel_fraction=damaged_pixel_fraction(pert),
        clean_accuracy=float(np.mean(clean == labels)),
        attacked_accuracy=float(np.mean(attacked == labels)),
        n_samples=len(clean),
        config_hash=pert.config.config_hash(),
        magnitude=float(xi),
        split=split,
    )
    logger.info(
        "Évaluation %s: FR=%.4f, précision %.4f -> %.4f",
        split or "",
        report.fooling_rate,
        report.clean_accuracy,
        report.attacked_accuracy,
        extra={"fooling_rate": report.fooling_rate, "n_samples": report.n_samples},
    )
    return report


# Défense -----------------------------------------------------------------


def _check_window(window: Any) -> int:
    if isinstance(window, bool) or not isinstance(window, (int, np.integer)):
        raise InvalidWindowError(f"Fenêtre non entière: {window!r}")
    if window < 3 or window % 2 == 0:
        raise InvalidWindowError(f"La fenêtre doit être impaire et ≥ 3, reçu {window}")
    return int(window)


def median_filter(x: np.ndarray, window: int) -> np.ndarray:
    """Médiane glissante par canal, bords répliqués; accepte (H, W), (H, W, C) ou (N, H, W, C)."""
    window = _check_window(window)
    x = np.asarray(x, dtype=np.float64)
    sizes = {2: (window, window), 3: (window, window, 1), 4: (1, window, window, 1)}
    if x.ndim not in sizes:
        raise ShapeError(f"median_filter attend une image ou un batch d'images, reçu {x.shape}")
    return ndimage.median_filter(x, size=sizes[x.ndim], mode="nearest")


def median_defense(
    model: Model,
    dataset: LabeledDataset,
    pert: Perturbation,
    xi: float,
    windows: Sequence[int],
    batch_size: int = 256,
) -> dict[str, Any]:
    """
    FR et précisions après filtrage médian, pour chaque fenêtre.

    Le FR compare f(median(x + ξε)) à f(x) sur l'image propre non filtrée.
    La précision propre est celle de f(median(x)).
    """
    if not windows:
        raise InvalidWindowError("Liste de fenêtres vide")
    checked = [_check_window(w) for w in windows]
    samples = _samples_of(dataset)
    labels = dataset.labels
    clean, attacked = _predictions(model, samples, pert, xi, batch_size)
    rows = []
    for window in checked:
        filtered_clean = predict_batch(model, median_filter(samples, window), batch_size)
        _, filtered_attacked = _predictions(
            model, samples, pert, xi, batch_size, transform=lambda x, w=window: median_filter(x, w)
        )
        rows.append(
            {
                "window": window,
                "fooling_rate": int(np.count_nonzero(filtered_attacked != clean)) / len(clean),
                "clean_accuracy": float(np.mean(filtered_clean == labels)),
                "attacked_accuracy": float(np.mean(filtered_attacked == labels)),
            }
        )
        logger.info("Fenêtre %d: FR=%.4f", window, rows[-1]["fooling_rate"])
    ordered = sorted(rows, key=lambda r: r["window"])
    accuracies = [r["clean_accuracy"] for r in ordered]
    return {
        "unfiltered": {
            "fooling_rate": int(np.count_nonzero(clean != attacked)) / len(clean),
            "clean_accuracy": float(np.mean(clean == labels)),
            "attacked_accuracy": float(np.mean(attacked == labels)),
        },
        "windows": rows,
        # indicatif seulement: la précision propre n'est pas forcément monotone
        "clean_accuracy_non_increasing": all(a >= b for a, b in zip(accuracies, accuracies[1:])),
    }


# Transférabilité ------------------------------------------------------------


def _fit_axis(arr: np.ndarray, axis: int, target: int) -> np.ndarray:
    size = arr.shape[axis]
    if size > target:
        start = (size - target) // 2
        return np.take(arr, np.arange(start, start + target), axis=axis)
    if size < target:
        before = (target - size) // 2
        widths = [(0, 0)] * arr.ndim
        widths[axis] = (before, target - size - before)
        return np.pad(arr, widths)
    return arr


def adapt_perturbation(pert: Perturbation, target_shape: Sequence[int]) -> Perturbation:
    """Recadrage central ou zero-padding (pixel en plus en bas/à droite), axe par axe."""
    target_shape = tuple(int(s) for s in target_shape)
    eps = pert.eps
    if target_shape == eps.shape:
        return pert
    if eps.ndim != 3 or len(target_shape) != 3:
        raise ShapeError(f"Adaptation limitée aux images (H, W, C): {eps.shape} -> {target_shape}")
    if eps.shape[2] != target_shape[2]:
        raise ChannelError(
            f"Canaux incompatibles: {eps.shape[2]} -> {target_shape[2]}",
            {"source": list(eps.shape), "target": list(target_shape)},
        )
    adapted = _fit_axis(_fit_axis(eps, 0, target_shape[0]), 1, target_shape[1])
    patch_size = pert.pattern.descriptor[3] if pert.pattern.descriptor else 1
    pattern = SparsityPattern.grid(*target_shape, patch_size)
    return replace(pert, eps=adapted, pattern=pattern, support=pattern.support_of(adapted))


def transfer_matrix(
    perts: Mapping[str, Perturbation],
    models: Mapping[str, Model],
    dataset: Union[Samples, Mapping[str, Samples]],
    xi: float,
    batch_size: int = 256,
) -> dict[str, dict[str, float]]:
    """
    Matrice de FR: ligne = modèle source de la perturbation, colonne = victime.

    `dataset` est commun, ou indexé par nom de victime quand les formes d'entrée diffèrent.
    La diagonale est omise.
    """
    names = list(models)
    if len(names) < 2:
        raise ConfigError("transfer_matrix: au moins deux modèles sont nécessaires")
    matrix: dict[str, dict[str, float]] = {}
    for source in names:
        row: dict[str, float] = {}
        for victim in names:
            if victim == source:
                continue
            data = dataset[victim] if isinstance(dataset, Mapping) else dataset
            try:
                adapted = adapt_perturbation(perts[source], models[victim].input_shape)
            except ChannelError as e:
                raise ChannelError(f"{source} -> {victim}: {e.message}", {**e.details, "pair": [source, victim]}) from e
            row[victim] = fooling_rate(models[victim], data, adapted, xi, batch_size)
        matrix[source] = row
    return matrix


# Recherche sur grille -------------------------------------------------------


def _grid_points(
    model: Model,
    layers: Sequence[str],
    qs: Sequence[float],
    patch_sizes: Sequence[int],
    base_config: AttackConfig,
    damage_budget: Optional[float],
) -> list[GridPoint]:
    points = []
    for layer in layers:
        index = model.cut_index(layer)
        for q in qs:
            for patch_size in patch_sizes:
                if damage_budget is not None:
                    top_k = top_k_for_budget(model.input_shape, patch_size, damage_budget)
                else:
                    top_k = base_config.top_k
                points.append(
                    GridPoint(
                        layer=str(layer),
                        q=float(q),
                        patch_size=int(patch_size),
                        top_k=top_k,
                        layer_index=index,
                        depth_ratio=layer_depth_ratio(model, layer),
                    )
                )
    return points


def _point_config(base: AttackConfig, point: GridPoint) -> AttackConfig:
    return base.updated(layer=point.layer, q=point.q, patch_size=point.patch_size, top_k=point.top_k)


def grid_search(
    model: Model,
    train_batch: np.ndarray,
    val_set: Samples,
    layers: Sequence[str],
    qs: Sequence[float],
    patch_sizes: Sequence[int],
    base_config: AttackConfig,
    damage_budget: Optional[float] = None,
    max_workers: Optional[int] = None,
    batch_size: int = 256,
) -> GridSearchResult:
    """
    Entraîne une attaque par point de la grille {couche, q, patch_size} et garde le
    meilleur FR de validation.

    Les points tournent dans un pool de threads; les résultats sont fusionnés dans
    l'ordre de la grille. Un point en échec est enregistré avec son erreur.
    Égalités: couche la moins profonde, puis plus petit q, puis plus petit patch.
    """
    if not layers or not qs or not patch_sizes:
        raise ConfigError("Grille vide")
    points = _grid_points(model, layers, qs, patch_sizes, base_config, damage_budget)
    logger.info("Recherche sur grille: %d points", len(points))

    def run_point(point: GridPoint) -> GridPoint:
        config = _point_config(base_config, point)
        result = safe_call(tpower_attack, model, train_batch, config)
        if not result.success:
            logger.warning("Point %s/q=%s/ps=%d en échec: %s", point.layer, point.q, point.patch_size, result.error)
            return replace(point, error=str(getattr(result.error, "message", result.error)))
        pert = result.value
        val_fr = fooling_rate(model, val_set, pert, config.magnitude, batch_size)
        logger.debug("Point %s/q=%s/ps=%d: FR val %.4f", point.layer, point.q, point.patch_size, val_fr)
        return replace(point, val_fr=val_fr, perturbation=pert)

    if max_workers and max_workers > 1 and len(points) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            done = list(pool.map(run_point, points))
    else:
        done = [run_point(point) for point in points]

    succeeded = [p for p in done if p.ok]
    if not succeeded:
        raise AttackError("Tous les points de la grille ont échoué", {"errors": [p.error for p in done]})
    best = min(succeeded, key=lambda p: (-p.val_fr, p.layer_index, p.q, p.patch_size))
    logger.info("Meilleur point: %s, q=%s, patch=%d (FR val %.4f)", best.layer, best.q, best.patch_size, best.val_fr)
    return GridSearchResult(best_config=_point_config(base_config, best), best_point=best, points=done)


# Études complémentaires -------------------------------------------------------


def cardinality_sweep(
    model: Model,
    fit_batch: np.ndarray,
    val_set: Samples,
    base_config: AttackConfig,
    top_ks: Sequence[int],
    batch_size: int = 256,
) -> list[dict[str, float]]:
    """FR de validation en fonction du nombre de blocs endommagés."""
    rows = []
    for top_k in top_ks:
        pert = tpower_attack(model, fit_batch, base_config.updated(top_k=int(top_k)))
        rows.append(
            {
                "top_k": int(top_k),
                "damaged_pixel_fraction": damaged_pixel_fraction(pert),
                "fooling_rate": fooling_rate(model, val_set, pert, base_config.magnitude, batch_size),
            }
        )
    return rows


def pixels_to_match(rows: Sequence[Mapping[str, float]], target_fr: float) -> Optional[float]:
    """Plus petite fraction de pixels atteignant `target_fr`, ou None."""
    reached = [r["damaged_pixel_fraction"] for r in rows if r["fooling_rate"] >= target_fr]
    return min(reached) if reached else None


def random_baseline(
    model: Model,
    dataset: Samples,
    shape: Sequence[int],
    patch_size: int,
    top_k: int,
    p: float,
    xi: float,
    n_draws: int = 20,
    seed: int = 0,
    batch_size: int = 256,
) -> dict[str, Any]:
    """FR moyen et écart-type de perturbations aléatoires de même budget (graines seed..seed+n_draws−1)."""
    values = [
        fooling_rate(model, dataset, random_sparse_perturbation(shape, patch_size, top_k, p, seed + i), xi, batch_size)
        for i in range(n_draws)
    ]
    return {"mean": float(np.mean(values)), "std": float(np.std(values)), "values": values}
