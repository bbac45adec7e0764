"""Attaques universelles: TPower (puissance tronquée), SV dense et baselines SGD.

Toutes les attaques retournent une `Perturbation` de la forme d'une image, avec
‖ε‖_p = 1 (méthodes en puissance) ou ‖ε‖_p ≤ 1 (baselines SGD).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .diffnet import Linearization, Model, input_gradient, model_id, softmax_cross_entropy
from .errors import (
    ConfigError,
    DegenerateIterateError,
    EmptyBatchError,
    FormatError,
    InvalidKError,
    ShapeError,
    ZeroIterateError,
)
from .jacobian import BatchJacobian, ModelBatchJacobian, am_step, as_batch, batch_objective
from .models import Perturbation
from .numerics import (
    SparsityPattern,
    check_exponent,
    dual_exponent,
    lp_norm,
    project_lp_ball,
    psi,
    renormalize_step,
    truncate_topk,
)
from .tensorfile import read_framed, write_framed
from .validation import AttackConfig

logger = logging.getLogger(__name__)

PERTURBATION_MAGIC = b"TPUAP"
PERTURBATION_FORMAT_VERSION = 1

# Les attaques SV et TPower partagent la même famille dans les fichiers
POWER_FAMILY = "power"


# Cardinalité ------------------------------------------------------------


def initial_cardinality(n_blocks: int, init_truncation: float, top_k: int) -> int:
    """k initial = max(⌊init_truncation · n_blocks⌋, top_k)."""
    if top_k > n_blocks:
        raise InvalidKError(f"top_k={top_k} dépasse le nombre de blocs ({n_blocks})")
    return max(int(math.floor(init_truncation * n_blocks)), top_k)


def cardinality_schedule(k_current: int, top_k: int, n_steps: int, reduction_steps: int, step: int) -> int:
    """
    Réduction géométrique de la cardinalité au pas `step`.

    k_reduction = (k/top_k)^(r/h) avec h = horizon − step + r, où horizon est le plus
    grand multiple de r ≤ n_steps. Au premier palier h = horizon; au dernier la
    cardinalité atteint exactement top_k.

    Returns:
        max(⌊k/k_reduction⌋, top_k), jamais supérieur à k_current
    """
    if k_current <= top_k:
        return top_k
    if step <= 0 or step % reduction_steps != 0:
        return k_current
    horizon = (n_steps // reduction_steps) * reduction_steps
    remaining = horizon - step + reduction_steps
    if remaining <= 0:
        return top_k
    k_reduction = (k_current / top_k) ** (reduction_steps / remaining)
    k_next = max(int(math.floor(k_current / k_reduction)), top_k)
    return min(k_next, k_current)


def top_k_for_budget(shape: tuple[int, ...], patch_size: int, damage_budget: float) -> int:
    """Nombre de patches complets tenant dans la fraction de pixels endommagés autorisée."""
    shape = tuple(shape)
    pixels = shape[0] * shape[1] if len(shape) == 3 else int(np.prod(shape))
    k = int(math.floor(damage_budget * pixels / (patch_size * patch_size) + 1e-9))
    if k < 1:
        raise InvalidKError(
            f"Budget {damage_budget} trop faible pour un patch {patch_size}×{patch_size}",
            {"pixels": pixels, "patch_size": patch_size},
        )
    return k


# Méthode de la puissance tronquée --------------------------------------


@dataclass
class PowerResult:
    eps: np.ndarray
    support: tuple[int, ...]
    objective_trace: list[float] = field(default_factory=list)
    cardinality_trace: list[int] = field(default_factory=list)
    restarts: int = 0


def _initial_iterate(n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.uniform(-1.0, 1.0, size=n)


def _run_power(
    batch_op: BatchJacobian,
    pattern: SparsityPattern,
    eps0: np.ndarray,
    q: float,
    p: float,
    top_k: int,
    k0: int,
    n_steps: int,
    reduction_steps: int,
    truncate: bool,
) -> PowerResult:
    pstar = dual_exponent(p)
    k = k0
    eps = truncate_topk(eps0, k, pattern, pstar) if truncate else eps0
    eps = renormalize_step(eps, p)
    trace: list[float] = []
    ks: list[int] = []
    for step in range(1, n_steps + 1):
        direction, objective = am_step(batch_op, eps, q)
        trace.append(objective)
        if truncate:
            # k(s) s'applique dès le pas s: le dernier palier tronque déjà à top_k
            k = cardinality_schedule(k, top_k, n_steps, reduction_steps, step)
            direction = truncate_topk(direction, k, pattern, pstar)
        eps = renormalize_step(direction, p)
        ks.append(k)
        logger.debug("pas %d: objectif %.6g, k=%d", step, objective, k, extra={"step": step, "k": k})
    trace.append(batch_objective(batch_op, eps, q))
    return PowerResult(eps=eps, support=pattern.support_of(eps), objective_trace=trace, cardinality_trace=ks)


def truncated_power_method(
    batch_op,
    pattern: SparsityPattern,
    *,
    q: float,
    p: float,
    top_k: int,
    n_steps: int,
    reduction_steps: int,
    init_truncation: float = 1.0,
    seed: int = 0,
    truncate: bool = True,
    initial: Optional[np.ndarray] = None,
) -> PowerResult:
    """
    Itération de puissance tronquée sur un empilement de jacobiennes.

    Chaque pas calcule Σ Jᵀψ_q(Jε), garde les k meilleurs blocs (norme ℓ_{p*})
    et renormalise sur la p-sphère. Si un itéré s'annule, l'itération repart une
    fois d'un ε tiré avec la graine suivante.

    Args:
        batch_op: BatchJacobian (ou opérateur seul / liste d'opérateurs)
        pattern: Partition en blocs de l'espace d'entrée
        q: Exposant de l'objectif (fini)
        p: Exposant de la contrainte
        top_k: Cardinalité finale (en blocs)
        n_steps: Nombre d'itérations
        reduction_steps: Période de réduction de k
        init_truncation: Fraction initiale de blocs actifs
        seed: Graine de ε⁰
        truncate: False pour la variante dense (SV)
        initial: ε⁰ explicite (remplace le tirage aléatoire)

    Returns:
        PowerResult avec ε aplati, support et trace de l'objectif (n_steps + 1 valeurs)
    """
    batch_op = as_batch(batch_op)
    q = check_exponent(q)
    p = check_exponent(p)
    if batch_op.in_dim != pattern.total_len:
        raise ShapeError(f"Motif de {pattern.total_len} indices pour un opérateur d'entrée {batch_op.in_dim}")
    if truncate:
        if not 1 <= reduction_steps <= n_steps:
            raise ConfigError(
                f"reduction_steps={reduction_steps} hors de [1, n_steps={n_steps}]",
                {"reduction_steps": reduction_steps, "n_steps": n_steps},
            )
        k0 = initial_cardinality(pattern.n_blocks, init_truncation, top_k)
    else:
        k0 = pattern.n_blocks

    if initial is None:
        eps0 = _initial_iterate(pattern.total_len, seed)
    else:
        eps0 = np.asarray(initial, dtype=np.float64).reshape(-1)
    if eps0.size != pattern.total_len:
        raise ShapeError(f"ε⁰ de longueur {eps0.size}, attendu {pattern.total_len}")
    args = (batch_op, pattern)
    kwargs: dict[str, Any] = dict(
        q=q, p=p, top_k=top_k, k0=k0, n_steps=n_steps, reduction_steps=reduction_steps, truncate=truncate
    )
    try:
        return _run_power(*args, eps0, **kwargs)
    except ZeroIterateError as e:
        logger.warning("Itéré nul (%s): redémarrage avec la graine %d", e.message, seed + 1)
    try:
        result = _run_power(*args, _initial_iterate(pattern.total_len, seed + 1), **kwargs)
    except ZeroIterateError as e:
        raise DegenerateIterateError(
            "Itéré dégénéré après redémarrage", {"seed": seed, "reason": e.message}
        ) from e
    result.restarts = 1
    return result


def _check_batch(model: Model, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim == len(model.input_shape):
        batch = batch[None]
    if batch.shape[0] == 0:
        raise EmptyBatchError("Batch d'attaque vide")
    if batch.shape[1:] != model.input_shape:
        raise ShapeError(f"Batch de forme {batch.shape[1:]}, attendu {model.input_shape}")
    return batch


def tpower_attack(
    model: Model,
    batch: np.ndarray,
    config: AttackConfig,
    *,
    initial: Optional[np.ndarray] = None,
    method: str = "tpower",
) -> Perturbation:
    """Attaque TPower: (p,q)-vecteur singulier tronqué de la jacobienne de la couche `config.layer`."""
    batch = _check_batch(model, batch)
    pattern = SparsityPattern.for_shape(model.input_shape, config.patch_size)
    if config.top_k > pattern.n_blocks:
        raise InvalidKError(f"top_k={config.top_k} dépasse le nombre de blocs ({pattern.n_blocks})")
    batch_op = ModelBatchJacobian(model, config.layer, batch)
    logger.info(
        "%s: couche %s, %d échantillons, %d blocs, top_k=%d, q=%s, p=%s",
        method,
        config.layer,
        batch.shape[0],
        pattern.n_blocks,
        config.top_k,
        config.q,
        config.p,
    )
    result = truncated_power_method(
        batch_op,
        pattern,
        q=config.q,
        p=config.p,
        top_k=config.top_k,
        n_steps=config.n_steps,
        reduction_steps=config.reduction_steps,
        init_truncation=config.init_truncation,
        seed=config.seed,
        initial=initial,
    )
    logger.info("%s terminé: objectif %.6g, %d blocs actifs", method, result.objective_trace[-1], len(result.support))
    return Perturbation(
        eps=result.eps.reshape(model.input_shape),
        pattern=pattern,
        support=result.support,
        config=config,
        source_model_id=model_id(model),
        objective_trace=result.objective_trace,
        method=method,
    )


def dense_config(config: AttackConfig, n_blocks: int) -> AttackConfig:
    """Configuration équivalente sans troncature effective (toutes les cardinalités pleines)."""
    return config.updated(top_k=n_blocks, init_truncation=1.0)


def sv_attack(
    model: Model,
    batch: np.ndarray,
    layer: str,
    q: float,
    p: float,
    n_steps: int,
    seed: int,
    *,
    patch_size: int = 1,
    reduction_steps: Optional[int] = None,
    magnitude: float = 1.0,
) -> Perturbation:
    """Attaque SV dense: même boucle que TPower, troncature à pleine cardinalité."""
    pattern = SparsityPattern.for_shape(model.input_shape, patch_size)
    config = AttackConfig(
        n_steps=n_steps,
        init_truncation=1.0,
        top_k=pattern.n_blocks,
        patch_size=patch_size,
        reduction_steps=min(reduction_steps or AttackConfig.model_fields["reduction_steps"].default, n_steps),
        q=q,
        p=p,
        layer=str(layer),
        seed=seed,
        magnitude=magnitude,
    )
    return tpower_attack(model, batch, config, method="sv")


# Baselines SGD -----------------------------------------------------------


def _sgd_init(shape: tuple[int, ...], p: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return project_lp_ball(rng.uniform(-1.0, 1.0, size=int(np.prod(shape))), p).reshape(shape)


def _ascent_step(eps: np.ndarray, grad: np.ndarray, lr: float, p: float) -> np.ndarray:
    flat = grad.reshape(-1)
    if math.isinf(p):
        step = np.sign(flat)
    else:
        norm = lp_norm(flat, 2.0)
        step = flat / norm if norm > 0.0 else flat
    return project_lp_ball(eps.reshape(-1) + lr * step, p).reshape(eps.shape)


def _layer_objective(lin: Linearization, clean: np.ndarray, q: float) -> tuple[float, np.ndarray]:
    diff = lin.output - clean
    value = float(np.sum(np.abs(diff) ** q))
    covectors = psi(diff.reshape(-1), q).reshape(diff.shape) * q
    return value, covectors


def sgd_layer_max_attack(
    model: Model,
    batch: np.ndarray,
    layer: str,
    q: float,
    p: float,
    magnitude: float,
    steps: int,
    lr: float,
    seed: int,
) -> Perturbation:
    """
    Maximisation directe de Σ‖l(x + ξε) − l(x)‖_q^q, sans linéarisation.

    Montée de gradient projetée sur la p-boule unité (signe du gradient pour
    p = inf, gradient normalisé sinon).
    """
    batch = _check_batch(model, batch)
    q = check_exponent(q)
    p = check_exponent(p)
    clean = Linearization(model, layer, batch).output
    eps = _sgd_init(model.input_shape, p, seed)
    trace: list[float] = []
    for step in range(steps):
        lin = Linearization(model, layer, batch + magnitude * eps)
        objective, covectors = _layer_objective(lin, clean, q)
        trace.append(objective)
        grad = magnitude * lin.pull(covectors).sum(axis=0)
        eps = _ascent_step(eps, grad, lr, p)
        logger.debug("sgd_layer_max pas %d: objectif %.6g", step + 1, objective, extra={"step": step + 1})
    final, _ = _layer_objective(Linearization(model, layer, batch + magnitude * eps), clean, q)
    trace.append(final)

    pattern = SparsityPattern.for_shape(model.input_shape, 1)
    config = AttackConfig(
        n_steps=steps,
        top_k=pattern.n_blocks,
        reduction_steps=steps,
        q=q,
        p=p,
        layer=str(layer),
        seed=seed,
        magnitude=magnitude,
    )
    logger.info("sgd_layer_max terminé: objectif %.6g", final)
    return Perturbation(
        eps=eps,
        pattern=pattern,
        support=pattern.support_of(eps),
        config=config,
        source_model_id=model_id(model),
        objective_trace=trace,
        method="sgd_layer_max",
    )


def sgd_uap_attack(
    model: Model,
    samples: np.ndarray,
    labels: np.ndarray,
    p: float,
    magnitude: float,
    steps: int,
    lr: float,
    batch_size: int,
    seed: int,
) -> Perturbation:
    """Baseline universelle classique: montée SGD sur l'entropie croisée de f(clip(x + ξε))."""
    samples = _check_batch(model, samples)
    labels = np.asarray(labels, dtype=np.int64)
    p = check_exponent(p)
    eps = _sgd_init(model.input_shape, p, seed)
    rng = np.random.default_rng(seed)
    trace: list[float] = []
    n = samples.shape[0]
    for step in range(steps):
        idx = rng.choice(n, size=min(batch_size, n), replace=False)
        shifted = samples[idx] + magnitude * eps
        x_adv = np.clip(shifted, 0.0, 1.0)
        lin = Linearization(model, len(model.layers) - 1, x_adv)
        loss, logits_grad = softmax_cross_entropy(lin.output, labels[idx])
        trace.append(loss)
        inside = (shifted > 0.0) & (shifted < 1.0)
        grad = magnitude * np.where(inside, input_gradient(model, x_adv, logits_grad), 0.0).sum(axis=0)
        eps = _ascent_step(eps, grad, lr, p)

    pattern = SparsityPattern.for_shape(model.input_shape, 1)
    config = AttackConfig(
        n_steps=steps, top_k=pattern.n_blocks, reduction_steps=steps, p=p, seed=seed, magnitude=magnitude
    )
    logger.info("sgd terminé après %d pas (perte finale %.4f)", steps, trace[-1] if trace else float("nan"))
    return Perturbation(
        eps=eps,
        pattern=pattern,
        support=pattern.support_of(eps),
        config=config,
        source_model_id=model_id(model),
        objective_trace=trace,
        method="sgd",
    )


def random_sparse_perturbation(
    shape: tuple[int, ...],
    patch_size: int,
    top_k: int,
    p: float,
    seed: int,
) -> Perturbation:
    """Perturbation aléatoire de même budget: top_k blocs tirés au hasard, signes ±1, ‖ε‖_p = 1."""
    shape = tuple(int(s) for s in shape)
    p = check_exponent(p)
    pattern = SparsityPattern.for_shape(shape, patch_size)
    if top_k > pattern.n_blocks:
        raise InvalidKError(f"top_k={top_k} dépasse le nombre de blocs ({pattern.n_blocks})")
    rng = np.random.default_rng(seed)
    chosen = np.zeros(pattern.n_blocks, dtype=bool)
    chosen[rng.choice(pattern.n_blocks, size=top_k, replace=False)] = True
    signs = rng.choice(np.array([-1.0, 1.0]), size=pattern.total_len)
    flat = np.where(chosen[pattern.block_ids], signs, 0.0)
    flat = flat / lp_norm(flat, p)
    config = AttackConfig(n_steps=1, top_k=top_k, patch_size=patch_size, reduction_steps=1, p=p, seed=seed)
    return Perturbation(
        eps=flat.reshape(shape),
        pattern=pattern,
        support=pattern.support_of(flat),
        config=config,
        source_model_id="",
        method="random",
    )


def zero_perturbation(shape: tuple[int, ...], patch_size: int = 1) -> Perturbation:
    """ε = 0 (référence des tests et de l'export)."""
    pattern = SparsityPattern.for_shape(tuple(shape), patch_size)
    return Perturbation(
        eps=np.zeros(tuple(shape)),
        pattern=pattern,
        support=(),
        config=AttackConfig(top_k=pattern.n_blocks, n_steps=1, reduction_steps=1, patch_size=patch_size),
        source_model_id="",
        method="zero",
    )


# Sérialisation ---------------------------------------------------------


def _family(method: str) -> str:
    return POWER_FAMILY if method in ("tpower", "sv") else method


def _pattern_header(pattern: SparsityPattern) -> tuple[dict[str, Any], list[np.ndarray]]:
    if pattern.descriptor is not None:
        h, w, c, ps = pattern.descriptor
        return {"kind": "grid", "height": h, "width": w, "channels": c, "patch_size": ps}, []
    if np.array_equal(pattern.block_ids, np.arange(pattern.total_len)):
        return {"kind": "singletons", "total_len": pattern.total_len}, []
    ids = pattern.block_ids.astype(np.float64)
    return {"kind": "explicit", "total_len": pattern.total_len, "n_blocks": pattern.n_blocks}, [ids]


def _pattern_from_header(header: dict[str, Any], extra: list[np.ndarray]) -> SparsityPattern:
    kind = header.get("kind")
    if kind == "grid":
        return SparsityPattern.grid(header["height"], header["width"], header["channels"], header["patch_size"])
    if kind == "singletons":
        return SparsityPattern.singletons(header["total_len"])
    if kind == "explicit" and extra:
        return SparsityPattern(header["total_len"], extra[0].astype(np.int64), header["n_blocks"])
    raise FormatError(f"Motif de parcimonie inconnu: {kind!r}")


def perturbation_header(pert: Perturbation) -> tuple[dict[str, Any], list[np.ndarray]]:
    pattern_header, extra = _pattern_header(pert.pattern)
    arrays = [pert.eps, *extra]
    header = {
        "format_version": PERTURBATION_FORMAT_VERSION,
        "family": _family(pert.method),
        "shape": list(pert.shape),
        "pattern": pattern_header,
        "support": [int(b) for b in pert.support],
        "config": pert.config.model_dump(mode="json"),
        "source_model_id": pert.source_model_id,
        "objective_trace": [float(v) for v in pert.objective_trace],
        "block_shapes": [list(a.shape) for a in arrays],
    }
    return header, arrays


def save_perturbation(pert: Perturbation, path: Path) -> Path:
    """Écrit une perturbation (en-tête JSON + ε en float64 LE)."""
    header, arrays = perturbation_header(pert)
    write_framed(path, PERTURBATION_MAGIC, header, arrays)
    logger.info("Perturbation écrite -> %s", path)
    return Path(path)


def load_perturbation(path: Path) -> Perturbation:
    header, arrays = read_framed(path, PERTURBATION_MAGIC)
    if header.get("format_version") != PERTURBATION_FORMAT_VERSION:
        raise FormatError(f"Version de format de perturbation non supportée: {header.get('format_version')}")
    if not arrays:
        raise FormatError("Fichier de perturbation sans payload")
    eps = arrays[0].reshape(header["shape"])
    pattern = _pattern_from_header(header["pattern"], arrays[1:])
    if pattern.total_len != eps.size:
        raise FormatError("Motif incompatible avec la forme de ε")
    support = tuple(int(b) for b in header["support"])
    family = header.get("family", POWER_FAMILY)
    if family == POWER_FAMILY:
        method = "sv" if len(support) == pattern.n_blocks else "tpower"
    else:
        method = family
    return Perturbation(
        eps=eps,
        pattern=pattern,
        support=support,
        config=AttackConfig.model_validate(header["config"]),
        source_model_id=header.get("source_model_id", ""),
        objective_trace=list(header.get("objective_trace", [])),
        method=method,
    )
