"""Primitives numériques: applications ψ, normes ℓp, exposants duaux,
troncature par blocs et renormalisation.

Tous les vecteurs sont des ndarray float64 à une dimension. Les fonctions sont
pures: elles ne modifient jamais leurs entrées.
"""

from __future__ import annotations

import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    InvalidExponentError,
    InvalidKError,
    ShapeError,
    UnsupportedExponentError,
    ZeroInputError,
    ZeroIterateError,
)

INFINITY = math.inf

NormExponent = float


def check_exponent(p: NormExponent) -> float:
    """Valide un exposant de norme (réel ≥ 1 ou INFINITY) et le retourne en float."""
    value = float(p)
    if math.isnan(value) or value < 1.0:
        raise InvalidExponentError(f"Exposant de norme invalide: {p!r} (attendu ≥ 1 ou inf)")
    return value


def _as_vec(v) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        arr = arr.reshape(-1)
    return arr


def psi(v, q: NormExponent) -> np.ndarray:
    """ψ_q(v) = sign(v)·|v|^(q−1), avec sign(0) = 0."""
    q = check_exponent(q)
    if math.isinf(q):
        raise UnsupportedExponentError("ψ_q n'est pas défini pour q = inf")
    v = _as_vec(v)
    if q == 1.0:
        return np.sign(v)
    if q == 2.0:
        return v.copy()
    return np.sign(v) * np.abs(v) ** (q - 1.0)


def lp_norm(v, p: NormExponent) -> float:
    """Norme ℓp standard; p = INFINITY donne max |v_i|, le vecteur nul donne 0."""
    p = check_exponent(p)
    a = np.abs(_as_vec(v))
    if a.size == 0:
        return 0.0
    scale = float(a.max())
    if scale == 0.0:
        return 0.0
    if math.isinf(p):
        return scale
    if p == 1.0:
        return float(a.sum())
    if p == 2.0:
        return float(np.linalg.norm(a))
    # Mise à l'échelle par le max: pas de débordement pour les grands p
    return scale * float(np.sum((a / scale) ** p)) ** (1.0 / p)


def dual_exponent(p: NormExponent) -> float:
    """Retourne p* tel que 1/p + 1/p* = 1."""
    p = check_exponent(p)
    if math.isinf(p):
        return 1.0
    if p == 1.0:
        return INFINITY
    return p / (p - 1.0)


def dual_witness(b, q: NormExponent) -> np.ndarray:
    """y = ψ_q(b)/‖ψ_q(b)‖_{q*}: maximiseur de yᵀb sur la q*-sphère."""
    b = _as_vec(b)
    if not np.any(b):
        raise ZeroInputError("dual_witness: vecteur b nul")
    # ψ_q est positivement homogène: on met b à l'échelle de max|b| avant la puissance
    y = psi(b / np.abs(b).max(), q)
    return y / lp_norm(y, dual_exponent(q))


@dataclass(frozen=True, eq=False)
class SparsityPattern:
    """Partition des indices d'une perturbation aplatie en blocs disjoints.

    `block_ids[i]` est le numéro de bloc de l'indice i. Pour un motif issu d'une
    grille HWC, chaque bloc est un patch patch_size×patch_size répliqué sur tous
    les canaux et `descriptor` vaut (height, width, channels, patch_size).
    """

    total_len: int
    block_ids: np.ndarray = field(repr=False)
    n_blocks: int
    descriptor: tuple[int, int, int, int] | None = None

    def __post_init__(self) -> None:
        ids = np.asarray(self.block_ids, dtype=np.int64)
        if self.total_len <= 0 or ids.shape != (self.total_len,):
            raise ShapeError("SparsityPattern: block_ids doit couvrir total_len indices")
        if self.n_blocks <= 0 or ids.min() < 0 or ids.max() >= self.n_blocks:
            raise ShapeError("SparsityPattern: numéros de blocs hors limites")
        if np.bincount(ids, minlength=self.n_blocks).min() == 0:
            raise ShapeError("SparsityPattern: bloc vide")
        ids.setflags(write=False)
        object.__setattr__(self, "block_ids", ids)

    @classmethod
    def singletons(cls, n: int) -> SparsityPattern:
        """Un bloc par indice."""
        return cls(total_len=n, block_ids=np.arange(n, dtype=np.int64), n_blocks=n)

    @classmethod
    def from_blocks(cls, blocks: Sequence[Iterable[int]], total_len: int) -> SparsityPattern:
        """Construit un motif depuis une liste explicite de blocs (disjoints, couvrants)."""
        ids = np.full(total_len, -1, dtype=np.int64)
        for b, block in enumerate(blocks):
            idx = np.fromiter(block, dtype=np.int64)
            if idx.size == 0:
                raise ShapeError(f"Bloc {b} vide")
            if idx.min() < 0 or idx.max() >= total_len:
                raise ShapeError(f"Bloc {b}: indice hors de [0, {total_len})")
            if np.any(ids[idx] != -1) or np.unique(idx).size != idx.size:
                raise ShapeError(f"Bloc {b}: blocs non disjoints")
            ids[idx] = b
        if np.any(ids == -1):
            raise ShapeError("Les blocs ne couvrent pas tous les indices")
        return cls(total_len=total_len, block_ids=ids, n_blocks=len(blocks))

    @classmethod
    def grid(cls, height: int, width: int, channels: int, patch_size: int) -> SparsityPattern:
        """Patches spatiaux sur une image HWC; les patches de bord peuvent être plus petits."""
        if min(height, width, channels, patch_size) <= 0:
            raise ShapeError("grid: dimensions et patch_size doivent être positifs")
        n_cols = -(-width // patch_size)
        n_rows = -(-height // patch_size)
        rows = np.arange(height) // patch_size
        cols = np.arange(width) // patch_size
        spatial = rows[:, None] * n_cols + cols[None, :]
        ids = np.repeat(spatial[:, :, None], channels, axis=2).reshape(-1)
        return cls(
            total_len=height * width * channels,
            block_ids=ids,
            n_blocks=n_rows * n_cols,
            descriptor=(height, width, channels, patch_size),
        )

    @classmethod
    def for_shape(cls, shape: Sequence[int], patch_size: int = 1) -> SparsityPattern:
        """Grille pour une forme d'image (H, W, C), blocs singletons sinon."""
        shape = tuple(int(s) for s in shape)
        if len(shape) == 3:
            return cls.grid(*shape, patch_size)
        if patch_size != 1:
            raise ShapeError(f"patch_size={patch_size} n'a de sens que pour des images (H, W, C), pas {shape}")
        return cls.singletons(int(np.prod(shape)))

    @property
    def blocks(self) -> list[np.ndarray]:
        """Liste des indices de chaque bloc, dans l'ordre des blocs."""
        order = np.argsort(self.block_ids, kind="stable")
        counts = np.bincount(self.block_ids, minlength=self.n_blocks)
        return np.split(order, np.cumsum(counts)[:-1])

    def block_of(self, index: int) -> int:
        return int(self.block_ids[index])

    def support_of(self, v) -> tuple[int, ...]:
        """Blocs contenant au moins une entrée non nulle de v."""
        v = _as_vec(v)
        if v.size != self.total_len:
            raise ShapeError(f"support_of: longueur {v.size} ≠ {self.total_len}")
        active = np.bincount(self.block_ids, weights=(v != 0).astype(np.float64), minlength=self.n_blocks)
        return tuple(int(b) for b in np.flatnonzero(active))


def block_scores(v, pattern: SparsityPattern, pstar: NormExponent) -> np.ndarray:
    """Scores par bloc, ordonnés comme les normes ℓ_{p*} par bloc.

    Pour p* fini on retourne Σ|v_i/m|^{p*} (même classement que la norme, sans
    racine ni débordement); pour p* = inf, le max par bloc.
    """
    pstar = check_exponent(pstar)
    a = np.abs(_as_vec(v))
    if math.isinf(pstar):
        scores = np.zeros(pattern.n_blocks)
        np.maximum.at(scores, pattern.block_ids, a)
        return scores
    scale = a.max() if a.size else 0.0
    if scale > 0.0:
        a = a / scale
    return np.bincount(pattern.block_ids, weights=a**pstar, minlength=pattern.n_blocks)


def top_blocks(v, k: int, pattern: SparsityPattern, pstar: NormExponent) -> np.ndarray:
    """Indices des k blocs de plus grande norme ℓ_{p*}; égalités → plus petit indice."""
    if not isinstance(k, (int, np.integer)) or k <= 0:
        raise InvalidKError(f"k doit être un entier positif, reçu {k!r}")
    if k > pattern.n_blocks:
        raise InvalidKError(f"k={k} dépasse le nombre de blocs ({pattern.n_blocks})")
    scores = block_scores(v, pattern, pstar)
    order = np.argsort(-scores, kind="stable")
    return np.sort(order[:k])


def truncate_topk(v, k: int, pattern: SparsityPattern, pstar: NormExponent) -> np.ndarray:
    """Opérateur de troncature T_{p*,k}: garde les k meilleurs blocs, met le reste à zéro."""
    v = _as_vec(v)
    if v.size != pattern.total_len:
        raise ShapeError(f"truncate_topk: longueur {v.size} ≠ {pattern.total_len}")
    keep = np.zeros(pattern.n_blocks, dtype=bool)
    keep[top_blocks(v, k, pattern, pstar)] = True
    return np.where(keep[pattern.block_ids], v, 0.0)


def renormalize_step(v, p: NormExponent) -> np.ndarray:
    """ψ_{p*}(v)/‖ψ_{p*}(v)‖_p: point de la p-sphère le plus aligné avec v."""
    p = check_exponent(p)
    v = _as_vec(v)
    if not np.any(v):
        raise ZeroIterateError("renormalize_step: itéré nul")
    pstar = dual_exponent(p)
    if math.isinf(pstar):
        # p = 1: le maximiseur se concentre sur les entrées de module maximal
        a = np.abs(v)
        w = np.where(a == a.max(), np.sign(v), 0.0)
    else:
        w = psi(v / np.abs(v).max(), pstar)
    return w / lp_norm(w, p)


def project_lp_ball(v, p: NormExponent, radius: float = 1.0) -> np.ndarray:
    """Ramène v dans la boule ℓp de rayon donné.

    Projection euclidienne exacte pour p = 2 et p = inf, mise à l'échelle sinon.
    """
    p = check_exponent(p)
    v = _as_vec(v)
    if math.isinf(p):
        return np.clip(v, -radius, radius)
    norm = lp_norm(v, p)
    if norm <= radius:
        return v.copy()
    return v * (radius / norm)
