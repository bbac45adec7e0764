"""Opérateurs linéaires sans matrice sur les jacobiennes de couches cachées.

Un opérateur expose `apply` (J v) et `adjoint` (Jᵀ u) sur des vecteurs aplatis.
Un BatchJacobian empile les jacobiennes d'un batch {x_1..x_N}; sa réduction
adjointe somme les contributions dans l'ordre des échantillons.
"""

from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .diffnet import Linearization, Model
from .errors import EmptyBatchError, ShapeError, TooLargeError
from .numerics import NormExponent, check_exponent, psi
from .settings import get_settings

logger = logging.getLogger(__name__)


class LinearOperator(ABC):
    """Application linéaire R^in_dim → R^out_dim et son adjointe."""

    in_dim: int
    out_dim: int

    @abstractmethod
    def apply(self, v: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def adjoint(self, u: np.ndarray) -> np.ndarray: ...

    @property
    def T(self) -> LinearOperator:
        return AdjointOperator(self)

    def _check_in(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64).reshape(-1)
        if v.size != self.in_dim:
            raise ShapeError(f"Vecteur de longueur {v.size}, attendu {self.in_dim}")
        return v

    def _check_out(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64).reshape(-1)
        if u.size != self.out_dim:
            raise ShapeError(f"Covecteur de longueur {u.size}, attendu {self.out_dim}")
        return u


class MatrixOperator(LinearOperator):
    """Opérateur explicite (oracles et tests)."""

    def __init__(self, matrix):
        m = np.asarray(matrix, dtype=np.float64)
        if m.ndim != 2 or 0 in m.shape:
            raise ShapeError(f"Matrice 2D non vide attendue, reçu {m.shape}")
        self.matrix = m
        self.out_dim, self.in_dim = m.shape

    def apply(self, v):
        return self.matrix @ self._check_in(v)

    def adjoint(self, u):
        return self.matrix.T @ self._check_out(u)


class AdjointOperator(LinearOperator):
    def __init__(self, op: LinearOperator):
        self.op = op
        self.in_dim, self.out_dim = op.out_dim, op.in_dim

    def apply(self, v):
        return self.op.adjoint(v)

    def adjoint(self, u):
        return self.op.apply(u)

    @property
    def T(self) -> LinearOperator:
        return self.op


class ModelJacobian(LinearOperator):
    """J_i(x) d'un modèle en un point, avec masques ReLU et argmax figés."""

    def __init__(self, model: Model, cut: str | int, x: np.ndarray):
        x = np.asarray(x, dtype=np.float64)
        if x.shape != model.input_shape:
            raise ShapeError(f"Entrée de forme {x.shape}, attendu {model.input_shape}")
        self._lin = Linearization(model, cut, x[None])
        self.in_dim = int(np.prod(self._lin.in_shape))
        self.out_dim = int(np.prod(self._lin.out_shape))

    def apply(self, v):
        v = self._check_in(v).reshape(1, *self._lin.in_shape)
        return self._lin.push(v).reshape(-1)

    def adjoint(self, u):
        u = self._check_out(u).reshape(1, *self._lin.out_shape)
        return self._lin.pull(u).reshape(-1)


def from_model(model: Model, cut: str | int, x: np.ndarray) -> ModelJacobian:
    """Lie jvp/vjp du modèle à l'interface LinearOperator."""
    return ModelJacobian(model, cut, x)


def materialize(op: LinearOperator, max_dim: int | None = None) -> np.ndarray:
    """Matrice explicite M avec M e_j = op.apply(e_j), colonne par colonne.

    Sans `max_dim`, la limite vient de TPOWER_MATERIALIZE_MAX_DIM.
    """
    if max_dim is None:
        max_dim = get_settings().MATERIALIZE_MAX_DIM
    if op.in_dim > max_dim or op.out_dim > max_dim:
        raise TooLargeError(
            f"Matérialisation refusée: {op.out_dim}×{op.in_dim} dépasse {max_dim}",
            {"in_dim": op.in_dim, "out_dim": op.out_dim, "max_dim": max_dim},
        )
    m = np.empty((op.out_dim, op.in_dim))
    basis = np.zeros(op.in_dim)
    for j in range(op.in_dim):
        basis[j] = 1.0
        m[:, j] = op.apply(basis)
        basis[j] = 0.0
    return m


def _ordered_sum(rows: Sequence[np.ndarray], dim: int) -> np.ndarray:
    total = np.zeros(dim)
    for row in rows:
        total += row
    return total


class BatchJacobian(LinearOperator):
    """Empilement vertical [J(x_1); …; J(x_N)] d'opérateurs de même in_dim.

    `apply` concatène les images, `adjoint` somme Σ J_nᵀ u_n dans l'ordre des
    échantillons. Le travail par échantillon peut être réparti sur des threads,
    la fusion reste ordonnée.
    """

    def __init__(self, operators: Sequence[LinearOperator], max_workers: int | None = None):
        operators = list(operators)
        if not operators:
            raise EmptyBatchError("BatchJacobian: batch vide")
        in_dims = {op.in_dim for op in operators}
        if len(in_dims) != 1:
            raise ShapeError(f"in_dim incohérents dans le batch: {sorted(in_dims)}")
        self.operators = operators
        self.max_workers = max_workers
        self.in_dim = operators[0].in_dim
        self.out_dims = [op.out_dim for op in operators]
        self.out_dim = int(sum(self.out_dims))

    @property
    def n_samples(self) -> int:
        return len(self.out_dims)

    def _map(self, func, items):
        if self.max_workers and self.max_workers > 1 and len(items) > 1:
            with ThreadPoolExecutor(max_workers=self.max_workers) as pool:
                return list(pool.map(func, items))
        return [func(item) for item in items]

    def images(self, eps) -> list[np.ndarray]:
        """J(x_n) ε pour chaque échantillon, dans l'ordre."""
        eps = self._check_in(eps)
        return self._map(lambda op: op.apply(eps), self.operators)

    def pullback_sum(self, covectors: Sequence[np.ndarray]) -> np.ndarray:
        """Σ_n J(x_n)ᵀ u_n, accumulé dans l'ordre des échantillons."""
        if len(covectors) != self.n_samples:
            raise ShapeError(f"{len(covectors)} covecteurs pour {self.n_samples} échantillons")
        rows = self._map(lambda pair: pair[0].adjoint(pair[1]), list(zip(self.operators, covectors)))
        return _ordered_sum(rows, self.in_dim)

    def apply(self, v):
        return np.concatenate(self.images(v))

    def adjoint(self, u):
        u = self._check_out(u)
        splits = np.split(u, np.cumsum(self.out_dims)[:-1])
        return self.pullback_sum(splits)


class ModelBatchJacobian(BatchJacobian):
    """BatchJacobian d'un modèle avec passage primal vectorisé par paquets.

    Même contrat que BatchJacobian([from_model(m, i, x) for x in batch]).
    """

    def __init__(self, model: Model, cut: str | int, x_batch: np.ndarray, chunk_size: int = 64):
        x_batch = np.asarray(x_batch, dtype=np.float64)
        if x_batch.ndim == 0 or x_batch.shape[0] == 0:
            raise EmptyBatchError("ModelBatchJacobian: batch vide")
        self._chunks = [
            Linearization(model, cut, x_batch[i : i + chunk_size]) for i in range(0, x_batch.shape[0], chunk_size)
        ]
        lin = self._chunks[0]
        self._in_shape = lin.in_shape
        self._out_shape = lin.out_shape
        self.operators = []
        self.max_workers = None
        self.in_dim = int(np.prod(self._in_shape))
        out = int(np.prod(self._out_shape))
        self.out_dims = [out] * x_batch.shape[0]
        self.out_dim = out * x_batch.shape[0]

    def images(self, eps):
        eps = self._check_in(eps).reshape(self._in_shape)
        rows: list[np.ndarray] = []
        for lin in self._chunks:
            rows.extend(lin.push(eps).reshape(lin.batch_size, -1))
        return rows

    def pullback_sum(self, covectors):
        if len(covectors) != self.n_samples:
            raise ShapeError(f"{len(covectors)} covecteurs pour {self.n_samples} échantillons")
        rows: list[np.ndarray] = []
        start = 0
        for lin in self._chunks:
            block = np.stack([np.asarray(c, dtype=np.float64) for c in covectors[start : start + lin.batch_size]])
            rows.extend(lin.pull(block.reshape(lin.batch_size, *self._out_shape)).reshape(lin.batch_size, -1))
            start += lin.batch_size
        return _ordered_sum(rows, self.in_dim)


def as_batch(operators: LinearOperator | Sequence[LinearOperator]) -> BatchJacobian:
    """Accepte un opérateur seul, une liste, ou un BatchJacobian."""
    if isinstance(operators, BatchJacobian):
        return operators
    if isinstance(operators, LinearOperator):
        return BatchJacobian([operators])
    return BatchJacobian(list(operators))


def am_step(batch_op: BatchJacobian, eps, q: NormExponent) -> tuple[np.ndarray, float]:
    """Un pas de maximisation alternée.

    Returns:
        (Σ_n J_nᵀ ψ_q(J_n ε), Σ_n ‖J_n ε‖_q^q) pour l'ε reçu
    """
    q = check_exponent(q)
    images = batch_op.images(eps)
    objective = 0.0
    for b in images:
        objective += float(np.sum(np.abs(b) ** q))
    direction = batch_op.pullback_sum([psi(b, q) for b in images])
    return direction, objective


def am_step_direction(batch_op: BatchJacobian, eps, q: NormExponent) -> np.ndarray:
    """Σ_x J_iᵀ(x) ψ_q(J_i(x) ε), sans normalisation duale par échantillon."""
    return am_step(batch_op, eps, q)[0]


def batch_objective(batch_op: BatchJacobian, eps, q: NormExponent) -> float:
    """Σ_n ‖J_n ε‖_q^q."""
    q = check_exponent(q)
    return float(sum(np.sum(np.abs(b) ** q) for b in batch_op.images(eps)))
