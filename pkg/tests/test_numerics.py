"""Tests pour les primitives numériques (ψ, normes, troncature, renormalisation)."""

import itertools
import math

import numpy as np
import pytest

from tpower_uap.errors import (
    InvalidExponentError,
    InvalidKError,
    ShapeError,
    UnsupportedExponentError,
    ZeroInputError,
    ZeroIterateError,
)
from tpower_uap.numerics import (
    INFINITY,
    SparsityPattern,
    dual_exponent,
    dual_witness,
    lp_norm,
    project_lp_ball,
    psi,
    renormalize_step,
    top_blocks,
    truncate_topk,
)


class TestPsi:
    """Tests pour ψ_q."""

    def test_q2_is_identity(self):
        """ψ_2 est l'identité."""
        v = np.array([1.5, -2.0, 0.0])
        np.testing.assert_array_equal(psi(v, 2.0), v)

    def test_q1_is_sign_with_zero(self):
        """ψ_1 est le signe, avec sign(0) = 0."""
        np.testing.assert_array_equal(psi([-3.0, 0.0, 2.0], 1.0), [-1.0, 0.0, 1.0])

    def test_q3_squares_magnitudes(self):
        """ψ_3(v) = sign(v)·v²."""
        np.testing.assert_allclose(psi([-2.0, 3.0], 3.0), [-4.0, 9.0])

    def test_infinite_q_is_unsupported(self):
        """ψ_∞ n'est pas défini."""
        with pytest.raises(UnsupportedExponentError):
            psi([1.0], INFINITY)

    @pytest.mark.parametrize("q", [0.5, -1.0, float("nan")])
    def test_invalid_exponent(self, q):
        """Un exposant < 1 ou NaN est refusé."""
        with pytest.raises(InvalidExponentError):
            psi([1.0], q)

    def test_psi_is_odd(self, rng):
        """ψ_q(−v) = −ψ_q(v) exactement."""
        v = rng.normal(size=20)
        for q in (1.0, 1.5, 2.0, 3.0, 7.0):
            np.testing.assert_array_equal(psi(-v, q), -psi(v, q))


class TestNorms:
    """Tests pour lp_norm et dual_exponent."""

    def test_euclidean(self):
        """‖(3, 4)‖_2 = 5."""
        assert lp_norm([3.0, 4.0], 2.0) == pytest.approx(5.0)

    def test_inf_and_one(self):
        """Normes ℓ∞ et ℓ1."""
        v = [1.0, -7.0, 2.0]
        assert lp_norm(v, INFINITY) == 7.0
        assert lp_norm(v, 1.0) == 10.0

    def test_zero_vector(self):
        """Le vecteur nul a une norme nulle pour tout p."""
        for p in (1.0, 2.0, 3.0, INFINITY):
            assert lp_norm(np.zeros(4), p) == 0.0

    def test_large_values_do_not_overflow(self):
        """Pas de débordement pour des entrées et exposants grands."""
        value = lp_norm([1e200, 1e200], 10.0)
        assert math.isfinite(value)
        assert value == pytest.approx(1e200 * 2 ** 0.1)

    @pytest.mark.parametrize("p,expected", [(2.0, 2.0), (INFINITY, 1.0), (1.0, INFINITY), (3.0, 1.5)])
    def test_dual_exponent(self, p, expected):
        """1/p + 1/p* = 1."""
        assert dual_exponent(p) == expected


class TestDualWitness:
    """Tests pour dual_witness."""

    @pytest.mark.parametrize("q", [1.0, 1.5, 2.0, 3.0, 10.0])
    def test_dual_optimality(self, q, rng):
        """y est sur la q*-sphère et atteint yᵀb = ‖b‖_q."""
        b = rng.normal(size=15)
        y = dual_witness(b, q)
        assert lp_norm(y, dual_exponent(q)) == pytest.approx(1.0, abs=1e-12)
        assert float(y @ b) == pytest.approx(lp_norm(b, q), rel=1e-10)

    def test_large_entries_stay_finite(self):
        """q = 10 sur des entrées énormes: ni débordement ni NaN."""
        b = np.array([1e40, 1.0, -3e39])
        y = dual_witness(b, 10.0)
        assert np.all(np.isfinite(y))
        assert lp_norm(y, dual_exponent(10.0)) == pytest.approx(1.0, abs=1e-12)
        assert float(y @ b) == pytest.approx(lp_norm(b, 10.0), rel=1e-10)

    def test_zero_input(self):
        """b = 0 est refusé."""
        with pytest.raises(ZeroInputError):
            dual_witness(np.zeros(3), 2.0)


class TestSparsityPattern:
    """Tests pour les motifs de blocs."""

    def test_grid_indices_follow_hwc(self):
        """Index (h·W + w)·C + c, bloc (h // ps)·⌈W/ps⌉ + w // ps."""
        pattern = SparsityPattern.grid(4, 4, 2, 2)
        assert pattern.n_blocks == 4
        assert pattern.block_of((1 * 4 + 3) * 2 + 1) == 1
        assert pattern.block_of((2 * 4 + 0) * 2 + 0) == 2
        assert pattern.descriptor == (4, 4, 2, 2)

    def test_partial_edge_patches(self):
        """Les patches de bord incomplets forment des blocs plus petits."""
        pattern = SparsityPattern.grid(5, 5, 1, 2)
        assert pattern.n_blocks == 9
        sizes = sorted(len(b) for b in pattern.blocks)
        assert sizes == [1, 2, 2, 2, 2, 4, 4, 4, 4]

    def test_channels_share_block(self):
        """Tous les canaux d'un pixel sont dans le même bloc."""
        pattern = SparsityPattern.grid(3, 3, 3, 1)
        assert {pattern.block_of(i) for i in range(3)} == {0}

    def test_from_blocks_rejects_overlap(self):
        """Des blocs non disjoints sont refusés."""
        with pytest.raises(ShapeError):
            SparsityPattern.from_blocks([[0, 1], [1, 2]], 3)

    def test_from_blocks_rejects_uncovered(self):
        """Tous les indices doivent être couverts."""
        with pytest.raises(ShapeError):
            SparsityPattern.from_blocks([[0], [1]], 3)

    def test_support_of(self):
        """Support = blocs avec au moins une entrée non nulle."""
        pattern = SparsityPattern.from_blocks([[0, 1], [2], [3, 4]], 5)
        assert pattern.support_of([0.0, 0.0, 1.0, 0.0, -2.0]) == (1, 2)

    def test_for_shape_non_image(self):
        """Les entrées non image utilisent des blocs singletons."""
        pattern = SparsityPattern.for_shape((6,))
        assert pattern.n_blocks == 6
        with pytest.raises(ShapeError):
            SparsityPattern.for_shape((6,), patch_size=2)


class TestTruncation:
    """Tests pour top_blocks et truncate_topk."""

    def test_singleton_example(self):
        """Garde les k entrées de plus grand module."""
        pattern = SparsityPattern.singletons(4)
        out = truncate_topk([3.0, -5.0, 1.0, 4.0], 2, pattern, 1.0)
        np.testing.assert_array_equal(out, [0.0, -5.0, 0.0, 4.0])

    def test_ties_go_to_lowest_index(self):
        """Égalités départagées par le plus petit indice de bloc."""
        pattern = SparsityPattern.singletons(3)
        np.testing.assert_array_equal(truncate_topk([1.0, 1.0, 1.0], 1, pattern, 2.0), [1.0, 0.0, 0.0])
        np.testing.assert_array_equal(top_blocks([2.0, 5.0, 5.0, 5.0], 2, SparsityPattern.singletons(4), 2.0), [1, 2])

    def test_block_scores_use_dual_norm(self):
        """Le classement des blocs dépend de p*: ℓ1 contre ℓ∞."""
        pattern = SparsityPattern.from_blocks([[0, 1, 2], [3]], 4)
        v = [1.0, 1.0, 1.0, 2.5]
        np.testing.assert_array_equal(truncate_topk(v, 1, pattern, 1.0), [1.0, 1.0, 1.0, 0.0])
        np.testing.assert_array_equal(truncate_topk(v, 1, pattern, INFINITY), [0.0, 0.0, 0.0, 2.5])

    @pytest.mark.parametrize("k", [0, 5, -1, 1.5])
    def test_invalid_k(self, k):
        """k hors de [1, nombre de blocs] ou non entier."""
        with pytest.raises(InvalidKError):
            truncate_topk([1.0, 2.0, 3.0, 4.0], k, SparsityPattern.singletons(4), 2.0)

    def test_full_k_is_identity(self, rng):
        """k = nombre de blocs: troncature identité."""
        v = rng.normal(size=12)
        np.testing.assert_array_equal(truncate_topk(v, 12, SparsityPattern.singletons(12), 2.0), v)

    def test_truncation_is_best_block_approximation(self, rng):
        """Exhaustif: la troncature minimise l'erreur ℓ2 parmi tous les choix de k blocs."""
        pattern = SparsityPattern.from_blocks([[0, 1], [2], [3, 4, 5], [6], [7, 8]], 9)
        for _ in range(10):
            v = rng.normal(size=9)
            kept = truncate_topk(v, 2, pattern, 2.0)
            best = min(
                lp_norm(v - np.where(np.isin(pattern.block_ids, combo), v, 0.0), 2.0)
                for combo in itertools.combinations(range(5), 2)
            )
            assert lp_norm(v - kept, 2.0) == pytest.approx(best, abs=1e-12)

    @pytest.mark.parametrize("pstar", [1.0, 2.0, 3.0])
    def test_truncation_maximizes_kept_mass(self, pstar, rng):
        """Blocs singletons: le support gardé maximise Σ|v_i|^{p*} parmi tous les k-sous-ensembles."""
        for n in (6, 9, 12):
            v = rng.normal(size=n)
            pattern = SparsityPattern.singletons(n)
            for k in (1, 3, n // 2):
                kept = truncate_topk(v, k, pattern, pstar)
                best = max(
                    float(np.sum(np.abs(v[list(combo)]) ** pstar)) for combo in itertools.combinations(range(n), k)
                )
                assert float(np.sum(np.abs(kept) ** pstar)) == pytest.approx(best, rel=1e-12)
                assert np.count_nonzero(kept) == k

    @pytest.mark.parametrize("pstar", [1.0, 2.0, INFINITY])
    def test_truncation_is_idempotent(self, pstar, rng):
        """Tronquer deux fois ne change rien."""
        pattern = SparsityPattern.grid(5, 5, 3, 1)
        for _ in range(50):
            v = rng.normal(size=75)
            once = truncate_topk(v, 4, pattern, pstar)
            np.testing.assert_array_equal(truncate_topk(once, 4, pattern, pstar), once)


class TestRenormalize:
    """Tests pour renormalize_step et project_lp_ball."""

    def test_p2_normalizes(self):
        """p = 2: v/‖v‖_2."""
        np.testing.assert_allclose(renormalize_step([3.0, 4.0], 2.0), [0.6, 0.8])

    def test_pinf_gives_signs(self):
        """p = ∞: le maximiseur est sign(v)."""
        np.testing.assert_array_equal(renormalize_step([0.2, -3.0, 0.0], INFINITY), [1.0, -1.0, 0.0])

    def test_p1_concentrates_on_max(self):
        """p = 1: masse répartie sur les entrées de module maximal."""
        np.testing.assert_array_equal(renormalize_step([1.0, -3.0, 3.0], 1.0), [0.0, -0.5, 0.5])

    @pytest.mark.parametrize("p", [1.0, 1.5, 2.0, 3.0, INFINITY])
    def test_unit_norm(self, p, rng):
        """Le résultat est sur la p-sphère."""
        out = renormalize_step(rng.normal(size=10), p)
        assert lp_norm(out, p) == pytest.approx(1.0, abs=1e-12)

    def test_alignment_is_maximal(self, rng):
        """vᵀw = ‖v‖_{p*} sur la p-sphère."""
        v = rng.normal(size=8)
        for p in (1.5, 2.0, 4.0):
            w = renormalize_step(v, p)
            assert float(v @ w) == pytest.approx(lp_norm(v, dual_exponent(p)), rel=1e-10)

    @pytest.mark.parametrize("p", [1.01, 1.1])
    @pytest.mark.parametrize("v", [[1e4, 1.0, -2.0], [1e-5, -2e-5, 0.0], [1e4, 1e-5, -3.0]])
    def test_p_near_one_stays_finite(self, p, v):
        """p proche de 1 (p* grand): résultat fini et de norme ℓp unité."""
        out = renormalize_step(v, p)
        assert np.all(np.isfinite(out))
        assert lp_norm(out, p) == pytest.approx(1.0, abs=1e-12)

    def test_pinf_is_idempotent(self, rng):
        """p = ∞: renormaliser un point déjà renormalisé ne change rien."""
        for _ in range(20):
            once = renormalize_step(rng.normal(size=12), INFINITY)
            np.testing.assert_array_equal(renormalize_step(once, INFINITY), once)

    def test_zero_iterate(self):
        """Un itéré nul ne peut pas être normalisé."""
        with pytest.raises(ZeroIterateError):
            renormalize_step(np.zeros(3), 2.0)

    def test_project_ball(self):
        """Projection ℓ∞ par écrêtage, ℓ2 par mise à l'échelle, intérieur inchangé."""
        np.testing.assert_array_equal(project_lp_ball([2.0, -0.5], INFINITY), [1.0, -0.5])
        np.testing.assert_allclose(project_lp_ball([3.0, 4.0], 2.0), [0.6, 0.8])
        np.testing.assert_array_equal(project_lp_ball([0.1, 0.2], 2.0), [0.1, 0.2])
