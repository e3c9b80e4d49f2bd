import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from consistent_robustness.geometry import (
    AttackGeometry,
    LinearPair,
    NoAttackPossible,
    consistent_attack_exists,
    craft_consistent_attack,
    dual_exponent,
    dual_norm_distance,
    existence_probability_latent,
    existence_probability_wellspec,
    feature_matrix,
    inconsistent_attack_exists,
    lp_norm,
    margin_summary,
)


def sphere(rng, d):
    g = rng.standard_normal(d)
    return g * math.sqrt(d) / np.linalg.norm(g)


def correlated_pair(rng, d, m):
    teacher = np.zeros(d)
    teacher[0] = math.sqrt(d)
    xi = rng.standard_normal(d)
    xi[0] = 0.0
    w = math.sqrt(d) * (m * np.eye(d)[0] + math.sqrt(1 - m * m) * xi / np.linalg.norm(xi))
    return LinearPair(teacher, w)


FIXED_V = np.array([0.3, -1.2, 2.0, 0.7, -0.4])
FIXED_T = np.array([1.0, 0.5, -1.5, 2.0, 0.1])


class TestDualExponent:
    @pytest.mark.parametrize("q,expected", [(2, 2), (math.inf, 1), (1, math.inf), (4, 4 / 3), (1.5, 3)])
    def test_values(self, q, expected):
        assert dual_exponent(q) == pytest.approx(expected)

    def test_invalid(self):
        with pytest.raises(ValueError):
            dual_exponent(0.5)

    @given(st.floats(1.01, 50))
    def test_involution(self, q):
        assert dual_exponent(dual_exponent(q)) == pytest.approx(q, rel=1e-12)

    def test_geometry_scaling(self):
        g = AttackGeometry.from_rescaled(math.inf, 2.0, 100)
        assert g.q_dual == 1.0
        assert g.eps == pytest.approx(0.02)
        assert g.rescaled(100) == pytest.approx(2.0)

    def test_rejects_q_att_one(self):
        with pytest.raises(ValueError):
            AttackGeometry(1.0, 0.1)


class TestDualNormDistance:
    def test_orthogonal_euclidean(self):
        t = np.array([1.0, 0, 0])
        v = np.array([0, 2.0, -1.0])
        dist, k = dual_norm_distance(v, t, 2)
        assert dist == pytest.approx(math.sqrt(5))
        assert k == pytest.approx(0.0)

    @pytest.mark.parametrize("q", [1.0, 1.5, 2.0, 3.0])
    def test_collinear(self, q):
        dist, k = dual_norm_distance(3 * FIXED_T, FIXED_T, q)
        assert dist == pytest.approx(0.0, abs=1e-10)
        assert k == pytest.approx(3.0, abs=1e-9)

    @pytest.mark.parametrize("q", [1.0, 1.5, 4.0])
    def test_grid_oracle(self, q):
        dist, k = dual_norm_distance(FIXED_V, FIXED_T, q)
        grid = np.arange(-10, 10, 1e-4)
        vals = np.sum(np.abs(FIXED_V[None, :] - grid[:, None] * FIXED_T[None, :]) ** q, axis=1) ** (1 / q)
        assert dist <= vals.min() + 1e-12
        assert vals.min() - dist < 1e-6
        assert k == pytest.approx(grid[np.argmin(vals)], abs=2e-4)

    def test_l1_tie_break_nearest_zero(self):
        # Flat optimum on [-1, 1]: ratios v/t are -1 and 1 with equal weights.
        dist, k = dual_norm_distance(np.array([-1.0, 1.0]), np.array([1.0, 1.0]), 1.0)
        assert dist == pytest.approx(2.0)
        assert k == 0.0

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            dual_norm_distance(FIXED_V, FIXED_T, 0.5)
        with pytest.raises(ValueError):
            dual_norm_distance(FIXED_V, np.zeros(5), 2)

    @given(st.integers(0, 10_000), st.floats(-20, 20).filter(lambda c: abs(c) > 1e-3), st.sampled_from([1.0, 1.5, 2.0, 3.0]))
    @settings(max_examples=40, deadline=None)
    def test_homogeneous(self, seed, c, q):
        rng = np.random.default_rng(seed)
        v, t = rng.standard_normal(7), rng.standard_normal(7)
        d1, k1 = dual_norm_distance(v, t, q)
        d2, k2 = dual_norm_distance(c * v, t, q)
        assert d2 == pytest.approx(abs(c) * d1, rel=1e-7, abs=1e-9)

    @given(st.integers(0, 10_000), st.sampled_from([1.0, 1.5, 2.0, 4.0]))
    @settings(max_examples=40, deadline=None)
    def test_bounded_by_norm(self, seed, q):
        rng = np.random.default_rng(seed)
        v, t = rng.standard_normal(6), rng.standard_normal(6)
        dist, _ = dual_norm_distance(v, t, q)
        assert 0 <= dist <= lp_norm(v, q) * (1 + 1e-12)


class TestMarginSummary:
    def test_orthogonal_ratio_one(self):
        t = np.array([2.0, 0.0, 0.0, 0.0])
        w = np.array([0.0, 1.0, -2.0, 0.5])
        s = margin_summary(LinearPair(t, w), AttackGeometry(2.0, 0.1))
        assert s.ratio == pytest.approx(1.0)

    @given(st.integers(0, 10_000), st.sampled_from([1.5, 2.0, 4.0, math.inf]))
    @settings(max_examples=30, deadline=None)
    def test_chain(self, seed, q):
        rng = np.random.default_rng(seed)
        pair = LinearPair(sphere(rng, 6), rng.standard_normal(6))
        geom = AttackGeometry(q, 0.1)
        s = margin_summary(pair, geom)
        perp = lp_norm(pair.orthogonal_part(), geom.q_dual)
        assert s.distance <= perp * (1 + 1e-10) + 1e-12
        assert perp <= lp_norm(pair.weights, geom.q_dual) * (1 + 1e-10) + 1e-12 or geom.q_dual != 2
        assert 0 <= s.ratio <= 1


class TestExistence:
    def test_zero_radius(self):
        rng = np.random.default_rng(1)
        pair = LinearPair(sphere(rng, 5), rng.standard_normal(5))
        x = rng.standard_normal(5)
        assert not consistent_attack_exists(pair, x, AttackGeometry(2.0, 0.0))

    def test_aligned_model(self):
        rng = np.random.default_rng(2)
        t = sphere(rng, 5)
        pair = LinearPair(t, 2.5 * t)
        x = rng.standard_normal(5)
        assert not consistent_attack_exists(pair, x, AttackGeometry(2.0, 1e6))

    def test_zero_margin_counts(self):
        t = np.array([math.sqrt(2), 0.0])
        pair = LinearPair(t, np.array([0.0, 1.0]))
        assert consistent_attack_exists(pair, np.array([1.0, 0.0]), AttackGeometry(2.0, 1e-9))

    @given(st.integers(0, 10_000), st.sampled_from([1.5, 2.0, 4.0, math.inf]), st.floats(0, 3))
    @settings(max_examples=50, deadline=None)
    def test_nesting(self, seed, q, eps):
        rng = np.random.default_rng(seed)
        pair = LinearPair(sphere(rng, 6), rng.standard_normal(6))
        x = rng.standard_normal(6)
        geom = AttackGeometry(q, eps)
        if consistent_attack_exists(pair, x, geom):
            assert inconsistent_attack_exists(pair, x, geom)


class TestCraftAttack:
    def test_euclidean_closed_form(self):
        t = np.array([2.0, 0.0, 0.0, 0.0])
        w = np.array([0.0, 1.0, -2.0, 0.5])
        x = np.array([0.3, 0.2, 0.1, -0.4])
        delta = craft_consistent_attack(LinearPair(t, w), x, AttackGeometry(2.0, 0.7))
        expected = -np.sign(w @ x) * 0.7 * w / np.linalg.norm(w)
        np.testing.assert_allclose(delta, expected, atol=1e-14)
        assert t @ delta == 0.0

    def test_aligned_raises(self):
        t = np.array([2.0, 0.0, 0.0, 0.0])
        with pytest.raises(NoAttackPossible):
            craft_consistent_attack(LinearPair(t, 3 * t), np.ones(4), AttackGeometry(2.0, 1.0))

    @given(st.integers(0, 10_000), st.sampled_from([1.5, 2.0, 3.0, 4.0, math.inf]), st.floats(0.01, 2))
    @settings(max_examples=60, deadline=None)
    def test_postconditions(self, seed, q, eps):
        rng = np.random.default_rng(seed)
        d = 8
        pair = LinearPair(sphere(rng, d), rng.standard_normal(d))
        x = rng.standard_normal(d)
        geom = AttackGeometry(q, eps)
        delta = craft_consistent_attack(pair, x, geom)
        dist, _ = dual_norm_distance(pair.weights, pair.teacher, geom.q_dual)
        margin = pair.weights @ x
        assert lp_norm(delta, q) <= eps * (1 + 1e-10)
        assert abs(pair.teacher @ delta) <= 1e-8 * np.linalg.norm(pair.teacher) * np.linalg.norm(delta)
        np.testing.assert_allclose(pair.weights @ delta, -np.sign(margin) * eps * dist, rtol=1e-8)
        if eps * dist > abs(margin) * (1 + 1e-9):
            assert np.sign(pair.weights @ (x + delta)) != np.sign(margin)

    def test_attack_matches_distance_q4(self):
        rng = np.random.default_rng(8)
        pair = LinearPair(sphere(rng, 8), rng.standard_normal(8))
        geom = AttackGeometry(4.0, 1.0)
        delta = craft_consistent_attack(pair, rng.standard_normal(8), geom)
        dist, _ = dual_norm_distance(pair.weights, pair.teacher, geom.q_dual)
        np.testing.assert_allclose(abs(pair.weights @ delta), dist, rtol=1e-8)

    def test_threshold_behaviour(self):
        # Below the threshold every crafted attack flips; above it no sampled
        # feasible consistent perturbation does.
        rng = np.random.default_rng(11)
        d = 5
        pair = LinearPair(sphere(rng, d), rng.standard_normal(d))
        geom = AttackGeometry(2.0, 0.5)
        dist, _ = dual_norm_distance(pair.weights, pair.teacher, 2.0)
        budget = geom.eps * dist
        P = np.eye(d) - np.outer(pair.teacher, pair.teacher) / d
        for _ in range(200):
            x = rng.standard_normal(d) * 0.3
            margin = pair.weights @ x
            if abs(margin) < budget:
                delta = craft_consistent_attack(pair, x, geom)
                assert np.sign(pair.weights @ (x + delta)) != np.sign(margin)
            else:
                deltas = (P @ rng.standard_normal((d, 500))).T
                deltas *= geom.eps / np.linalg.norm(deltas, axis=1, keepdims=True)
                flips = np.sign((x + deltas) @ pair.weights) != np.sign(margin)
                assert not flips.any()


class TestExistenceProbability:
    def test_zero_radius(self):
        pair = correlated_pair(np.random.default_rng(0), 10, 0.5)
        assert existence_probability_wellspec(pair, AttackGeometry(2.0, 0.0)) == 0.0

    def test_aligned(self):
        t = sphere(np.random.default_rng(0), 10)
        assert existence_probability_wellspec(LinearPair(t, 2 * t), AttackGeometry(2.0, 5.0)) == 0.0

    def test_latent_span(self):
        d, p = 4, 8
        t = sphere(np.random.default_rng(0), d)
        F = feature_matrix(p, d)
        theta = F @ t / (p / d)  # F^T theta = t
        pair = LinearPair(t, theta, F)
        np.testing.assert_allclose(pair.latent_direction(), t)
        assert existence_probability_latent(pair, AttackGeometry(2.0, 3.0)) == pytest.approx(0.0, abs=1e-12)
        assert existence_probability_latent(pair, AttackGeometry(2.0, 0.0)) == 0.0

    def test_latent_shape_error(self):
        with pytest.raises(ValueError):
            LinearPair(np.ones(4) * 1.0, np.ones(8), np.ones((7, 4)))

    def test_monotone_in_radius(self):
        pair = correlated_pair(np.random.default_rng(3), 10, 0.5)
        probs = [existence_probability_wellspec(pair, AttackGeometry(3.0, e)) for e in np.linspace(0, 2, 30)]
        assert np.all(np.diff(probs) >= 0)

    def test_geometry_ordering(self):
        # At fixed eps larger q_att (smaller q_dual) gives larger probability;
        # at fixed rescaled radius the power-mean inequality reverses it.
        pair = correlated_pair(np.random.default_rng(4), 10, 0.5)
        qs = [1.5, 2.0, 3.0, math.inf]
        fixed_eps = [existence_probability_wellspec(pair, AttackGeometry(q, 0.1)) for q in qs]
        assert np.all(np.diff(fixed_eps) >= 0)
        fixed_tilde = [existence_probability_wellspec(pair, AttackGeometry.from_rescaled(q, 0.3, 10)) for q in qs]
        assert np.all(np.diff(fixed_tilde) <= 1e-15)

    def test_latent_monte_carlo(self):
        rng = np.random.default_rng(5)
        d, p, n = 10, 20, 1000
        t = sphere(rng, d)
        F = feature_matrix(p, d)
        pair = LinearPair(t, rng.standard_normal(p), F)
        geom = AttackGeometry(2.0, 0.2)
        theory = existence_probability_latent(pair, geom)
        Z = rng.standard_normal((n, d)) / math.sqrt(d)
        X = Z @ F.T + rng.standard_normal((n, p)) / math.sqrt(p)
        freq = np.mean([consistent_attack_exists(pair, x, geom) for x in X])
        assert abs(freq - theory) <= 3 * math.sqrt(theory * (1 - theory) / n)


class TestFeatureMatrix:
    def test_shapes_and_scaling(self):
        F = feature_matrix(6, 3)
        np.testing.assert_allclose(F.T @ F, 2.0 * np.eye(3))
        G = feature_matrix(3, 6)
        np.testing.assert_allclose(G @ G.T, np.eye(3))
