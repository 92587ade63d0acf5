"""Poincare-ball operation tests: algebraic identities, known values
computed with an arbitrary-precision oracle, and domain errors.
"""

import mpmath
import numpy as np
import pytest

from geomil.geometry import (
    GeometryError,
    check_curvature,
    dist_to_origin,
    exp_map0,
    hyp_distance,
    log_map0,
    mobius_add,
    project_to_ball,
)

CURVATURE_GRID = (0.05, 0.075, 0.1, 0.2)


def interior_points(rng, n, dim, c, radius=0.9):
    """Uniformly directed points with norms up to ``radius / sqrt(c)``."""
    v = rng.standard_normal((n, dim))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    r = rng.uniform(0.0, radius / np.sqrt(c), size=(n, 1))
    return v * r


class TestMobiusAdd:
    def test_left_identity(self):
        rng = np.random.default_rng(0)
        for c in CURVATURE_GRID:
            y = interior_points(rng, 500, 8, c)
            out = mobius_add(np.zeros_like(y), y, c)
            assert np.max(np.abs(out - y)) <= 1e-12

    def test_inverse(self):
        rng = np.random.default_rng(1)
        for c in CURVATURE_GRID:
            x = interior_points(rng, 500, 8, c)
            out = mobius_add(x, -x, c)
            assert np.max(np.abs(out)) <= 1e-12

    def test_one_dimensional_value(self):
        # c=1, x=0.3, y=0.5: (-x) (+) y = (y - x) / (1 - x*y)
        with mpmath.workdps(50):
            expected = float((mpmath.mpf("0.5") - mpmath.mpf("0.3"))
                             / (1 - mpmath.mpf("0.3") * mpmath.mpf("0.5")))
        out = mobius_add(np.array([-0.3]), np.array([0.5]), 1.0)
        assert out[0] == pytest.approx(expected, abs=1e-12)
        assert out[0] == pytest.approx(0.235294, abs=1e-6)

    def test_boundary_rejected(self):
        c = 0.25
        boundary = np.array([2.0, 0.0])  # norm exactly 1/sqrt(c)
        inside = np.array([0.1, 0.0])
        with pytest.raises(GeometryError):
            mobius_add(boundary, inside, c)
        with pytest.raises(GeometryError):
            mobius_add(inside, boundary, c)

    def test_non_finite_rejected(self):
        with pytest.raises(GeometryError):
            mobius_add(np.array([np.nan, 0.0]), np.array([0.0, 0.0]), 1.0)


class TestExpLogMaps:
    def test_origin_fixed_points(self):
        for c in CURVATURE_GRID:
            assert np.all(exp_map0(np.zeros(5), c) == 0)
            assert np.all(log_map0(np.zeros(5), c) == 0)

    def test_exp_value_1d(self):
        with mpmath.workdps(50):
            expected = float(mpmath.tanh(mpmath.mpf("0.5")))
        out = exp_map0(np.array([0.5]), 1.0)
        assert out[0] == pytest.approx(expected, abs=1e-15)
        assert out[0] == pytest.approx(0.462117, abs=1e-6)

    def test_log_inverts_exp_value_1d(self):
        out = log_map0(np.array([0.46211715726000974]), 1.0)
        assert out[0] == pytest.approx(0.5, abs=1e-12)

    def test_exp_log_inversion(self):
        rng = np.random.default_rng(2)
        for c in CURVATURE_GRID:
            v = rng.standard_normal((2000, 6))
            v *= rng.uniform(0, 3.0, size=(2000, 1)) / np.linalg.norm(v, axis=1, keepdims=True)
            assert np.max(np.abs(log_map0(exp_map0(v, c), c) - v)) <= 1e-9
            y = interior_points(rng, 2000, 6, c)
            assert np.max(np.abs(exp_map0(log_map0(y, c), c) - y)) <= 1e-9

    def test_exp_lands_inside_ball(self):
        rng = np.random.default_rng(3)
        for c in CURVATURE_GRID:
            v = rng.standard_normal((1000, 4)) * 50.0
            norms = np.linalg.norm(exp_map0(v, c), axis=1)
            assert np.all(norms < 1.0 / np.sqrt(c))

    def test_log_outside_ball_rejected(self):
        with pytest.raises(GeometryError):
            log_map0(np.array([1.5, 0.0]), 1.0)


class TestDistance:
    def test_self_distance_zero(self):
        rng = np.random.default_rng(4)
        for c in CURVATURE_GRID:
            x = interior_points(rng, 200, 5, c)
            assert np.max(np.abs(hyp_distance(x, x, c))) <= 1e-12

    def test_one_dimensional_value(self):
        with mpmath.workdps(50):
            inner = (mpmath.mpf("0.5") - mpmath.mpf("0.3")) / (1 - mpmath.mpf("0.15"))
            expected = float(2 * mpmath.atanh(inner))
        d = hyp_distance(np.array([0.3]), np.array([0.5]), 1.0)
        assert d == pytest.approx(expected, abs=1e-12)
        # frozen from the arbitrary-precision oracle: 2*atanh(4/17)
        assert d == pytest.approx(0.479573, abs=1e-6)

    def test_symmetry(self):
        rng = np.random.default_rng(5)
        for c in CURVATURE_GRID:
            x = interior_points(rng, 10_000, 4, c)
            y = interior_points(rng, 10_000, 4, c)
            assert np.max(np.abs(hyp_distance(x, y, c) - hyp_distance(y, x, c))) <= 1e-12

    def test_triangle_inequality(self):
        rng = np.random.default_rng(6)
        for c in CURVATURE_GRID:
            x = interior_points(rng, 10_000, 4, c)
            y = interior_points(rng, 10_000, 4, c)
            z = interior_points(rng, 10_000, 4, c)
            lhs = hyp_distance(x, z, c)
            rhs = hyp_distance(x, y, c) + hyp_distance(y, z, c)
            assert np.all(lhs <= rhs + 1e-9)

    def test_euclidean_limit(self):
        rng = np.random.default_rng(7)
        c = 1e-6
        x = interior_points(rng, 10_000, 4, 1.0, radius=0.5)  # norms <= 0.5
        y = interior_points(rng, 10_000, 4, 1.0, radius=0.5)
        target = 2.0 * np.linalg.norm(x - y, axis=1)
        keep = target > 1e-9
        rel = np.abs(hyp_distance(x, y, c)[keep] - target[keep]) / target[keep]
        assert np.max(rel) <= 1e-4

    def test_rotation_isometry(self):
        rng = np.random.default_rng(8)
        q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
        for c in CURVATURE_GRID:
            x = interior_points(rng, 1000, 6, c)
            y = interior_points(rng, 1000, 6, c)
            d0 = hyp_distance(x, y, c)
            d1 = hyp_distance(x @ q.T, y @ q.T, c)
            assert np.max(np.abs(d0 - d1)) <= 1e-9

    def test_dist_to_origin_matches(self):
        rng = np.random.default_rng(9)
        c = 0.1
        y = interior_points(rng, 100, 3, c)
        full = hyp_distance(np.zeros_like(y), y, c)
        assert np.max(np.abs(dist_to_origin(y, c) - full)) <= 1e-9


class TestProjection:
    def test_interior_unchanged(self):
        rng = np.random.default_rng(10)
        c = 0.1
        y = interior_points(rng, 100, 4, c, radius=0.9)
        assert np.array_equal(project_to_ball(y, c), y)

    def test_rescaled_to_margin(self):
        c = 0.25
        y = np.array([4.0, 0.0])  # norm 2/sqrt(c)
        out = project_to_ball(y, c, eps=1e-5)
        assert np.linalg.norm(out) == pytest.approx((1 - 1e-5) / np.sqrt(c), rel=1e-12)
        assert out[1] == 0.0 and out[0] > 0
        assert np.all(project_to_ball(np.zeros(3), c) == 0)

    def test_curvature_validation(self):
        with pytest.raises(GeometryError):
            check_curvature(0.0)
        with pytest.raises(GeometryError):
            check_curvature(-1.0)
        with pytest.raises(GeometryError):
            check_curvature(float("inf"))
