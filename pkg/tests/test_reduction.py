from fractions import Fraction

import numpy as np
import pytest

from conftest import cached
from thinfb.freeboundary import coincidence_mask, extended_free_boundary
from thinfb.kernels import DomainError, WeightParam
from thinfb.polys import ParabolicPolynomial as P, caloric_extension
from thinfb.reduction import (CutoffSpec, GridSource, ObstacleSpec, globalize, growth_bounds_check,
                              obstacle_preset, subtract_obstacle, taylor_order)
from thinfb.solver import HalfGrid, sample_field

GRID = HalfGrid(1, 33, 17, 8)


def parabolic_dist(g):
    X, Y = g.bulk_points()
    return np.sqrt(np.sum(X * X, axis=-1)[None] + Y[None] ** 2 + np.abs(g.t)[:, None, None])


class TestObstacleSpec:
    def test_quadratic_heat(self):
        psi = obstacle_preset("quadratic")
        x = np.array([[0.3], [-0.7]])
        np.testing.assert_allclose(psi.heat(x, -0.2), 1.0)
        np.testing.assert_allclose(psi(x, -0.2), x[:, 0] ** 2 - 0.2)
        np.testing.assert_allclose(psi.grad(x, -0.2)[:, 0], 2 * x[:, 0])

    def test_exact_derivatives(self):
        psi = ObstacleSpec("x1**3/3 + x1*t", 1)
        assert psi.derivative((2,), 0, (0.5,), 0.0) == Fraction(1)
        assert psi.derivative((1,), 0, (0.5,), -0.25) == Fraction(0)
        assert psi.derivative((1,), 1, (0.0,), 0.0) == Fraction(1)

    def test_irrational_derivative_is_float(self):
        psi = obstacle_preset("sine")
        assert psi.derivative((1,), 0, (1.0,), 0.0) == pytest.approx(np.cos(1.0), rel=1e-14)

    def test_presets(self):
        assert obstacle_preset("zero", 2)(np.zeros((3, 2)), 0.0).tolist() == [0, 0, 0]
        assert obstacle_preset("sine").ell == 4.0
        custom = obstacle_preset("custom", 1, "1 * x1^2; 2 * x1^0 * t")
        assert custom(np.array([[2.0]]), -1.0)[0] == pytest.approx(2.0)

    @pytest.mark.parametrize("name,coeffs", [("custom", None), ("custom", "1 x1^2"), ("hyperbolic", None)])
    def test_preset_errors(self, name, coeffs):
        with pytest.raises(DomainError):
            obstacle_preset(name, 1, coeffs)

    def test_unknown_symbol(self):
        with pytest.raises(DomainError):
            ObstacleSpec("x1 + z", 1)

    def test_from_polynomial(self):
        p = P.x(2, 0) ** 2 + P.t(2) * 3
        psi = ObstacleSpec.from_polynomial(p)
        assert psi(np.array([[1.0, 5.0]]), 2.0)[0] == pytest.approx(7.0)
        with pytest.raises(DomainError):
            ObstacleSpec.from_polynomial(P.y(1) ** 2)


class TestTaylorOrder:
    @pytest.mark.parametrize("ell,k", [(4.0, 3), (3.5, 3), (3.0, 2), (2.2, 2), (5.999, 5)])
    def test_rule(self, ell, k):
        assert taylor_order(ell) == k

    def test_below_two(self):
        with pytest.raises(DomainError):
            taylor_order(1.5)


class TestSubtract:
    def test_zero_obstacle(self):
        U = sample_field(GRID, WeightParam(0), lambda X, Y, t: X[..., 0] ** 2 - Y ** 2)
        W, Ft = subtract_obstacle(U, obstacle_preset("zero"))
        assert np.array_equal(W.values, U.values)
        X, Y = GRID.bulk_points()
        assert np.all(Ft(X, Y, -0.1) == 0)

    def test_quadratic_source_is_one(self):
        U = sample_field(GRID, WeightParam(0), lambda X, Y, t: 1 + 0 * Y)
        W, Ft = subtract_obstacle(U, obstacle_preset("quadratic"))
        X, Y = GRID.bulk_points()
        np.testing.assert_allclose(Ft(X, Y, -0.1), 1.0)
        np.testing.assert_allclose(W.values[-1], 1 - X[..., 0] ** 2)

    def test_constant(self):
        U = sample_field(GRID, WeightParam(0.5), lambda X, Y, t: 2 + Y ** 2)
        W, Ft = subtract_obstacle(U, ObstacleSpec("3/2", 1))
        np.testing.assert_allclose(W.values, U.values - 1.5)
        X, Y = GRID.bulk_points()
        assert np.all(Ft(X, Y, 0.0) == 0)

    def test_dimension_mismatch(self):
        U = sample_field(GRID, WeightParam(0), lambda X, Y, t: 0 * Y)
        with pytest.raises(DomainError):
            subtract_obstacle(U, obstacle_preset("zero", 2))


class TestCutoff:
    def test_shape(self):
        c = CutoffSpec()
        rho = np.linspace(0, 1.2, 49)
        z1 = c.zeta1(rho)[0]
        assert np.all((z1 >= 0) & (z1 <= 1))
        assert np.all(z1[rho <= 0.75] == 1) and np.all(z1[rho >= 1] == 0)
        z2 = c.zeta2(rho)[0]
        assert np.all(z2[rho <= 0.75] == 1) and np.all(z2[rho >= 1] == 0)
        np.testing.assert_array_equal(c.zeta2(-rho)[0], z2)

    def test_not_order_y_rejected(self):
        with pytest.raises(DomainError, match="O\\(y\\)"):
            CutoffSpec(profile="linear", y_variable="abs", inner_y=0.0)

    def test_invalid(self):
        with pytest.raises(DomainError):
            CutoffSpec(inner=1.0, outer=0.5)
        with pytest.raises(DomainError):
            CutoffSpec(profile="cubic")

    @pytest.mark.parametrize("a", [-0.5, 0.0, 0.6])
    def test_weighted_laplacian_by_differences(self, a):
        c = CutoffSpec(inner=0.3, outer=1.0, inner_y=0.0)
        w = WeightParam(a)
        h = 1e-4
        X = np.array([[0.5, 0.2], [0.8, -0.3], [0.1, 0.6]])
        Y = np.array([0.35, 0.05, 0.8])
        z, grad, L = c.evaluate(X, Y, w)
        f = lambda X, Y: c.evaluate(X, Y, w)[0]
        lap = 0.0
        for i in range(2):
            e = np.zeros(2)
            e[i] = h
            lap = lap + (f(X + e, Y) - 2 * z + f(X - e, Y)) / h ** 2
            np.testing.assert_allclose(grad[:, i], (f(X + e, Y) - f(X - e, Y)) / (2 * h), atol=1e-6)
        zy = (f(X, Y + h) - f(X, Y - h)) / (2 * h)
        lap = lap + (f(X, Y + h) - 2 * z + f(X, Y - h)) / h ** 2 + a * zy / Y
        np.testing.assert_allclose(L, lap, atol=1e-4)

    def test_weighted_laplacian_finite_at_thin(self):
        c = CutoffSpec(inner=0.3, outer=1.0, inner_y=0.0)
        _, grad, L = c.evaluate(np.array([[0.5]]), np.array([0.0]), WeightParam(-0.7))
        assert np.isfinite(L).all() and grad[0, -1] == 0


class TestGridSource:
    def test_node_lookup_and_interpolation(self):
        g = GRID
        X, Y = g.bulk_points()
        vals = np.stack([X[..., 0] + 2 * Y + tm for tm in g.t])
        src = GridSource(g, vals)
        assert np.array_equal(src(X, Y, g.t[3]), vals[3])
        x = np.array([[0.013]])
        assert src(x, np.array([0.21]), -0.1)[0] == pytest.approx(0.013 + 0.42 - 0.1, abs=1e-12)


class TestGlobalize:
    @pytest.mark.parametrize("a", [Fraction(0), Fraction(1, 2)])
    def test_polynomial_obstacle_cancels(self, a):
        w = WeightParam(a)
        psi = obstacle_preset("quadratic")
        qt = caloric_extension(P.x(1, 0) ** 2 + P.t(1), w).to_float()
        U = sample_field(GRID, w, qt)
        red = globalize(U, psi, k=2)
        assert red.q_k == P.x(1, 0) ** 2 + P.t(1)
        assert np.max(np.abs(red.V.values)) < 1e-13
        assert np.max(np.abs(red.F_k)) < 1e-12

    def test_needs_order(self):
        U = sample_field(GRID, WeightParam(0), lambda X, Y, t: 0 * Y)
        with pytest.raises(DomainError):
            globalize(U, obstacle_preset("quadratic"))
        with pytest.raises(DomainError):
            globalize(U, obstacle_preset("quadratic"), k=1)

    def test_sine_growth_and_boundary(self, sine_run):
        U, pr = sine_run
        red = globalize(U, pr.obstacle)
        assert red.k == 3 and red.q_k == P.x(1, 0) - P.x(1, 0) ** 3 * Fraction(1, 6)
        rep = growth_bounds_check(red.F_k, U.grid, 4.0)
        assert rep.finite
        inner = np.abs(U.grid.x) <= 0.75
        g1 = extended_free_boundary(U, pr.obstacle)[:, inner]
        g2 = extended_free_boundary(red.V)[:, inner]
        assert g1.any() and np.array_equal(g1, g2)
        assert np.array_equal(coincidence_mask(U, pr.obstacle)[:, inner], coincidence_mask(red.V)[:, inner])

    def test_sine_constants_stable(self, sine_run):
        U, pr = sine_run
        coarse, _ = cached("sine-obstacle", "grid.nx=33", "grid.ny=33", "grid.nt=64")
        M = []
        for V in (coarse, U):
            red = globalize(V, pr.obstacle)
            M.append(growth_bounds_check(red.F_k, V.grid, 4.0))
        assert M[1].M_value == pytest.approx(M[0].M_value, rel=0.05)
        assert M[1].M_gradient == pytest.approx(M[0].M_gradient, rel=0.05)

    def test_constants_shrink_with_region(self, sine_run):
        U, pr = sine_run
        Fk = globalize(U, pr.obstacle).F_k
        big, small = (growth_bounds_check(Fk, U.grid, 4.0, region=r) for r in (0.5, 0.25))
        assert small.M_value <= big.M_value and small.M_gradient <= big.M_gradient


class TestGrowth:
    def test_zero(self):
        rep = growth_bounds_check(np.zeros((GRID.nt + 1,) + GRID.shape), GRID, 4.0)
        assert rep.M_value == rep.M_gradient == rep.M_time == 0

    def test_synthetic_power(self):
        g = HalfGrid(1, 65, 33, 64)
        rep = growth_bounds_check(parabolic_dist(g) ** 2, g, 4.0)
        assert rep.M_value == pytest.approx(1.0, rel=1e-12)
        assert rep.as_dict()["ell"] == 4.0

    def test_callable_source(self):
        rep = growth_bounds_check(lambda X, Y, t: np.ones(np.shape(Y)), GRID, 2.0)
        assert rep.M_value == pytest.approx(1.0) and rep.M_gradient == 0
