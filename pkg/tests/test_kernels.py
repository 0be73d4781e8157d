import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import special

from thinfb.kernels import (DomainError, KernelEvalPolicy, WeightParam, bessel_i, euclidean_heat_kernel,
                            heat_kernel_1d, kernel_selftest, log_bessel_i, neumann_fundamental)


def scipy_heat_kernel(a, y, eta, t):
    """Independent oracle: ``(2t)^{-1} (y eta)^{(1-a)/2} e^{-(y^2+eta^2)/4t} I_{(a-1)/2}(y eta / 2t)``."""
    nu = (a - 1) / 2
    z = y * eta / (2 * t)
    if z == 0:
        return (4 * t) ** ((1 - a) / 2) / (2 * t) * math.exp(-(y * y + eta * eta) / (4 * t)) / math.gamma((1 + a) / 2)
    return (y * eta) ** ((1 - a) / 2) / (2 * t) * special.ive(nu, z) * math.exp(z - (y * y + eta * eta) / (4 * t))


class TestBessel:
    def test_half_integer_sinh(self):
        closed = math.sqrt(2 / (math.pi * 2)) * math.sinh(2)
        assert abs(closed - 2.0462369) < 1e-6
        assert abs(bessel_i(0.5, 2.0) - closed) < 1e-6

    def test_vanishes_at_zero_for_positive_order(self):
        assert bessel_i(0.25, 0.0) == 0

    def test_half_integer_cosh(self):
        closed = math.sqrt(2 / math.pi) * math.cosh(1)
        assert abs(bessel_i(-0.5, 1.0) - closed) < 1e-12
        # the tabulated 1.2312005 differs from the closed form by 3e-7
        assert abs(bessel_i(-0.5, 1.0) - 1.2312005) < 1e-6

    @given(nu=st.floats(-0.99, 3.0, allow_subnormal=False), z=st.floats(1e-3, 200.0))
    @settings(max_examples=60, deadline=None)
    def test_against_scipy(self, nu, z):
        ref = math.log(special.ive(nu, z)) + z
        assert abs(log_bessel_i(nu, z) - ref) <= 1e-9 * max(1.0, abs(ref))

    def test_large_argument_finite_in_log(self):
        v = log_bessel_i(0.3, 1e5)
        assert math.isfinite(v)
        assert abs(v - (math.log(special.ive(0.3, 1e5)) + 1e5)) < 1e-8 * 1e5

    def test_rejects_negative_argument(self):
        with pytest.raises(DomainError):
            bessel_i(0.5, -1.0)

    def test_policy_validation(self):
        with pytest.raises(DomainError):
            KernelEvalPolicy(series_terms_max=5)


class TestHeatKernel:
    def test_origin_value(self):
        assert abs(heat_kernel_1d(WeightParam(0), 0.0, 0.0, 1.0) - 1 / math.sqrt(math.pi)) < 1e-12

    @pytest.mark.parametrize("t", [0.0, -0.5])
    def test_zero_for_nonpositive_time(self, t):
        assert heat_kernel_1d(WeightParam(Fraction(1, 3)), 0.4, 0.2, t) == 0

    def test_parabolic_scaling(self):
        w = WeightParam(0.5)
        lhs = heat_kernel_1d(w, 0.6, 1.4, 0.8)
        rhs = 2 ** -1.5 * heat_kernel_1d(w, 0.3, 0.7, 0.2)
        assert abs(lhs / rhs - 1) < 1e-12

    def test_a_zero_is_reflected_gaussian(self):
        y, eta, t = 0.3, 0.9, 0.4
        ref = (math.exp(-(y - eta) ** 2 / (4 * t)) + math.exp(-(y + eta) ** 2 / (4 * t))) / math.sqrt(4 * math.pi * t)
        assert abs(heat_kernel_1d(WeightParam(0), y, eta, t) - ref) < 1e-13

    @given(a=st.floats(-0.95, 0.95), y=st.floats(0.0, 5.0, allow_subnormal=False),
           eta=st.floats(0.0, 5.0, allow_subnormal=False), t=st.floats(0.01, 4.0))
    @settings(max_examples=80, deadline=None)
    def test_against_scipy_formula(self, a, y, eta, t):
        ref = scipy_heat_kernel(a, y, eta, t)
        got = heat_kernel_1d(WeightParam(a), y, eta, t)
        assert got == pytest.approx(ref, rel=1e-9, abs=1e-300)

    def test_symmetric(self):
        w = WeightParam(-0.3)
        assert heat_kernel_1d(w, 0.2, 1.1, 0.5) == pytest.approx(heat_kernel_1d(w, 1.1, 0.2, 0.5), rel=1e-14)

    def test_far_tail_underflows_to_zero_not_nan(self):
        v = heat_kernel_1d(WeightParam(0.2), 0.0, 500.0, 1e-3)
        assert v == 0.0

    def test_euclidean_normalization(self):
        x = np.linspace(-12, 12, 4001)[:, None]
        vals = euclidean_heat_kernel(x, np.zeros(1), 1.0)
        assert abs(np.trapezoid(vals, x[:, 0]) - 1) < 1e-10


class TestNeumannFundamental:
    def test_origin_value(self):
        v = neumann_fundamental(WeightParam(0), 1, np.zeros(2), 1.0)
        assert abs(v - 1 / (2 * math.pi)) < 1e-12

    def test_backward_scaling(self):
        w = WeightParam(0.5)
        X = np.array([0.1, 0.2, 0.3])
        lam = 2.0
        ratio = neumann_fundamental(w, 2, lam * X, lam ** 2 * -0.25, backward=True) / \
            neumann_fundamental(w, 2, X, -0.25, backward=True)
        assert abs(ratio - lam ** -(2 + 0.5 + 1)) < 1e-12

    def test_generator_eigenfunction(self):
        # Z G = <X, grad G> + 2 t G_t = -(n + a + 1) G, by central differences
        w, n = WeightParam(-0.4), 1
        X, t, h = np.array([0.5, 0.5]), -0.5, 1e-5
        G = lambda X, t: neumann_fundamental(w, n, X, t, backward=True)
        g0 = G(X, t)
        ZG = 0.0
        for i in range(2):
            e = np.zeros(2)
            e[i] = h
            ZG += X[i] * (G(X + e, t) - G(X - e, t)) / (2 * h)
        ZG += 2 * t * (G(X, t + h) - G(X, t - h)) / (2 * h)
        assert abs(ZG / g0 + (n + w.af + 1)) < 1e-6

    def test_domain(self):
        w = WeightParam(0)
        with pytest.raises(DomainError):
            neumann_fundamental(w, 1, np.array([0.0, -0.1]), 1.0)
        with pytest.raises(DomainError):
            neumann_fundamental(w, 1, np.zeros(2), 0.5, backward=True)
        with pytest.raises(DomainError):
            neumann_fundamental(w, 1, np.zeros(2), -0.5)


class TestSelftest:
    def test_mass(self):
        rep = kernel_selftest(WeightParam(0.5), y=1.0, t_mass=1.0, tol=1e-6)
        assert rep.checks[0].name == "mass" and rep.checks[0].defect < 1e-6

    def test_semigroup(self):
        rep = kernel_selftest(WeightParam(-0.3), sg_y=0.5, sg_eta=1.5, sg_s=0.3, sg_t=0.7, tol_semigroup=1e-5)
        assert rep.checks[1].defect < 1e-5

    def test_strip_mass(self):
        rep = kernel_selftest(WeightParam(0.5), n=1, r=0.5)
        assert abs(rep.checks[2].value - 1) < 1e-4
        assert rep.passed

    def test_starved_quadrature_reports_failure(self):
        rep = kernel_selftest(WeightParam(0.5), tol=1e-12, nodes_max=16)
        assert not rep.passed
        assert all("defect=" in ln for ln in rep.lines())

    def test_rejects_bad_tolerance(self):
        with pytest.raises(DomainError):
            kernel_selftest(WeightParam(0), tol=0.0)

    def test_weight_param(self):
        assert WeightParam(0).a == Fraction(0)
        assert WeightParam.from_s(Fraction(1, 4)).a == Fraction(1, 2)
        with pytest.raises(DomainError):
            WeightParam(Fraction(3, 2))
        with pytest.raises(DomainError):
            WeightParam(-1)
