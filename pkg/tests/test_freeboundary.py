import math
from fractions import Fraction

import numpy as np
import pytest

from thinfb.freeboundary import (ClassificationRecord, ClassifyConfig, classify_point, coincidence_mask,
                                 density_profile, enforce_gap, estimate_kappa, extended_free_boundary,
                                 extract_blowup, free_boundary, node_of, stratify, strata_json, strata_summary)
from thinfb.functionals import AnalyticField, QuadratureRule, default_ladder, frequency_profile
from thinfb.kernels import DomainError, WeightParam
from thinfb.polys import ParabolicPolynomial as P, caloric_extension, spatial_dimension, validate_P_kappa_plus
from thinfb.solver import HalfGrid, ScalarField, sample_field

ORIGIN = ((0.0,), 0.0)
CFG = ClassifyConfig()


def p2(a, n=1):
    return caloric_extension(P.monomial(n, (2,) + (0,) * (n - 1)), WeightParam(a))


def sampled(poly_or_fn, a=0, grid=HalfGrid(1, 33, 17, 8)):
    f = poly_or_fn.to_float() if isinstance(poly_or_fn, P) else poly_or_fn
    return sample_field(grid, WeightParam(a), f)


def profile_of(U, point=ORIGIN):
    return frequency_profile(U, default_ladder(U, CFG.rule, center=point), center=point)


class TestSets:
    def test_p2_contact_is_one_column(self):
        U = sampled(p2(0))
        lam = coincidence_mask(U)
        i0 = U.grid.origin_index()[0]
        expect = np.zeros_like(lam)
        expect[:, i0] = True
        assert np.array_equal(lam, expect)
        assert np.array_equal(extended_free_boundary(U), expect)

    def test_positive_field_has_no_boundary(self):
        U = sampled(lambda X, Y, t: 1 + X[..., 0] ** 2 + 0 * Y)
        assert not coincidence_mask(U).any()
        assert not extended_free_boundary(U).any()
        assert not free_boundary(U).any()

    def test_obstacle_shift(self):
        psi = lambda x, t: 0.5 + 0 * x[..., 0]
        U = sampled(lambda X, Y, t: 0.5 + X[..., 0] ** 2 + 0 * Y)
        i0 = U.grid.origin_index()[0]
        lam = coincidence_mask(U, psi)
        assert lam[:, i0].all() and lam.sum() == lam.shape[0]

    def test_regular_contact_half_line(self, regular_run):
        U, _ = regular_run
        x = U.grid.x
        assert np.array_equal(coincidence_mask(U)[-1], x <= 0)

    def test_regular_extended_boundary(self, regular_run):
        U, _ = regular_run
        g = U.grid
        gm = extended_free_boundary(U)[-1]
        hit = g.x[gm]
        assert 0.0 in hit
        assert np.max(np.abs(hit)) <= 2 * g.h_x + 1e-12

    def test_node_of(self):
        g = HalfGrid(1, 33, 17, 8)
        assert node_of(g, ((0.01,), -0.001)) == (8, 16)


class TestDensity:
    def test_full_mask(self):
        g = HalfGrid(1, 65, 9, 64)
        d = density_profile(np.ones((g.nt + 1,) + g.thin_shape, bool), g, ORIGIN)
        assert np.all(d.density == 1)

    def test_small_radius_unreliable(self):
        g = HalfGrid(1, 65, 9, 64)
        d = density_profile(np.ones((g.nt + 1,) + g.thin_shape, bool), g, ORIGIN, radii=[0.5, 2 * g.h_x])
        assert list(d.reliable) == [True, False]

    def test_p2_decays_like_h_over_r(self, p2_run):
        U, _ = p2_run
        d = density_profile(coincidence_mask(U), U.grid, ORIGIN)
        r = d.radii[d.reliable]
        dens = d.density[d.reliable]
        h = U.grid.h_x
        # one column out of roughly 2r/h: density = h / (2 r) up to rounding of node counts
        assert np.all(dens <= 1.5 * h / r)
        assert abs(d.slope + 1) < 0.15
        assert d.tends_to_zero(CFG.slope_threshold)

    def test_regular_half(self, regular_run):
        U, _ = regular_run
        g = U.grid
        d = density_profile(coincidence_mask(U), g, ORIGIN)
        sel = d.reliable & (d.radii >= 10 * g.h_x)
        assert sel.sum() >= 2
        assert np.all(np.abs(d.density[sel] - 0.5) < 0.05)
        assert not d.tends_to_zero(CFG.slope_threshold)


class TestKappa:
    def test_p2(self, p2_run):
        U, _ = p2_run
        est = estimate_kappa(profile_of(U), CFG, max(U.grid.h_x, U.grid.h_y))
        assert abs(est.kappa - 2) < 0.02 and not est.at_ceiling

    def test_regular(self, regular_run):
        U, _ = regular_run
        est = estimate_kappa(profile_of(U), CFG, max(U.grid.h_x, U.grid.h_y))
        assert abs(est.kappa - 1.5) < 0.02

    def test_zero_undefined(self):
        U = sampled(lambda X, Y, t: 0 * Y)
        est = estimate_kappa(profile_of(U), CFG)
        assert not est.defined

    def test_too_few_radii(self):
        S = AnalyticField.from_polynomial(p2(0), WeightParam(0))
        prof = frequency_profile(S, default_ladder(sampled(p2(0)), CFG.rule, count=3))
        with pytest.raises(DomainError):
            estimate_kappa(prof, CFG)


class TestBlowup:
    def test_exact_recovery(self):
        w = WeightParam(Fraction(1, 2))
        fit = extract_blowup(AnalyticField.from_polynomial(p2(w.a), w), ORIGIN, 2, r_fit=0.3)
        assert fit.residual < 1e-8
        diff = fit.polynomial - p2(w.a).to_float()
        assert max(abs(float(c)) for c in diff.terms.values()) < 1e-8

    @pytest.mark.parametrize("r_fit", [0.05, 0.1, 0.2])
    def test_quartic_perturbation(self, r_fit):
        eps = 0.1
        w = WeightParam(0)
        p4 = caloric_extension(P.monomial(1, (4,)), w)
        fit = extract_blowup(AnalyticField.from_polynomial(p2(0) + p4 * Fraction(1, 10), w), ORIGIN, 2, r_fit=r_fit)
        diff = fit.polynomial - p2(0).to_float()
        assert max(abs(float(c)) for c in diff.terms.values()) < 1e-8
        # residual = eps r^2 sqrt(H(p4, 1) / H(p2, 1)) = eps r^2 sqrt((3072/5) / (16/3))
        assert fit.residual == pytest.approx(eps * r_fit ** 2 * math.sqrt(576 / 5), rel=0.05)

    def test_conditioning_guard(self):
        w = WeightParam(0)
        with pytest.raises(DomainError, match="ill-conditioned"):
            extract_blowup(AnalyticField.from_polynomial(p2(0), w), ORIGIN, 4, r_fit=0.3, cond_max=1.0)

    def test_singular_run_blowup_admissible(self, p2_run):
        U, _ = p2_run
        fit = extract_blowup(U, ORIGIN, 2, r_fit=0.1)
        rep = validate_P_kappa_plus(fit.polynomial, U.w, 2, nonneg_tol=10 * fit.residual + 1e-12, caloric_tol=1e-8)
        assert rep.in_P_kappa_plus
        assert spatial_dimension(fit.polynomial, 2, rank_tol=1e-6) == 0


class TestClassify:
    def test_p2_singular(self, p2_run):
        U, _ = p2_run
        rec = classify_point(U, ORIGIN, CFG)
        assert rec.label == "singular" and rec.kappa_class == 2 and rec.d_kappa == 0
        assert abs(rec.kappa_hat - 2) < 0.02

    @pytest.mark.parametrize("c", [0.5, 2.0])
    def test_scale_invariance(self, p2_run, c):
        U, _ = p2_run
        base = classify_point(U, ORIGIN, CFG)
        V = ScalarField(U.grid, U.w, c * U.values, U.provenance, None, U.obstacle, U.meta)
        rec = classify_point(V, ORIGIN, CFG)
        assert rec.label == base.label and abs(rec.kappa_hat - base.kappa_hat) < CFG.class_tol

    def test_regular(self, regular_run):
        U, _ = regular_run
        rec = classify_point(U, ORIGIN, CFG)
        assert rec.label == "regular" and rec.kappa_class == 1.5

    def test_timelike(self, timelike_run):
        U, _ = timelike_run
        rec = classify_point(U, ORIGIN, CFG)
        assert rec.label == "singular" and rec.kappa_class == 2 and rec.d_kappa == 1

    def test_off_boundary_rejected(self, p2_run):
        U, _ = p2_run
        with pytest.raises(DomainError, match="not on the extended free boundary"):
            classify_point(U, ((0.3,), 0.0), CFG)

    def test_record_line(self, p2_run):
        U, _ = p2_run
        line = classify_point(U, ORIGIN, CFG).to_line()
        fields = dict(kv.split("=", 1) for kv in line.split(" "))
        assert fields["label"] == "singular" and fields["d_kappa"] == "0"
        assert fields["x"] == "0" and fields["t"] == "0"


def record(label, kappa, d=None, point=ORIGIN, kappa_class=None):
    return ClassificationRecord(point, kappa, 0.01, label, kappa_class=kappa_class, d_kappa=d)


class TestStratify:
    def test_two_strata(self):
        b = stratify([record("singular", 2.0, 0, kappa_class=2),
                      record("singular", 2.0, 1, ((0.1,), 0.0), kappa_class=2)], 1)
        assert set(b) == {(2, 0), (2, 1)}
        assert b[(2, 0)]["kind"] == "space-like" and b[(2, 1)]["kind"] == "time-like"
        assert b[(2, 0)]["count"] == b[(2, 1)]["count"] == 1
        assert "2 1 time-like 1" in strata_summary(b)
        assert '"count": 1' in strata_json(b)

    def test_empty(self):
        assert stratify([], 1) == {}

    def test_duplicates_counted(self):
        r = record("singular", 2.0, 0, kappa_class=2)
        b = stratify([r, r], 1)
        assert b[(2, 0)]["count"] == 2

    def test_non_singular_ignored(self):
        assert stratify([record("regular", 1.5)], 1) == {}

    def test_gap_enforced(self):
        recs = enforce_gap([record("regular", 1.75), record("regular", 1.52)], WeightParam(0))
        assert [r.label for r in recs] == ["undetermined", "regular"]
        assert "gap" in recs[0].diagnostics["inconsistency"]
