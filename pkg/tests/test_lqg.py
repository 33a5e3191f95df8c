import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import special

from cgmc.lqg import (
    HEAT_KERNEL_OFFSET,
    DomainError,
    PlanarDomain,
    SeriesBudgetError,
    basis_chaos,
    basis_gram_matrix,
    cayley,
    circle_average,
    circle_average_variance,
    conformal_exponent,
    conformal_invariance_first_moment,
    conformal_radius,
    conformal_radius_from_green,
    corrected_conformal_radius_from_green,
    disk_automorphism,
    disk_bump,
    gff_sample_basis,
    kpz_check,
    sc_constant,
    sc_inverse,
    sc_map,
    tachyon_condition,
    truncated_gff_covariance,
)

DISK = PlanarDomain("unit_disk")
SQUARE = PlanarDomain("unit_square")
UHP = PlanarDomain("upper_half_plane")
CENTRE = complex(0.5, 0.5)
# conformal radius of the unit square at its centre: 1 / K(1/sqrt 2) = 4 sqrt(pi) / Gamma(1/4)^2
SQUARE_CENTRE_RADIUS = 4 * math.sqrt(math.pi) / special.gamma(0.25) ** 2


class TestConformalRadius:
    def test_disk(self):
        assert conformal_radius(DISK, 0) == 1.0
        assert conformal_radius(DISK, 0.5) == pytest.approx(0.75, abs=1e-15)

    def test_half_plane(self):
        assert conformal_radius(UHP, 3.0 + 0.5j) == pytest.approx(1.0)

    @given(st.floats(0.0, 0.95), st.floats(0, 2 * math.pi))
    @settings(max_examples=100, deadline=None)
    def test_disk_closed_form(self, r, t):
        x = r * complex(math.cos(t), math.sin(t))
        assert conformal_radius(DISK, x) == pytest.approx(1 - abs(x) ** 2, abs=1e-10)

    def test_half_plane_via_cayley(self):
        # |phi'(x)| for phi = cayley, then the disk automorphism to the origin
        x = 0.3 + 0.7j
        w = cayley(x)
        h = 1e-6
        dw = (cayley(x + h) - cayley(x - h)) / (2 * h)
        assert (1 - abs(w) ** 2) / abs(dw) == pytest.approx(conformal_radius(UHP, x), rel=1e-8)

    def test_square_centre(self):
        assert sc_constant() == pytest.approx(SQUARE_CENTRE_RADIUS, rel=1e-12)
        assert conformal_radius(SQUARE, CENTRE) == pytest.approx(0.5393526, abs=1e-7)

    def test_square_symmetry(self):
        a = conformal_radius(SQUARE, complex(0.3, 0.6))
        assert conformal_radius(SQUARE, complex(0.7, 0.6)) == pytest.approx(a, rel=1e-10)
        assert conformal_radius(SQUARE, complex(0.6, 0.3)) == pytest.approx(a, rel=1e-10)

    def test_square_below_inradius_bound(self):
        # Koebe: dist <= C <= 4 dist
        for x in (complex(0.2, 0.5), complex(0.1, 0.1), complex(0.4, 0.45)):
            d = SQUARE.boundary_distance(x)
            assert d <= conformal_radius(SQUARE, x) <= 4 * d

    def test_outside(self):
        with pytest.raises(DomainError):
            conformal_radius(SQUARE, complex(1.5, 0.5))

    def test_sc_round_trip(self):
        for w in (0.3 + 0.2j, -0.5j, 0.7 * np.exp(0.3j)):
            assert sc_inverse(sc_map(w)) == pytest.approx(w, abs=1e-12)
        assert abs(sc_map(1 - 1e-12)) == pytest.approx(0.5, abs=1e-6)


class TestTruncatedCovariance:
    def test_symmetric(self):
        x, y = complex(0.3, 0.4), complex(0.6, 0.55)
        assert truncated_gff_covariance(SQUARE, x, y, 0.05, 0.1) == truncated_gff_covariance(SQUARE, y, x, 0.1, 0.05)

    def test_mass_reduces(self):
        a = truncated_gff_covariance(SQUARE, CENTRE, CENTRE, 0.1, 0.1)
        b = truncated_gff_covariance(SQUARE, CENTRE, CENTRE, 0.1, 0.1, m=2.0)
        assert b < a

    def test_monotone_in_cutoff(self):
        vals = [truncated_gff_covariance(SQUARE, CENTRE, CENTRE, 2.0**-j, 2.0**-j) for j in range(2, 6)]
        assert np.all(np.diff(vals) > 0)

    def test_off_diagonal_near_green(self):
        # once eps << |x - y| the value is close to the Green function of the square
        x, y = complex(0.4, 0.5), complex(0.6, 0.5)
        a = truncated_gff_covariance(SQUARE, x, y, 2**-6, 2**-6)
        b = truncated_gff_covariance(SQUARE, x, y, 2**-7, 2**-7)
        assert abs(a - b) < 1e-6

    def test_budget(self):
        with pytest.raises(SeriesBudgetError):
            truncated_gff_covariance(SQUARE, CENTRE, CENTRE, 1e-5, 1e-5)

    def test_other_domains(self):
        with pytest.raises(ValueError):
            truncated_gff_covariance(DISK, 0, 0, 0.1, 0.1)


class TestGreenRadius:
    @pytest.mark.parametrize("j", [5, 7])
    def test_offset_is_exact(self, j):
        # the uncorrected value sits at exp(HEAT_KERNEL_OFFSET) times the limit
        c = conformal_radius_from_green(SQUARE, CENTRE, 2.0**-j)
        assert c / SQUARE_CENTRE_RADIUS == pytest.approx(math.exp(HEAT_KERNEL_OFFSET), rel=1e-6)
        assert c / SQUARE_CENTRE_RADIUS == pytest.approx(0.9436822606, abs=1e-8)

    def test_offset_value(self):
        ref = (np.euler_gamma - math.log(2)) / 2
        # independent route: int e^{-|u|^2/2}/(2 pi) log(1/|u|) du in polar coordinates
        from scipy.integrate import quad

        val, _ = quad(lambda r: -r * math.exp(-r * r / 2) * math.log(r), 0, np.inf)
        assert HEAT_KERNEL_OFFSET == pytest.approx(ref)
        assert val == pytest.approx(ref, rel=1e-10)

    def test_corrected_converges(self):
        c = corrected_conformal_radius_from_green(SQUARE, complex(0.35, 0.6), 2**-6)
        assert c == pytest.approx(conformal_radius(SQUARE, complex(0.35, 0.6)), rel=1e-4)

    def test_boundary_margin(self):
        with pytest.raises(DomainError):
            conformal_radius_from_green(SQUARE, complex(0.5, 1e-4), 0.01)


class TestBasis:
    def test_gram_is_identity(self):
        g = basis_gram_matrix(6)
        assert np.abs(g - np.eye(36)).max() < 1e-12

    def test_reproducible_and_truncation(self):
        a = gff_sample_basis(8, 3, 4)
        b = gff_sample_basis(8, 3, [2, 3])
        assert np.array_equal(a.coeffs_x[2:], b.coeffs_x)
        assert not np.allclose(a.coeffs_x, a.coeffs_y)
        t = a.truncate(4)
        assert t.coeffs_x.shape == (4, 4, 4)
        with pytest.raises(ValueError):
            t.truncate(5)

    def test_pointwise_variance_matches_covariance_series(self):
        s = gff_sample_basis(40, 0)
        v = s.variance([CENTRE])[0]
        j = np.arange(1, 41)
        lam = math.pi**2 * (j[:, None] ** 2 + j[None, :] ** 2)
        ref = (8 * math.pi * np.outer(np.sin(j * math.pi / 2), np.sin(j * math.pi / 2)) ** 2 / lam).sum()
        assert v == pytest.approx(ref, rel=1e-12)

    def test_empirical_variance(self):
        s = gff_sample_basis(16, 1, 2000)
        x = s.field_x([CENTRE])[:, 0]
        assert np.var(x) == pytest.approx(s.variance([CENTRE])[0], rel=0.1)


class TestCircleAverage:
    def test_bessel_matches_trapezoid(self):
        s = gff_sample_basis(24, 2, 3)
        x, r = complex(0.4, 0.55), 0.2
        exact = circle_average(s, x, r)
        quad = circle_average(s, x, r, n_quadrature=512)
        assert np.allclose(exact, quad, atol=1e-12)

    def test_small_circle_gives_point_value(self):
        s = gff_sample_basis(1, 0)
        x = complex(0.5, 0.5)
        assert circle_average(s, x, 1e-5)[0] == pytest.approx(s.field_x([x])[0, 0], rel=1e-9)

    def test_variance_matches_samples(self):
        s = gff_sample_basis(32, 4, 2000)
        x, r = complex(0.5, 0.5), 0.125
        ca = circle_average(s, x, r)
        assert np.var(ca) == pytest.approx(circle_average_variance(32, x, r), rel=0.1)

    def test_variance_log_growth(self):
        # Var ~ log(1/r) + log C(x, D) once the modes resolve the circle
        x = complex(0.5, 0.5)
        for r in (2**-3, 2**-4):
            v = circle_average_variance(256, x, r)
            assert v == pytest.approx(math.log(1 / r) + math.log(SQUARE_CENTRE_RADIUS), abs=0.03)

    def test_circle_must_fit(self):
        s = gff_sample_basis(4, 0)
        with pytest.raises(DomainError):
            circle_average(s, complex(0.1, 0.5), 0.2)

    def test_chaos_with_zero_couplings(self):
        s = gff_sample_basis(8, 0, 2)
        pts = np.array([complex(0.3, 0.3), complex(0.6, 0.7)])
        w = np.array([0.25, 0.5])
        assert np.allclose(basis_chaos(s, 0.0, 0.0, pts, w), 0.75)


class TestTachyonAndKPZ:
    def test_examples(self):
        a = tachyon_condition(1.5, 0.5)
        assert a.satisfied and a.admissible and not a.special
        b = tachyon_condition(2.0, 0.0)
        assert b.satisfied and b.special and not b.admissible
        c = tachyon_condition(1.0, 1.0)
        assert c.satisfied and not c.admissible
        assert not tachyon_condition(1.5, 0.3).satisfied

    @given(st.floats(1.0, 2.0))
    @settings(max_examples=100, deadline=None)
    def test_line_gamma_plus_beta_two(self, g):
        assert abs(conformal_exponent(g, 2 - g)) < 1e-12

    def test_kpz(self):
        for beta in np.linspace(0, 1, 100, endpoint=False):
            r = kpz_check(float(beta))
            assert r.residual == 0.0
        assert kpz_check(0.0) == kpz_check(0.0).__class__(0.0, 0.0, 0.0)
        near = kpz_check(1 - 1e-12)
        assert (near.delta0, near.deltaq) == pytest.approx((0.25, 0.5))
        with pytest.raises(ValueError):
            kpz_check(1.0)


class TestConformalInvariance:
    def test_identity_map(self):
        r = conformal_invariance_first_moment(lambda z: z, lambda z: np.ones_like(z), 1.2, 0.3, disk_bump())
        assert r.residual == 0.0

    def test_tachyon_vs_control(self):
        _, dpsi, inv = disk_automorphism(0.4 + 0.2j)
        phi = disk_bump(0.1, 0.5)
        t = conformal_invariance_first_moment(inv, dpsi, 1.5, 0.5, phi)
        c = conformal_invariance_first_moment(inv, dpsi, 1.5, 0.3, phi)
        assert t.residual < 1e-8
        assert c.residual > 1e-3

    def test_automorphism(self):
        psi, dpsi, inv = disk_automorphism(0.3j)
        z = np.array([0.1, -0.2 + 0.5j])
        assert np.allclose(inv(psi(z)), z)
        h = 1e-6
        assert np.allclose(dpsi(z), (psi(z + h) - psi(z - h)) / (2 * h), rtol=1e-8)
        with pytest.raises(ValueError):
            disk_automorphism(1.0)
