import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

import oracles
from coulombgas.ensembles import Potential, sample_haar, sample_wigner, uniform_spectrum
from coulombgas.freeprob import (
    Density, InvalidDensityError, TricomiInput, arcsine_moments,
    density_from_green, interpolate_density, marchenko_pastur_density, potential_from_density,
    r_transform_uniform, semicircle_density, solve_green_grid, solve_green_uniform_plus_wigner,
    tricomi_Ip, tricomi_density,
)


@pytest.fixture(scope="module")
def rho2():
    return density_from_green(2.0)


@pytest.fixture(scope="module")
def rho20():
    return density_from_green(20.0)


class TestGreenSolver:
    def test_small_lambda_is_semicircle(self):
        z = 3 - 0.01j
        g = solve_green_uniform_plus_wigner(1e-8, z)
        assert abs(g - (z - np.sqrt(z * z - 4)) / 2) < 1e-4

    @pytest.mark.parametrize("lam", [0.3, 2.0, 20.0])
    def test_residual_and_branch(self, lam):
        x = np.linspace(-8, 8, 321)
        z = x - 1e-3j
        g, res = solve_green_grid(lam, z)
        k = math.sqrt(3 * lam)
        assert np.all(np.abs(z - k / np.tanh(k * g) - g) < 1e-12 * np.maximum(1, np.abs(z)))
        assert np.all(res < 1e-12 * np.maximum(1, np.abs(z)))
        assert np.all(g.imag > 0)

    def test_imaginary_axis(self):
        for y in (0.1, 1.0, 5.0):
            g = solve_green_uniform_plus_wigner(2.0, 1j * y)
            assert abs(g.real) < 1e-12
            assert g.imag < 0

    def test_far_field(self):
        z = 1e3 + 1j
        assert abs(solve_green_uniform_plus_wigner(2.0, z) * z - 1) < 1e-2

    def test_lambda_positive(self):
        with pytest.raises(ValueError):
            solve_green_grid(0.0, np.array([1.0 + 1j]))


class TestRTransform:
    def test_zero(self):
        assert abs(r_transform_uniform(2.0, 0.0)) == 0.0

    @pytest.mark.parametrize("lam", [0.5, 2.0])
    def test_slope_is_variance(self, lam):
        h = 1e-3
        d = (r_transform_uniform(lam, h) - r_transform_uniform(lam, -h)) / (2 * h)
        assert d.real == pytest.approx(lam, rel=1e-5)

    def test_series_branch_continuity(self):
        lam = 2.0
        w = 1e-4 / math.sqrt(3 * lam)
        a = r_transform_uniform(lam, w * (1 - 1e-9))
        b = r_transform_uniform(lam, w * (1 + 1e-9))
        assert abs(a - b) < 1e-10

    def test_additivity_defines_green(self):
        # B_Y(G) = R_uniform(G) + G + 1/G equals z at the solved G
        z = 0.7 - 0.2j
        g = solve_green_uniform_plus_wigner(2.0, z)
        assert abs(r_transform_uniform(2.0, g) + g + 1 / g - z) < 1e-12


class TestDensityFromGreen:
    def test_normalization(self, rho2, rho20):
        for rho in (rho2, rho20):
            assert abs(np.trapezoid(rho.values, rho.grid) - 1) < 2e-3
            assert not rho.flags["normalization_deficit"]
            assert rho.flags["dropped"] == 0

    def test_symmetry(self, rho2):
        np.testing.assert_allclose(rho2.values, rho2.values[::-1], atol=1e-6)

    def test_second_moment(self, rho2):
        # variance adds under free convolution: lambda * 1 + 1
        assert np.trapezoid(rho2.grid**2 * rho2.values, rho2.grid) == pytest.approx(3.0, abs=5e-3)

    def test_against_empirical_spectrum(self, rho2):
        n, lam = 2000, 2.0
        rng = np.random.default_rng(21)
        u = sample_haar(n, 2, rng)
        y = math.sqrt(lam) * (u.conj().T * uniform_spectrum(n)) @ u + sample_wigner(n, 2, rng)
        ev = np.linalg.eigvalsh(0.5 * (y + y.conj().T))
        x = rho2.grid
        assert oracles.ks_distance(ev, x, rho2.cdf(x)) < 0.02

    def test_eps_validation(self):
        with pytest.raises(ValueError):
            density_from_green(2.0, eps=0.0)


class TestArcsineMoments:
    def test_low_orders(self):
        a, b = -0.5, 2.5
        m, s = 1.0, 1.5
        assert arcsine_moments(a, b, 0) == pytest.approx(1.0, abs=1e-15)
        assert arcsine_moments(a, b, 1) == pytest.approx(m, rel=1e-15)
        assert arcsine_moments(a, b, 2) == pytest.approx(s * s / 2 + m * m, rel=1e-15)

    def test_inverse_moment(self):
        assert arcsine_moments(1, 3, -1) == pytest.approx(1 / math.sqrt(3), rel=1e-15)
        assert arcsine_moments(-3, -1, -1) == pytest.approx(-1 / math.sqrt(3), rel=1e-15)
        with pytest.raises(ValueError):
            arcsine_moments(-1, 1, -1)

    def test_inverse_moment_quadrature(self):
        val, _ = integrate.quad(lambda t: 1 / t, 1, 3, weight="alg", wvar=(-0.5, -0.5))
        assert arcsine_moments(1, 3, -1) == pytest.approx(val / math.pi, rel=1e-10)

    @settings(max_examples=25, deadline=None)
    @given(st.floats(-3, 3), st.floats(0.05, 3), st.integers(0, 7))
    def test_chebyshev_oracle(self, a, width, p):
        b = a + width
        assert arcsine_moments(a, b, p) == pytest.approx(
            oracles.arcsine_moment_chebyshev(a, b, p), rel=1e-10, abs=1e-10)

    @settings(max_examples=25, deadline=None)
    @given(st.floats(-3, 3), st.floats(0.05, 3), st.integers(0, 7))
    def test_reflection(self, a, width, p):
        b = a + width
        assert arcsine_moments(-b, -a, p) == pytest.approx(
            (-1) ** p * arcsine_moments(a, b, p), rel=1e-12, abs=1e-12)


def _pv_oracle(y, a, b, p):
    f = lambda x: math.sqrt(max((x - a) * (b - x), 0.0)) * x**p
    val, _ = integrate.quad(f, a, b, weight="cauchy", wvar=y, limit=200)
    return -val / math.pi


class TestTricomiIp:
    def test_i0_inside(self):
        y = np.linspace(-0.4, 2.4, 7)
        np.testing.assert_allclose(tricomi_Ip(y, -0.5, 2.5, 0), y - 1.0, rtol=1e-14)

    def test_i1_at_center(self):
        assert tricomi_Ip(0.0, -2.0, 2.0, 1) == pytest.approx(-2.0, rel=1e-14)

    def test_inverse(self):
        assert tricomi_Ip(2.0, 1.0, 3.0, -1) == pytest.approx(1 - math.sqrt(3) / 2, rel=1e-14)
        with pytest.raises(ValueError):
            tricomi_Ip(0.5, -1.0, 1.0, -1)

    @pytest.mark.parametrize("p", [-1, 0, 1, 2, 3])
    @pytest.mark.parametrize("y", [1.3, 2.0, 2.9])
    def test_principal_value_quadrature(self, p, y):
        assert tricomi_Ip(y, 1.0, 3.0, p) == pytest.approx(_pv_oracle(y, 1.0, 3.0, p), rel=1e-8)

    @pytest.mark.parametrize("p", [0, 1, 2, 3])
    def test_principal_value_straddling_zero(self, p):
        assert tricomi_Ip(0.4, -1.2, 2.0, p) == pytest.approx(_pv_oracle(0.4, -1.2, 2.0, p),
                                                              rel=1e-8, abs=1e-10)


class TestTricomiDensity:
    def test_arcsine(self):
        rho = tricomi_density(TricomiInput((0, 0, 0, 0, 0), -1.0, 2.0))
        y = np.linspace(-0.9, 1.9, 11)
        np.testing.assert_allclose(rho.pdf(y), 1 / (math.pi * np.sqrt((y + 1) * (2 - y))), rtol=1e-13)
        assert rho.mass() == pytest.approx(1.0, abs=1e-6)

    def test_semicircle(self):
        rho = tricomi_density(TricomiInput((0, 0, 0.5, 0, 0), -2.0, 2.0))
        y = np.linspace(-1.9, 1.9, 3801)
        assert np.max(np.abs(rho.pdf(y) - oracles.semicircle_pdf(y))) < 1e-8
        assert rho.params["C"] == pytest.approx(1.0, abs=1e-14)

    def test_inverse_term(self):
        inp = TricomiInput((1, 0, 0, 0, 0), 1.0, 3.0)
        rho = tricomi_density(inp)
        C = rho.params["C"]
        y = np.linspace(1.2, 2.8, 9)
        expected = (math.sqrt(3) / y + C - 1) / (math.pi * np.sqrt((y - 1) * (3 - y)))
        np.testing.assert_allclose(rho.pdf(y), expected, rtol=1e-13)
        assert rho.mass() == pytest.approx(1.0, abs=1e-6)

    def test_marchenko_pastur(self):
        # MP alpha = 1/2 through G' = V'/4 with the Wishart potential
        alpha = 0.5
        a, b = (1 - math.sqrt(alpha)) ** 2, (1 + math.sqrt(alpha)) ** 2
        pot = Potential.wishart(alpha)
        inp = TricomiInput((pot.log_coeff / 4, pot.poly_coeffs[0] / 4, 0, 0, 0), a, b)
        rho = tricomi_density(inp)
        y = np.linspace(a + 0.01, b - 0.01, 50)
        np.testing.assert_allclose(rho.pdf(y), oracles.mp_pdf(y, alpha), rtol=1e-9)

    @pytest.mark.parametrize("g3", [0.0, 0.02])
    def test_hard_wall_normalized(self, g3):
        # support narrower than the soft-edge one: inverse square-root walls
        rho = tricomi_density(TricomiInput((0, 0, 0.5, 0.05, g3), -1.5, 1.5))
        assert rho.mass() == pytest.approx(1.0, abs=1e-6)
        fine = np.linspace(-1.5, 1.5, 2001)[1:-1]
        assert np.all(rho.pdf(fine) > 0)

    def test_negative_density(self):
        with pytest.raises(InvalidDensityError):
            tricomi_density(TricomiInput((0, 0, 0.5, 0, 0), -4.0, 4.0))

    def test_input_validation(self):
        with pytest.raises(ValueError):
            TricomiInput((1, 0, 0, 0, 0), -1.0, 1.0)
        with pytest.raises(ValueError):
            TricomiInput((0, 0, 0, 0), -1.0, 1.0)
        with pytest.raises(ValueError):
            TricomiInput((0, 0, 0, 0, 0), 1.0, -1.0)


class TestPotentialFromDensity:
    def test_semicircle(self):
        pot = potential_from_density(semicircle_density())
        x = np.linspace(-1.8, 1.8, 37)
        np.testing.assert_allclose(pot.value(x), x**2, atol=1e-3)

    def test_hilbert_of_semicircle(self):
        from coulombgas.freeprob import hilbert_transform
        x = np.linspace(-1.9, 1.9, 21)
        np.testing.assert_allclose(hilbert_transform(semicircle_density(), x),
                                   oracles.hilbert_semicircle(x), atol=1e-6)

    @pytest.mark.parametrize("beta", [1, 2])
    def test_marchenko_pastur(self, beta):
        rho = marchenko_pastur_density(0.5)
        pot = potential_from_density(rho, beta)
        a, b = rho.support
        x = np.linspace(a + 0.1 * (b - a), b - 0.1 * (b - a), 30)
        np.testing.assert_allclose(pot.derivative(x), Potential.wishart(0.5).derivative(x), atol=2e-2)

    def test_translation(self):
        c = 0.7
        sc = semicircle_density()
        shifted = Density((-2 + c, 2 + c), "shifted", pdf_fn=lambda x: sc.pdf_fn(x - c))
        p0, p1 = potential_from_density(sc), potential_from_density(shifted)
        x = np.linspace(-1.5, 1.5, 31)
        np.testing.assert_allclose(p1.value(x + c), p0.value(x), atol=1e-3)


class TestInterpolation:
    def test_semicircle(self):
        x = np.arange(-2.0, 2.0 + 5e-4, 1e-3)
        rho = interpolate_density(x, oracles.semicircle_pdf(x))
        t = np.linspace(-1.9, 1.9, 7777)
        assert np.max(np.abs(rho.pdf(t) - oracles.semicircle_pdf(t))) < 1e-5

    def test_constant(self):
        x = np.linspace(0, 4, 9)
        rho = interpolate_density(x, np.full(9, 0.25))
        np.testing.assert_allclose(rho.pdf(np.linspace(0.1, 3.9, 17)), 0.25, rtol=1e-14)

    def test_integral_consistency(self):
        x = np.arange(-6.0, 6.0 + 5e-4, 1e-3)
        y = np.exp(-x * x / 2) / math.sqrt(2 * math.pi)
        rho = interpolate_density(x, y)
        assert float(rho.interpolant.integrate(x[0], x[-1])) == pytest.approx(
            np.trapezoid(y, x), abs=1e-6)

    def test_rejects_non_monotone(self):
        with pytest.raises(ValueError):
            interpolate_density([0, 1, 1, 2], [0, 1, 1, 0])


class TestDensityType:
    def test_negative_values_rejected(self):
        with pytest.raises(ValueError):
            Density((0, 1), grid=np.array([0.0, 1.0]), values=np.array([1.0, -1.0]))

    def test_deficit_flag(self):
        d = Density((0, 1), grid=np.linspace(0, 1, 11), values=np.full(11, 0.5))
        assert d.flags["normalization_deficit"]

    def test_closed_forms_normalized(self):
        assert semicircle_density().mass() == pytest.approx(1.0, abs=1e-8)
        assert marchenko_pastur_density(0.5).mass() == pytest.approx(1.0, abs=1e-8)
