import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from coulombgas.coulomb import (
    CollisionError, DivergenceError, PositivityError, SolverOptions, bh_free_energy,
    denoise_operator_bh, denoise_operator_exact, empirical_moments, resolvent,
    run_population_dynamics, solve_denoising, solve_warmup, warmup_equilibrium, warmup_operator,
)
from coulombgas.ensembles import Potential, potential_derivative

WIGNER = Potential.wigner()


def _semicircle_quantiles(n):
    # deterministic semicircle sample from the inverse CDF
    x = np.linspace(-2, 2, 20001)
    cdf = 0.5 + x * np.sqrt(4 - x * x) / (4 * math.pi) + np.arcsin(x / 2) / math.pi
    return np.interp((np.arange(n) + 0.5) / n, cdf, x)


class TestResolvent:
    def test_two_particles(self):
        np.testing.assert_allclose(resolvent([-1.0, 1.0]), [-0.25, 0.25], rtol=1e-15)

    def test_collision(self):
        with pytest.raises(CollisionError):
            resolvent([0.0, 1.0, 1.0])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=2, max_size=40, unique=True))
    def test_sum_zero_and_direct_sum(self, xs):
        x = np.array(xs)
        if np.min(np.diff(np.sort(x))) < 1e-6:
            return
        r = resolvent(x)
        d = x[:, None] - x[None, :]
        np.fill_diagonal(d, np.inf)
        np.testing.assert_allclose(r, np.sum(1 / d, axis=1) / x.size, rtol=1e-9, atol=1e-9)
        assert abs(r.sum()) < 1e-9 * max(1.0, np.abs(r).max() * x.size)

    def test_antisymmetric(self):
        x = np.array([-2.0, -0.7, -0.1, 0.1, 0.7, 2.0])
        np.testing.assert_allclose(resolvent(x), -resolvent(x)[::-1], rtol=1e-14)

    def test_permutation_equivariant(self):
        x = np.random.default_rng(0).normal(size=30)
        p = np.random.default_rng(1).permutation(30)
        np.testing.assert_array_equal(resolvent(x[p]), resolvent(x)[p])


class TestWarmupOperator:
    def test_two_particle_fixed_point(self):
        t = 1 / math.sqrt(2)
        np.testing.assert_allclose(warmup_operator([-t, t], WIGNER), 0.0, atol=1e-12)

    def test_semicircle_is_near_equilibrium(self):
        lam = _semicircle_quantiles(512)
        assert np.max(np.abs(warmup_operator(lam, WIGNER))) < 0.05

    @pytest.mark.parametrize("c", [0.8, 1.25])
    def test_rescaled_is_not_equilibrium(self, c):
        t = 1 / math.sqrt(2)
        assert np.max(np.abs(warmup_operator([-c * t, c * t], WIGNER))) > 1e-2

    def test_beta_independent(self):
        x = np.array([-1.0, 0.2, 0.9])
        np.testing.assert_array_equal(warmup_operator(x, WIGNER, 1), warmup_operator(x, WIGNER, 2))


class TestDenoiseOperators:
    def test_exact_small_lambda_is_twice_warmup(self):
        s = np.array([-0.9, -0.1, 0.8])
        y = np.array([-1.2, 0.3, 1.1])
        L = denoise_operator_exact(s, y, 1e-8, WIGNER)
        np.testing.assert_allclose(L, 2 * warmup_operator(s, WIGNER), atol=1e-4)

    @pytest.mark.parametrize("rho", [0.0, 1.0])
    def test_exact_rho_invariance(self, rho):
        s = np.array([-1.1, -0.3, 0.4, 1.0])
        y = np.array([-1.5, -0.2, 0.6, 1.4])
        ref = denoise_operator_exact(s, y, 0.7, WIGNER, rho=0.5)
        np.testing.assert_allclose(denoise_operator_exact(s, y, 0.7, WIGNER, rho=rho), ref,
                                   rtol=1e-9, atol=1e-12)

    def test_exact_n1(self):
        lam, s, y = 0.64, 0.3, 1.1
        expected = lam * s + potential_derivative(WIGNER, s) / 2 - math.sqrt(lam) * y
        np.testing.assert_allclose(denoise_operator_exact([s], [y], lam, WIGNER), [expected],
                                   rtol=1e-14)

    def test_bh_lambda_zero_is_warmup(self):
        s = np.array([1.0, 0.3, -0.5])
        y = np.array([0.9, 0.1, -1.0])
        np.testing.assert_allclose(denoise_operator_bh(s, y, 0.0, WIGNER),
                                   warmup_operator(s, WIGNER), rtol=1e-15)

    def test_bh_gradient_of_free_energy(self):
        rng = np.random.default_rng(3)
        n, lam, h = 8, 0.01, 1e-6
        y = np.sort(rng.normal(size=n))[::-1]
        s = np.sort(rng.normal(size=n))[::-1]
        L = denoise_operator_bh(s, y, lam, WIGNER)
        for i in range(n):
            e = np.zeros(n)
            e[i] = h
            fd = n * (bh_free_energy(s + e, y, lam, WIGNER) - bh_free_energy(s - e, y, lam, WIGNER)) / (2 * h)
            assert L[i] == pytest.approx(fd, rel=1e-5, abs=1e-8)

    def test_bh_initialized_at_data(self):
        y = np.array([1.5, 0.6, -0.2, -1.4])
        st_ = solve_denoising(y, 0.01, WIGNER, beta=1,
                              opts=SolverOptions(eta=1e-2, max_iter=2, window=1))
        assert st_.iter >= 1
        assert st_.moment_trace[0][0] == 1


class TestPopulationDynamics:
    def test_zero_momentum_is_plain_descent(self):
        op = lambda x: warmup_operator(x, WIGNER)
        init = np.linspace(-1, 1, 16)
        opts = SolverOptions(eta=1e-3, momentum=0.0, max_iter=300, window=100, tol=1e-300)
        st_ = run_population_dynamics(op, init, opts)
        x = init.copy()
        for _ in range(300):
            x = x - 1e-3 * op(x)
        np.testing.assert_array_equal(st_.lam, x)

    def test_permutation_equivariant(self):
        op = lambda x: warmup_operator(x, WIGNER)
        init = np.random.default_rng(2).uniform(-1, 1, 20)
        p = np.random.default_rng(3).permutation(20)
        opts = SolverOptions(eta=1e-3, max_iter=500)
        a = run_population_dynamics(op, init, opts).lam
        b = run_population_dynamics(op, init[p], opts).lam
        np.testing.assert_array_equal(b, a[p])

    def test_trace_increasing(self):
        st_ = solve_warmup(WIGNER, np.linspace(-1, 1, 32))
        its = [t[0] for t in st_.moment_trace]
        assert np.all(np.diff(its) > 0)

    def test_divergence(self):
        with pytest.raises(DivergenceError):
            run_population_dynamics(lambda x: warmup_operator(x, WIGNER), np.linspace(-1, 1, 8),
                                    SolverOptions(eta=50.0, max_iter=10_000, window=10))

    def test_collision_is_jittered(self):
        init = np.array([-1.0, 0.0, 0.0, 1.0])
        st_ = run_population_dynamics(lambda x: warmup_operator(x, WIGNER), init,
                                      SolverOptions(eta=1e-6, max_iter=200))
        assert st_.jitters >= 1
        assert np.all(np.isfinite(st_.lam))

    def test_init_independence(self):
        m2 = []
        for seed in range(5):
            init = np.random.default_rng(seed).uniform(-1, 1, 128)
            m2.append(empirical_moments(solve_warmup(WIGNER, init).lam, 2))
        assert max(m2) - min(m2) < 0.03
        assert abs(np.mean(m2) - 1) < 0.03

    def test_warmup_kernel_matches_generic_loop(self):
        init = np.linspace(-1, 1, 24)
        opts = SolverOptions(eta=1e-3, max_iter=2000, tol=1e-300)
        fused = solve_warmup(WIGNER, init, opts=opts).lam
        generic = run_population_dynamics(lambda x: warmup_operator(x, WIGNER), init, opts).lam
        np.testing.assert_allclose(fused, generic, rtol=1e-10, atol=1e-12)

    def test_converged_residual(self):
        st_ = solve_warmup(WIGNER, np.linspace(-1, 1, 64))
        assert st_.converged
        assert st_.residual < 1e-3

    def test_wishart_positive_and_mp_mean(self):
        pot = Potential.wishart(0.5)
        st_ = solve_warmup(pot, np.linspace(0.5, 1.5, 128))
        assert st_.lam.min() > 0
        assert abs(empirical_moments(st_.lam, 1) - oracles.mp_moment_quad(0.5, 1)) < 0.03

    def test_wishart_requires_positive_init(self):
        with pytest.raises(PositivityError):
            solve_warmup(Potential.wishart(0.5), np.linspace(-0.5, 1.5, 16))

    def test_wigner_512(self):
        lam = warmup_equilibrium(WIGNER, 512)
        assert abs(empirical_moments(lam, 2) - 1) < 0.03
        assert abs(empirical_moments(lam, 4) - 2) < 0.1


class TestMoments:
    def test_ones(self):
        assert empirical_moments([1, 1, 1], 3) == 1.0

    def test_semicircle_sample(self):
        lam = _semicircle_quantiles(10_000)
        assert abs(empirical_moments(lam, 2) - 1) < 0.03
        assert abs(empirical_moments(lam, 4) - 2) < 0.1

    def test_order_check(self):
        with pytest.raises(ValueError):
            empirical_moments([1.0], 0)


class TestSolveDenoising:
    def test_exact_fixed_point(self):
        y = np.array([-1.4, -0.5, 0.2, 0.9, 1.6])
        st_ = solve_denoising(y, 1.0, WIGNER, beta=2,
                              opts=SolverOptions(eta=1e-2, max_iter=200_000, tol=1e-12))
        assert st_.converged
        np.testing.assert_allclose(denoise_operator_exact(st_.lam, y, 1.0, WIGNER), 0.0, atol=1e-6)

    def test_exact_size_cap(self):
        with pytest.raises(ValueError):
            solve_denoising(np.linspace(-1, 1, 13), 1.0, WIGNER, beta=2)
