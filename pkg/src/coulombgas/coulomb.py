"""Population dynamics for Coulomb-gas stationarity equations.

A population of N eigenvalues ("particles") moves by gradient descent with
momentum on the log-gas free energy,

    g <- mu g + eta L(lam),    lam <- lam - g,

until the empirical second moment stops changing.  ``L`` is one of the
operators below; its zeros are the stationary spectra.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional

import numba
import numpy as np

from .ensembles import Potential, check_beta, potential_derivative
from .hciz import BH_CONVENTIONS, hciz_bh_grad, hciz_grad_exact_beta2

__all__ = [
    "CollisionError",
    "DivergenceError",
    "PositivityError",
    "SolverOptions",
    "PopulationState",
    "resolvent",
    "warmup_operator",
    "denoise_operator_exact",
    "denoise_operator_bh",
    "run_population_dynamics",
    "empirical_moments",
    "warmup_equilibrium",
    "solve_warmup",
    "solve_denoising",
]


class CollisionError(ValueError):
    """Two particles sit at the same position."""


class DivergenceError(RuntimeError):
    """The population blew up; the learning rate is too large."""


class PositivityError(RuntimeError):
    """A particle crossed zero where the potential has a log barrier."""


@dataclass
class SolverOptions:
    eta: float = 1e-4
    momentum: float = 1e-2
    tol: float = 1e-8
    window: int = 100
    max_iter: int = 500_000
    rho: float = 0.5
    eta_decay: float = 1.0
    max_n_exact: int = 12
    divergence_m2: float = 1e6

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.window < 1 or self.max_iter < 1:
            raise ValueError("window and max_iter must be >= 1")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        if not 0.0 < self.eta_decay <= 1.0:
            raise ValueError("eta_decay must lie in (0, 1]")


@dataclass
class PopulationState:
    lam: np.ndarray
    momentum: np.ndarray
    iter: int = 0
    moment_trace: list = field(default_factory=list)
    converged: bool = False
    residual: float = float("nan")
    jitters: int = 0

    def __post_init__(self):
        if self.lam.shape != self.momentum.shape:
            raise ValueError("lam and momentum must have the same shape")

    def trace_array(self) -> np.ndarray:
        """``(iter, m2, grad_norm)`` rows."""
        return np.asarray(self.moment_trace, dtype=float).reshape(-1, 3)


# ---------------------------------------------------------------------------
# operators
# ---------------------------------------------------------------------------


@numba.njit(cache=True, fastmath=True, error_model="numpy")
def _resolvent_sorted(x):
    """Resolvent of a sorted population.

    Four reciprocals share one division,
    ``1/a + 1/b + 1/c + 1/d = ((a+b)cd + (c+d)ab) / (abcd)``; on each side of
    ``i`` all differences have one sign, so nothing cancels.
    """
    n = x.size
    r = np.empty(n)
    for i in range(n):
        xi = x[i]
        acc = 0.0
        for side in range(2):
            j = 0 if side == 0 else i + 1
            hi = i if side == 0 else n
            while j + 3 < hi:
                a = xi - x[j]
                b = xi - x[j + 1]
                c = xi - x[j + 2]
                d = xi - x[j + 3]
                ab = a * b
                cd = c * d
                acc += ((a + b) * cd + (c + d) * ab) / (ab * cd)
                j += 4
            while j < hi:
                acc += 1.0 / (xi - x[j])
                j += 1
        r[i] = acc / n
    return r


def _min_gap_sorted(xs: np.ndarray) -> float:
    return float(np.min(np.diff(xs))) if xs.size > 1 else math.inf


def resolvent(lam) -> np.ndarray:
    """``R_i = N^{-1} sum_{j != i} 1/(lam_i - lam_j)``.

    Evaluated on the sorted population and scattered back, so the output
    depends only on the set of values and is exactly permutation
    equivariant.
    """
    lam = np.asarray(lam, dtype=float)
    order = np.argsort(lam, kind="stable")
    xs = lam[order]
    if _min_gap_sorted(xs) <= 1e-12:
        raise CollisionError("eigenvalue collision in resolvent")
    out = np.empty_like(lam)
    out[order] = _resolvent_sorted(xs)
    return out


def warmup_operator(lam, pot: Potential, beta: int = 2) -> np.ndarray:
    """Prior-only stationarity operator ``V'(lam)/4 - R(lam)``.

    The same operator serves both Dyson indices: ``beta`` multiplies the
    potential and the Vandermonde term alike.
    """
    check_beta(beta)
    lam = np.asarray(lam, dtype=float)
    return 0.25 * potential_derivative(pot, lam) - resolvent(lam)


def denoise_operator_exact(lam, lamY, lam_snr: float, pot: Potential,
                           rho: float = 0.5) -> np.ndarray:
    """Unitary (``beta=2``) denoising operator.

    ``L_i = lam_snr s_i + V'(s_i)/2 - R_i - K_i`` where ``K`` is the
    determinant gradient of the exact spherical integral.  Since
    ``K_i = N dI/ds_i + R_i``, the zeros are the stationary points of the
    posterior Coulomb gas.  As ``lam_snr -> 0`` the operator tends to twice
    the warm-up operator.
    """
    s = np.asarray(lam, dtype=float)
    y = np.asarray(getattr(lamY, "values", lamY), dtype=float)
    grad = hciz_grad_exact_beta2(s, y, lam_snr, rho=rho)
    return lam_snr * s + 0.5 * potential_derivative(pot, s) - resolvent(s) - grad


def denoise_operator_bh(lam, lamY, lam_snr: float, pot: Potential,
                        convention: str = "half_pairs") -> np.ndarray:
    """Orthogonal (``beta=1``) denoising operator with the Brezin-Hikami gradient.

    ``L_i = lam_snr s_i/2 + V'(s_i)/4 - R_i - N dI_BH/ds_i``.  Pairs are
    matched by index, so ``lam`` and ``lamY`` must be listed in the same
    (descending) order.
    """
    s = np.asarray(lam, dtype=float)
    y = np.asarray(getattr(lamY, "values", lamY), dtype=float)
    return (0.5 * lam_snr * s + 0.25 * potential_derivative(pot, s) - resolvent(s)
            + hciz_bh_grad(s, y, lam_snr, convention))


def bh_free_energy(lam, lamY, lam_snr: float, pot: Potential,
                   convention: str = "half_pairs") -> float:
    """Scalar whose ``N``-scaled gradient is :func:`denoise_operator_bh`.

    ``(lam/(4N)) sum s^2 + (1/(4N)) sum V(s) - N^{-2} sum_{i<j} ln|s_i - s_j|
    - I_BH``.
    """
    from .ensembles import potential_value

    s = np.asarray(lam, dtype=float)
    y = np.asarray(getattr(lamY, "values", lamY), dtype=float)
    n = s.size
    r = math.sqrt(lam_snr)
    x = r * np.subtract.outer(s, s) * np.subtract.outer(y, y)
    iu = np.triu_indices(n, 1)
    i_bh = r / (2 * n) * float(s @ y) - BH_CONVENTIONS[convention] / n**2 * float(
        np.sum(np.log1p(x[iu])))
    logvdm = float(np.sum(np.log(np.abs(np.subtract.outer(s, s)[iu]))))
    return (lam_snr / (4 * n) * float(s @ s) + float(np.sum(potential_value(pot, s))) / (4 * n)
            - logvdm / n**2 - i_bh)


def empirical_moments(lam, k: int) -> float:
    """``N^{-1} sum_i lam_i^k``."""
    if k < 1:
        raise ValueError("moment order must be >= 1")
    return float(np.mean(np.sort(np.asarray(lam, dtype=float)) ** k))


# ---------------------------------------------------------------------------
# solver
# ---------------------------------------------------------------------------


def _unjam(lam: np.ndarray, gap: float = 1e-10) -> int:
    """Push apart neighbours closer than ``gap``; returns the number moved."""
    order = np.argsort(lam, kind="stable")
    xs = lam[order]
    close = np.nonzero(np.diff(xs) < gap)[0]
    if close.size == 0:
        return 0
    delta = 1e-8 * max(float(xs[-1] - xs[0]), 1.0)
    for i in close:
        lam[order[i]] -= delta
        lam[order[i + 1]] += delta
    return int(close.size)


def run_population_dynamics(operator: Callable[[np.ndarray], np.ndarray], init,
                            opts: Optional[SolverOptions] = None,
                            require_positive: bool = False,
                            callback: Optional[Callable] = None) -> PopulationState:
    """Heavy-ball gradient descent ``g <- mu g + eta L, lam <- lam - g``.

    Stops once the relative change of the second moment over
    ``opts.window`` iterations drops below ``opts.tol``, or after
    ``opts.max_iter`` iterations (``converged`` is then False).

    Raises
    ------
    DivergenceError
        If the second moment exceeds ``opts.divergence_m2``.
    PositivityError
        If ``require_positive`` and a particle reaches zero.
    """
    opts = opts or SolverOptions()
    lam = np.array(init, dtype=float).reshape(-1)
    if not np.all(np.isfinite(lam)):
        raise ValueError("initial population must be finite")
    if require_positive and np.any(lam <= 0):
        raise PositivityError("initial population must be positive")
    g = np.zeros_like(lam)
    state = PopulationState(lam, g)
    eta = opts.eta
    m2_ref = empirical_moments(lam, 2)
    it = 0
    while it < opts.max_iter:
        state.jitters += _unjam(lam)
        step = operator(lam)
        g *= opts.momentum
        g += eta * step
        lam -= g
        it += 1
        eta *= opts.eta_decay
        if require_positive and np.any(lam <= 0):
            raise PositivityError(f"particle crossed zero at iteration {it}")
        if it % opts.window == 0:
            m2 = empirical_moments(lam, 2)
            gn = float(np.max(np.abs(step)))
            if not np.isfinite(m2) or m2 > opts.divergence_m2:
                raise DivergenceError(
                    f"second moment {m2:.3g} at iteration {it}; use a smaller eta")
            state.moment_trace.append((it, m2, gn))
            if callback is not None:
                callback(state)
            if abs(m2 - m2_ref) <= opts.tol * abs(m2_ref):
                state.converged = True
                break
            m2_ref = m2
    state.iter = it
    state.residual = float(np.max(np.abs(operator(lam))))
    return state


def _default_init(pot: Potential, n: int) -> np.ndarray:
    if pot.log_coeff != 0:
        return np.linspace(0.5, 1.5, n)
    return np.linspace(-1.0, 1.0, n)


@numba.njit(cache=True)
def _vprime(x, log_coeff, poly):
    out = np.zeros(x.size)
    for k in range(poly.size - 1, -1, -1):
        out = out * x + (k + 1) * poly[k]
    if log_coeff != 0.0:
        out += log_coeff / x
    return out


@numba.njit(cache=True)
def _warmup_kernel(x, log_coeff, poly, eta, mu, tol, window, max_iter,
                   require_positive, div_m2, trace):
    """Fused warm-up loop on a sorted population.

    Returns ``(iters, converged, ntrace, status, jitters)`` with status 0 for
    normal exit, 1 for divergence and 2 for a positivity violation.
    """
    n = x.size
    g = np.zeros(n)
    m2_ref = np.mean(x * x)
    ntrace = 0
    jitters = 0
    it = 0
    while it < max_iter:
        # keep the population ordered and separated
        resort = False
        for i in range(n - 1):
            if x[i + 1] < x[i]:
                resort = True
                break
        if resort:
            order = np.argsort(x)
            x[:] = x[order]
            g[:] = g[order]
        span = max(x[n - 1] - x[0], 1.0)
        for i in range(n - 1):
            if x[i + 1] - x[i] < 1e-10:
                x[i] -= 1e-8 * span
                x[i + 1] += 1e-8 * span
                jitters += 1
        step = 0.25 * _vprime(x, log_coeff, poly) - _resolvent_sorted(x)
        for i in range(n):
            g[i] = mu * g[i] + eta * step[i]
            x[i] -= g[i]
        it += 1
        if require_positive:
            for i in range(n):
                if x[i] <= 0.0:
                    return it, False, ntrace, 2, jitters
        if it % window == 0:
            m2 = np.mean(x * x)
            gn = np.max(np.abs(step))
            if not np.isfinite(m2) or m2 > div_m2:
                return it, False, ntrace, 1, jitters
            trace[ntrace, 0] = it
            trace[ntrace, 1] = m2
            trace[ntrace, 2] = gn
            ntrace += 1
            if abs(m2 - m2_ref) <= tol * abs(m2_ref):
                return it, True, ntrace, 0, jitters
            m2_ref = m2
    return it, False, ntrace, 0, jitters


def solve_warmup(pot: Potential, init, beta: int = 2,
                 opts: Optional[SolverOptions] = None) -> PopulationState:
    """Prior-only equilibrium of ``exp(-beta N/4 sum V) |Delta|^beta``.

    Runs the same iteration as :func:`run_population_dynamics` with the
    warm-up operator, compiled as a single loop.  The population is
    processed in sorted order, so permuting ``init`` permutes the result
    exactly.
    """
    check_beta(beta)
    opts = opts or SolverOptions()
    if opts.eta_decay != 1.0:
        return run_population_dynamics(lambda x: warmup_operator(x, pot, beta), init, opts,
                                       require_positive=pot.log_coeff != 0)
    init = np.array(init, dtype=float).reshape(-1)
    if not np.all(np.isfinite(init)):
        raise ValueError("initial population must be finite")
    positive = pot.log_coeff != 0
    if positive and np.any(init <= 0):
        raise PositivityError("initial population must be positive")
    order = np.argsort(init, kind="stable")
    x = init[order].copy()
    trace = np.zeros((opts.max_iter // opts.window + 1, 3))
    poly = np.asarray(pot.poly_coeffs, dtype=float)
    it, conv, ntrace, status, jitters = _warmup_kernel(
        x, pot.log_coeff, poly, opts.eta, opts.momentum, opts.tol, opts.window,
        opts.max_iter, positive, opts.divergence_m2, trace)
    if status == 1:
        raise DivergenceError(f"second moment blew up at iteration {it}; use a smaller eta")
    if status == 2:
        raise PositivityError(f"particle crossed zero at iteration {it}")
    # particles never cross, so sorted slot k belongs to the k-th smallest init
    lam = np.empty_like(x)
    lam[order] = x
    state = PopulationState(lam, np.zeros_like(lam), iter=int(it),
                            moment_trace=[tuple(r) for r in trace[:ntrace]],
                            converged=bool(conv), jitters=int(jitters))
    state.residual = float(np.max(np.abs(warmup_operator(lam, pot, beta))))
    return state


@lru_cache(maxsize=32)
def _warmup_cached(pot: Potential, n: int, beta: int) -> np.ndarray:
    state = solve_warmup(pot, _default_init(pot, n), beta)
    return np.sort(state.lam)


def warmup_equilibrium(pot: Potential, n: int, beta: int = 2) -> np.ndarray:
    """Sorted warm-up equilibrium for ``(pot, n, beta)``, cached."""
    return _warmup_cached(pot, int(n), check_beta(beta)).copy()


def solve_denoising(lamY, lam_snr: float, pot: Potential, beta: int = 2,
                    init=None, opts: Optional[SolverOptions] = None,
                    convention: str = "half_pairs") -> PopulationState:
    """Stationary signal spectrum of the posterior Coulomb gas.

    ``beta=2`` uses the exact determinant gradient (size-capped by
    ``opts.max_n_exact``); ``beta=1`` uses the Brezin-Hikami gradient.
    The default initialization is the data spectrum itself.
    """
    opts = opts or SolverOptions()
    y = np.asarray(getattr(lamY, "values", lamY), dtype=float)
    beta = check_beta(beta)
    if beta == 2:
        if y.size > opts.max_n_exact:
            raise ValueError(
                f"exact operator limited to N <= {opts.max_n_exact} (overflow regime)")
        y = np.sort(y)
        x0 = y.copy() if init is None else np.asarray(init, dtype=float)

        def op(x):
            return denoise_operator_exact(x, y, lam_snr, pot, opts.rho)
    else:
        y = np.sort(y)[::-1].copy()
        x0 = y.copy() if init is None else np.asarray(init, dtype=float)

        def op(x):
            return denoise_operator_bh(x, y, lam_snr, pot, convention)
    return run_population_dynamics(op, x0, opts, require_positive=pot.log_coeff != 0)
