"""Mutual information and MMSE of rotationally invariant matrix denoising.

The model is ``Y = sqrt(lambda) S + xi`` with ``xi`` a Wigner matrix.  All
mutual informations are per ``N^2``; MMSEs are per ``N^2`` as well.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.special import gammaln

from . import hciz as _hciz
from .coulomb import warmup_equilibrium
from .ensembles import (
    DenoisingInstance,
    Potential,
    check_beta,
    gamma_n,
    potential_value,
    uniform_spectrum,
)
from .freeprob import Density

__all__ = [
    "LAMBDA_MIN",
    "BACKENDS",
    "MiReport",
    "QuadratureError",
    "mi_wigner_closed",
    "mmse_wigner_closed",
    "hciz_backend",
    "mi_from_spectra",
    "mi_uniform_finiteN",
    "mmse_uniform_finiteN",
    "mi_uniform_asymptotic",
    "hf_weights",
    "hciz_dlambda_exact",
    "mmse_hf",
    "log_prior_density",
    "free_entropy_finiteN",
]

LAMBDA_MIN = 1e-6
BACKENDS = (_hciz.EXACT_DET, _hciz.BH, _hciz.MONTE_CARLO, _hciz.SEMICIRCLE_CLOSED)


class QuadratureError(RuntimeError):
    """Raised when a double integral does not settle under grid refinement."""


@dataclass
class MiReport:
    """Mutual information (and optionally MMSE) of one evaluation."""

    lam: float
    beta: int
    n: int
    mi: float
    mmse: Optional[float] = None
    method: str = ""
    seed: Optional[int] = None
    pieces: dict = field(default_factory=dict)

    def __post_init__(self):
        if not math.isfinite(self.mi):
            raise ValueError("mutual information must be finite")

    def to_dict(self) -> dict:
        return asdict(self)

    def row(self) -> dict:
        """Flat record for the ``lambda,beta,n,seed,mi,mmse,method`` schema."""
        return {"lambda": self.lam, "beta": self.beta, "n": self.n, "seed": self.seed,
                "mi": self.mi, "mmse": self.mmse, "method": self.method}


def _vals(x) -> np.ndarray:
    return np.asarray(getattr(x, "values", x), dtype=float).reshape(-1)


def _check_lam(lam: float, positive: bool = False):
    if not lam >= 0:
        raise ValueError("lambda must be non-negative")
    if positive and lam < LAMBDA_MIN:
        raise ValueError(f"formula contains ln(sqrt(lambda)); needs lambda >= {LAMBDA_MIN}")


# ---------------------------------------------------------------------------
# Wigner signal
# ---------------------------------------------------------------------------


def mi_wigner_closed(lam: float, beta: int = 2) -> float:
    """``(beta/4) ln(1 + lam)``."""
    _check_lam(lam)
    return check_beta(beta) / 4.0 * math.log1p(lam)


def mmse_wigner_closed(lam: float) -> float:
    """``1 / (1 + lam)``."""
    _check_lam(lam)
    return 1.0 / (1.0 + lam)


# ---------------------------------------------------------------------------
# generic spectral formula
# ---------------------------------------------------------------------------


def hciz_backend(lamS, lamY, lam: float, beta: int, backend: str, K: int = 100_000,
                 seed=None, convention: str = "half_pairs") -> _hciz.HcizEstimate:
    """``I_N(lamS, lamY, sqrt(lam))`` with the requested method."""
    beta = check_beta(beta)
    s, y = _vals(lamS), _vals(lamY)
    g = math.sqrt(lam)
    if backend == _hciz.EXACT_DET:
        if beta != 2:
            raise ValueError("the determinant formula is for beta = 2 only")
        return _hciz.hciz_exact_beta2(s, y, g)
    if backend == _hciz.BH:
        if beta != 1:
            raise ValueError("the Brezin-Hikami approximation is for beta = 1 only")
        return _hciz.hciz_bh_beta1(np.sort(s)[::-1], np.sort(y)[::-1], lam, convention)
    if backend == _hciz.MONTE_CARLO:
        return _hciz.hciz_mc(s, y, g, beta, K, seed)
    if backend == _hciz.SEMICIRCLE_CLOSED:
        return _hciz.hciz_semicircle_closed(lam, beta)
    raise ValueError(f"unknown backend {backend!r}; choose from {BACKENDS}")


def mi_from_spectra(lamS, lamY, lam: float, beta: int = 2, backend: str = _hciz.EXACT_DET,
                    K: int = 100_000, seed=None, convention: str = "half_pairs") -> MiReport:
    """``(beta lam/(2N)) Tr lamS^2 - I_N(lamS, lamY, sqrt(lam))``.

    ``lamS`` should be a draw from the signal's spectral law.  The
    ``SemicircleClosed`` backend ignores both spectra and uses the unit
    semicircle (second moment 1).
    """
    _check_lam(lam)
    beta = check_beta(beta)
    s = _vals(lamS)
    est = hciz_backend(lamS, lamY, lam, beta, backend, K, seed, convention)
    theta2 = 1.0 if backend == _hciz.SEMICIRCLE_CLOSED else float(np.mean(s * s))
    energy = beta * lam / 2.0 * theta2
    mi = energy - est.value
    return MiReport(lam, beta, s.size, mi, method=backend,
                    seed=seed if isinstance(seed, int) else None,
                    pieces={"energy": energy, "hciz": est.value, "hciz_stderr": est.stderr})


# ---------------------------------------------------------------------------
# uniform (equally spaced) signal spectrum, beta = 2
# ---------------------------------------------------------------------------


def _pairs_sorted(y: np.ndarray):
    iu = np.triu_indices(y.size, 1)
    return iu, y[iu[1]] - y[iu[0]]


def _log_exp_gaps(e: np.ndarray) -> float:
    """``sum_{i<j} ln|exp(e_j) - exp(e_i)|`` for ascending ``e``, in log domain."""
    n = e.size
    iu, d = _pairs_sorted(e)
    # ln(e^{e_j} - e^{e_i}) = e_j + ln(1 - e^{-(e_j - e_i)})
    return float(np.sum(np.arange(n) * e) + np.sum(np.log(-np.expm1(-d))))


def _uniform_setup(instance: DenoisingInstance):
    if instance.beta != 2:
        raise ValueError("the uniform-spectrum formulas hold for beta = 2")
    lam = instance.lam
    _check_lam(lam, positive=True)
    y = _vals(instance.lamY)
    order = np.argsort(y)
    y = y[order]
    if np.min(np.diff(y)) <= 0:
        raise ValueError("data eigenvalues must be distinct")
    n = y.size
    gam = gamma_n(n)
    return lam, y, order, n, gam


def mi_uniform_finiteN(instance: DenoisingInstance) -> MiReport:
    """Finite-N mutual information for the equally spaced signal spectrum.

    The spherical integral is explicit here because the kernel matrix is a
    generalized Vandermonde in ``exp(sqrt(sigma) y_j)``, ``sigma = gamma_N
    lam``.  Exponential gaps are summed in the log domain.
    """
    lam, y, _, n, gam = _uniform_setup(instance)
    r = math.sqrt(gam * lam)
    n2 = float(n * n)
    _, dy = _pairs_sorted(y)
    d = np.arange(1, n)
    pieces = {
        "energy": lam * float(np.mean(uniform_spectrum(n) ** 2)),
        "exp_gaps": -_log_exp_gaps(r * y) / n2,
        "data_vandermonde": float(np.sum(np.log(math.sqrt(lam) * dy))) / n2,
        "signal_vandermonde": float(np.sum((n - d) * np.log(math.sqrt(gam) * d / n))) / n2,
        "trace": r / (2 * n) * float(np.sum(y)),
        # tau-like constant ln(prod k! / N^{N(N-1)/2})
        "factorials": -(float(np.sum(gammaln(np.arange(1, n) + 1.0)))
                        - n * (n - 1) / 2 * math.log(n)) / n2,
    }
    mi = float(sum(pieces.values()))
    return MiReport(lam, 2, n, mi, method="UniformFiniteN", pieces=pieces)


def mmse_uniform_finiteN(instance: DenoisingInstance) -> MiReport:
    """Finite-N MMSE for the equally spaced signal spectrum.

    Differentiates the finite-N mutual information with Hellmann-Feynman
    eigenvalue derivatives ``dy_i/dlam = p_i / (2 sqrt(lam))``, ``p_i =
    psi_i^† S psi_i``.  ``report.pieces['beta_mmse']`` is the raw
    ``beta * MMSE`` and ``report.mmse`` the MMSE itself.
    """
    lam, y, order, n, gam = _uniform_setup(instance)
    p = np.asarray(instance.proj, dtype=float)[order]
    sl = math.sqrt(lam)
    r = math.sqrt(gam * lam)
    n2 = float(n * n)
    iu, dy = _pairs_sorted(y)
    u = y / sl + p
    i, j = iu
    # [e^{a_i} u_i - e^{a_j} u_j] / [e^{a_i} - e^{a_j}] with a_j > a_i, scaled by e^{-a_j}
    da = r * dy
    q = np.exp(-da)
    den = -np.expm1(-da)
    ratio = u[j] + q * (u[j] - u[i]) / den
    pieces = {
        "constant": 4.0,
        "exp_gaps": -2.0 * math.sqrt(gam) / n2 * float(np.sum(ratio)),
        "inv_lambda": 1.0 / lam,
        "data_vandermonde": 2.0 / (sl * n2) * float(np.sum((p[i] - p[j]) / (y[i] - y[j]))),
        "trace": math.sqrt(gam / lam) * float(np.mean(y)),
        "projections": math.sqrt(gam) / n * float(np.sum(p)),
    }
    beta_mmse = float(sum(pieces.values()))
    pieces["beta_mmse"] = beta_mmse
    mi = mi_uniform_finiteN(instance).mi
    return MiReport(lam, 2, n, mi, mmse=beta_mmse / 2.0, method="UniformFiniteN",
                    pieces=pieces)


def _g(v: np.ndarray) -> np.ndarray:
    """``-ln(sinh(v/2) / (v/2))``, even and analytic in ``v``."""
    u = np.abs(v)
    out = np.empty_like(u)
    small = u < 1e-4
    out[small] = -u[small] ** 2 / 24.0
    us = u[~small]
    # ln sinh(u/2) = u/2 + ln(1 - e^{-u}) - ln 2
    out[~small] = -(0.5 * us + np.log(-np.expm1(-us)) - np.log(us))
    return out


def _pair_g_sum(x: np.ndarray, w: np.ndarray, a: float, chunk: int = 512) -> float:
    """``sum_ij w_i w_j g(a (x_i - x_j))``."""
    total = 0.0
    for start in range(0, x.size, chunk):
        xs, ws = x[start:start + chunk], w[start:start + chunk]
        total += float(ws @ (_g(a * (xs[:, None] - x[None, :])) @ w))
    return total


def _chebyshev_nodes(rho: Density, m: int):
    """Nodes ``a + (b - a)(1 - cos t)/2`` at midpoints in ``t``, weights ``rho dx``.

    The cosine map absorbs square-root edges.  For sampled densities the
    support is trimmed to the grid points above ``1e-6`` of the peak, which
    drops the Lorentzian tails left by the regularization ``eps``.
    """
    lo, hi = rho.support
    if rho.is_sampled:
        pos = np.flatnonzero(rho.values > 1e-6 * rho.values.max())
        lo = float(rho.grid[max(pos[0] - 1, 0)])
        hi = float(rho.grid[min(pos[-1] + 1, rho.grid.size - 1)])
    t = (np.arange(m) + 0.5) * math.pi / m
    x = 0.5 * (lo + hi) - 0.5 * (hi - lo) * np.cos(t)
    w = rho.pdf(x) * np.sin(t) * (0.5 * (hi - lo) * math.pi / m)
    return x, w / w.sum()


def mi_uniform_asymptotic(rhoY: Density, lam: float, n_nodes: int = 2000,
                          tol: float = 1e-3) -> float:
    """Large-N mutual information of the uniform-spectrum model from ``rho_Y``.

    ``lam + ln(12 lam)/4 + (1/2) int int rho(x) rho(y) ln|(x - y) /
    (e^{a x} - e^{a y})|`` with ``a = sqrt(12 lam)``.  Writing ``e^{ax} -
    e^{ay} = 2 e^{a(x + y)/2} sinh(a(x - y)/2)`` turns the integrand into
    ``g(a(x - y)) - ln a - a(x + y)/2`` with ``g(v) = -ln(sinh(v/2)/(v/2))``
    analytic, so the diagonal is harmless and the ``ln a`` term cancels.
    The double integral of ``g`` is computed on two nested grids which must
    agree to ``tol``.
    """
    _check_lam(lam, positive=True)
    a = math.sqrt(12.0 * lam)

    def integral(m):
        x, w = _chebyshev_nodes(rhoY, m)
        return _pair_g_sum(x, w, a), float(w @ x)

    fine, mean = integral(n_nodes)
    coarse, _ = integral(n_nodes // 2 + 1)
    if abs(fine - coarse) > tol:
        raise QuadratureError(f"double integral unsettled: {coarse:.6g} vs {fine:.6g}")
    return lam + 0.5 * (fine - a * mean)


# ---------------------------------------------------------------------------
# MMSE from the Hellmann-Feynman derivative of the spherical integral
# ---------------------------------------------------------------------------


def hf_weights(instance: DenoisingInstance, direct: bool = False) -> np.ndarray:
    """``<psi_a| 2 sqrt(lam) S + xi |psi_a>`` for each data eigenvector.

    By default evaluated as ``y_a + sqrt(lam) p_a``; ``direct=True`` forms the
    quadratic forms explicitly.
    """
    sl = math.sqrt(instance.lam)
    if direct:
        m = 2 * sl * instance.S + instance.xi
        v = instance.psiY
        return np.real(np.einsum("ji,jk,ki->i", v.conj(), m, v))
    return _vals(instance.lamY) + sl * np.asarray(instance.proj, dtype=float)


def hciz_dlambda_exact(lamS, instance: DenoisingInstance, rho: float = 0.5) -> float:
    """Total ``lambda``-derivative of ``I_N(lamS, lamY(lambda), sqrt(lambda))`` at ``beta=2``.

    ``lamS`` is held fixed and ``lamY`` moves with ``lambda``.  With ``K_ij =
    exp(N sqrt(lam) s_i y_j)`` and ``q_j = d(sqrt(lam) y_j)/d sqrt(lam)``::

        N^2 dI/dlam = (1/(2 sqrt(lam))) [N sum_ij (K^-1)_ji K_ij s_i q_j
                      - sum_a q_a sum_{k != a} 1/(sqrt(lam)(y_a - y_k))]
    """
    s = _vals(lamS)
    y = _vals(instance.lamY)
    n = s.size
    lam = instance.lam
    _check_lam(lam, positive=True)
    sl = math.sqrt(lam)
    q = hf_weights(instance)
    t = _hciz.kernel_weighted_trace(s, y, sl, q, rho=rho)
    det_part = n * float(s @ t)
    d = y[:, None] - y[None, :]
    np.fill_diagonal(d, np.inf)
    if np.min(np.abs(d)) < 1e-12:
        raise _hciz.DegenerateSpectrumError("repeated data eigenvalues")
    vdm_part = float(q @ np.sum(1.0 / d, axis=1)) / sl
    return (det_part - vdm_part) / (2.0 * sl * n * n)


def mmse_hf(instance: DenoisingInstance, lamS, rho: float = 0.5, max_n: int = 10) -> float:
    """MMSE from the stationary signal spectrum, ``beta = 2``.

    ``2 N^-1 Tr lamS^2 - (4/beta) dI_N/dlambda`` where the derivative is the
    Hellmann-Feynman form of :func:`hciz_dlambda_exact`.
    """
    if instance.beta != 2:
        raise ValueError("mmse_hf is implemented for beta = 2")
    s = _vals(lamS)
    if s.size > max_n:
        raise ValueError(f"N = {s.size} exceeds max_n = {max_n} (kernel overflow regime)")
    d_i = hciz_dlambda_exact(s, instance, rho=rho)
    return 2.0 * float(np.mean(s * s)) - 4.0 / instance.beta * d_i


# ---------------------------------------------------------------------------
# free entropy bracket
# ---------------------------------------------------------------------------


def log_prior_density(lamS, pot: Potential, beta: int = 2) -> float:
    """``N^-2 ln p(lamS) = (beta/N^2) sum_{i<j} ln|s_i - s_j| - (beta/(4N)) sum V(s_i)``."""
    s = _vals(lamS)
    n = s.size
    iu = np.triu_indices(n, 1)
    gaps = np.abs(s[iu[0]] - s[iu[1]])
    if gaps.size and gaps.min() <= 0:
        raise ValueError("eigenvalues must be distinct")
    return (beta * float(np.sum(np.log(gaps))) / n**2
            - beta / (4.0 * n) * float(np.sum(potential_value(pot, s))))


def free_entropy_finiteN(lamS, lamY, lam: float, beta: int, pot: Potential,
                         backend: str = _hciz.EXACT_DET, K: int = 100_000, seed=None,
                         convention: str = "half_pairs") -> float:
    """Free-entropy bracket at a given signal spectrum.

    ``N^-2 ln p(lamS) - (beta lam/(4N)) Tr lamS^2 + I_N + tau_N`` with
    ``tau_N = -N^-2 ln p`` at the (cached) warm-up equilibrium, so the
    bracket vanishes at ``lam = 0`` there.  Maximizing over ``lamS`` is left
    to the Coulomb-gas solver.
    """
    _check_lam(lam)
    beta = check_beta(beta)
    s = _vals(lamS)
    n = s.size
    tau = -log_prior_density(warmup_equilibrium(pot, n, beta), pot, beta)
    est = hciz_backend(s, lamY, lam, beta, backend, K, seed, convention)
    return (log_prior_density(s, pot, beta) - beta * lam / (4.0 * n) * float(np.sum(s * s))
            + est.value + tau)
