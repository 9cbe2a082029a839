"""Free-probability tools: Green functions, densities and Tricomi formulas.

The main solver handles ``Y = sqrt(lam) S + xi`` where ``S`` has the
centered uniform spectrum of unit variance and ``xi`` is Wigner.  By
additivity of R-transforms the Green function ``G`` of ``Y`` solves

    z = sqrt(3 lam) coth(sqrt(3 lam) G) + G.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import integrate
from scipy.interpolate import CubicHermiteSpline
from scipy.special import comb

__all__ = [
    "Density",
    "TricomiInput",
    "TabulatedPotential",
    "GreenSolverError",
    "InvalidDensityError",
    "solve_green_uniform_plus_wigner",
    "solve_green_grid",
    "density_from_green",
    "r_transform_uniform",
    "tricomi_density",
    "tricomi_Ip",
    "arcsine_moments",
    "potential_from_density",
    "interpolate_density",
    "semicircle_density",
    "marchenko_pastur_density",
    "NORMALIZE",
]

NORMALIZE = "normalize"


class GreenSolverError(RuntimeError):
    """Newton iteration for the Green function failed."""


class InvalidDensityError(ValueError):
    """Inputs produce a negative or otherwise invalid density."""


# ---------------------------------------------------------------------------
# densities
# ---------------------------------------------------------------------------


@dataclass
class Density:
    """Probability density on ``[a, b]``.

    Either closed form (``pdf_fn`` set, ``name``/``params`` describe it) or
    sampled (``grid`` and ``values``).  Sampled densities are evaluated by
    linear interpolation unless an ``interpolant`` is attached.
    """

    support: tuple
    name: str = "sampled"
    params: dict = field(default_factory=dict)
    grid: Optional[np.ndarray] = None
    values: Optional[np.ndarray] = None
    pdf_fn: Optional[Callable] = None
    interpolant: Optional[Callable] = None
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        a, b = float(self.support[0]), float(self.support[1])
        if not a < b:
            raise ValueError("support must satisfy a < b")
        self.support = (a, b)
        if self.pdf_fn is None:
            if self.grid is None or self.values is None:
                raise ValueError("sampled density needs grid and values")
            self.grid = np.asarray(self.grid, dtype=float)
            self.values = np.asarray(self.values, dtype=float)
            if self.grid.shape != self.values.shape:
                raise ValueError("grid and values must have equal shapes")
            if np.any(self.values < 0):
                raise ValueError("density values must be non-negative")
            mass = self.mass()
            self.flags.setdefault("mass", mass)
            self.flags.setdefault("normalization_deficit", abs(mass - 1.0) > 2e-3)

    @property
    def is_sampled(self) -> bool:
        return self.pdf_fn is None

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        if self.pdf_fn is not None:
            out = np.zeros_like(x)
            a, b = self.support
            inside = (x > a) & (x < b)
            out[inside] = self.pdf_fn(x[inside])
            return out
        if self.interpolant is not None:
            out = np.clip(self.interpolant(x), 0.0, None)
            return np.where((x < self.grid[0]) | (x > self.grid[-1]), 0.0, out)
        return np.interp(x, self.grid, self.values, left=0.0, right=0.0)

    def mass(self) -> float:
        if self.pdf_fn is not None:
            a, b = self.support
            return float(integrate.quad(self.pdf_fn, a, b, limit=200)[0])
        return float(np.trapezoid(self.values, self.grid))

    def sample_grid(self, n: int = 4001):
        """``(x, rho)`` on a grid covering the support."""
        if self.pdf_fn is None:
            return self.grid, self.values
        a, b = self.support
        x = np.linspace(a, b, n)
        return x, self.pdf(x)

    def cdf(self, x):
        """Cumulative distribution by trapezoidal accumulation on the grid."""
        g, v = self.sample_grid()
        c = np.concatenate([[0.0], np.cumsum(0.5 * (v[1:] + v[:-1]) * np.diff(g))])
        c = c / c[-1]
        return np.interp(x, g, c, left=0.0, right=1.0)


def semicircle_density(variance: float = 1.0) -> Density:
    r = 2.0 * math.sqrt(variance)

    def f(x):
        return np.sqrt(np.clip(r * r - x * x, 0, None)) * 2.0 / (math.pi * r * r)

    return Density((-r, r), "semicircle", {"variance": variance}, pdf_fn=f)


def marchenko_pastur_density(alpha: float) -> Density:
    """Limit law of ``X X^†`` with ``X`` of size ``N x M``, ``alpha = N/M <= 1``.

    Normalized so that the mean is one:
    ``rho(x) = sqrt((b - x)(x - a)) / (2 pi alpha x)``.
    """
    if not 0 < alpha <= 1:
        raise ValueError("only 0 < alpha <= 1 has no atom at zero")
    a, b = (1 - math.sqrt(alpha)) ** 2, (1 + math.sqrt(alpha)) ** 2

    def f(x):
        return np.sqrt(np.clip((b - x) * (x - a), 0, None)) / (2 * math.pi * alpha * x)

    return Density((a, b), "marchenko_pastur", {"alpha": alpha}, pdf_fn=f)


# ---------------------------------------------------------------------------
# Green function of uniform + Wigner
# ---------------------------------------------------------------------------


def _coth(w):
    return 1.0 / np.tanh(w)


def r_transform_uniform(lam: float, z):
    """R-transform of ``sqrt(lam)`` times the unit-variance centered uniform law.

    ``sqrt(3 lam) coth(z sqrt(3 lam)) - 1/z``; a Taylor series is used for
    ``|z sqrt(3 lam)| < 1e-4``.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    z = np.asarray(z, dtype=complex)
    k = math.sqrt(3.0 * lam)
    w = z * k
    small = np.abs(w) < 1e-4
    out = np.empty_like(z)
    zs = z[small]
    out[small] = lam * zs - lam * lam * zs**3 / 5.0
    zl = z[~small]
    out[~small] = k * _coth(zl * k) - 1.0 / zl
    return out if out.ndim else complex(out)


def _green_residual(g, z, k):
    return z - k * _coth(g * k) - g


def _newton(g, z, k, max_iter=200, tol=1e-13):
    """Vectorized Newton on ``f(G) = k coth(k G) + G - z``."""
    for _ in range(max_iter):
        c = _coth(g * k)
        f = k * c + g - z
        fp = 1.0 - k * k * (c * c - 1.0)
        step = f / fp
        g = g - step
        if np.all(np.abs(step) <= tol * np.maximum(1.0, np.abs(g))):
            break
    return g


def solve_green_grid(lam: float, z, n_stages: int = 80) -> np.ndarray:
    """Green function of the data law at every point of ``z`` (vectorized).

    Continuation in the imaginary part: each point is solved first at
    ``Re z + i sign(Im z) y0`` with ``y0`` several spectral widths, where
    ``G ~ 1/z`` is a safe start, then the
    imaginary part is lowered geometrically to its target value, reusing the
    previous root.  This stays on the Stieltjes branch
    (``Im G Im z < 0``).
    """
    if lam <= 0:
        raise ValueError("lambda must be positive")
    z = np.asarray(z, dtype=complex)
    shape = z.shape
    z = z.reshape(-1)
    k = math.sqrt(3.0 * lam)
    sgn = np.where(z.imag < 0, -1.0, 1.0)
    y_target = np.abs(z.imag)
    y0 = np.maximum(4.0 * math.sqrt(1.0 + lam), y_target)
    g = 1.0 / (z.real + 1j * sgn * y0)
    for t in np.linspace(0.0, 1.0, n_stages + 1):
        y = np.where(y_target > 0, y0 ** (1 - t) * np.maximum(y_target, 1e-300) ** t,
                     y0 * (1 - t))
        zt = z.real + 1j * sgn * y
        g = _newton(g, zt, k)
    res = np.abs(_green_residual(g, z, k))
    bad = ~(res < 1e-12 * np.maximum(1.0, np.abs(z)))
    if np.any(bad):
        g_bad = _newton(g[bad], z[bad], k, max_iter=200, tol=1e-15)
        g[bad] = g_bad
        res = np.abs(_green_residual(g, z, k))
    return g.reshape(shape), res.reshape(shape)


def solve_green_uniform_plus_wigner(lam: float, z: complex) -> complex:
    """Single-point Green function solve; raises if the residual exceeds 1e-12."""
    g, res = solve_green_grid(lam, np.array([z]))
    if not res[0] < 1e-12 * max(1.0, abs(z)):
        raise GreenSolverError(f"Newton failed at z={z}: residual {res[0]:.3e}")
    return complex(g[0])


def density_from_green(lam: float, grid=None, eps: float = 1e-6, step: float = 5e-4,
                       bound: Optional[float] = None) -> Density:
    """Spectral density ``|Im G(x - i eps)| / pi`` of ``sqrt(lam) S + xi``.

    Points whose residual is not below 1e-12 are dropped and counted in
    ``flags['dropped']``.  ``flags['richardson']`` is the largest change of
    the density when ``eps`` is doubled.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if grid is None:
        if bound is None:
            bound = 4.0 * max(1.0, math.sqrt(lam))
        n = int(round(2 * bound / step)) + 1
        grid = np.linspace(-bound, bound, n)
    grid = np.asarray(grid, dtype=float)
    g, res = solve_green_grid(lam, grid - 1j * eps)
    ok = res < 1e-12 * np.maximum(1.0, np.abs(grid))
    rho = np.clip(np.abs(g.imag) / math.pi, 0.0, None)
    g2, _ = solve_green_grid(lam, grid[ok] - 2j * eps)
    rich = float(np.max(np.abs(np.abs(g2.imag) / math.pi - rho[ok]))) if ok.any() else 0.0
    x, v = grid[ok], rho[ok]
    return Density((x[0], x[-1]), "uniform_plus_wigner", {"lambda": lam, "eps": eps},
                   grid=x, values=v,
                   flags={"dropped": int((~ok).sum()), "richardson": rich})


# ---------------------------------------------------------------------------
# Tricomi formulas
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TricomiInput:
    """``G'(x) = G_{-1}/x + G_0 + G_1 x + G_2 x^2 + G_3 x^3`` on ``[a, b]``."""

    g_coeffs: tuple
    a: float
    b: float
    C: object = NORMALIZE

    def __post_init__(self):
        gc = tuple(float(c) for c in self.g_coeffs)
        if len(gc) != 5:
            raise ValueError("g_coeffs must hold (G_-1, G_0, G_1, G_2, G_3)")
        object.__setattr__(self, "g_coeffs", gc)
        if not self.a < self.b:
            raise ValueError("support must satisfy a < b")
        if gc[0] != 0 and self.a <= 0 <= self.b:
            raise ValueError("a 1/x term needs 0 outside [a, b]")
        if self.C != NORMALIZE and not isinstance(self.C, (int, float)):
            raise ValueError("C must be a number or NORMALIZE")

    @property
    def m(self) -> float:
        return 0.5 * (self.a + self.b)

    @property
    def s(self) -> float:
        return 0.5 * (self.b - self.a)


def _sign_ab(a, b) -> float:
    return float(a > 0) - float(b < 0)


def arcsine_moments(a: float, b: float, p: int) -> float:
    """``d_p = int y^p / (pi sqrt((y-a)(b-y))) dy`` over ``[a, b]``.

    ``d_{-1} = (1(a>0) - 1(b<0)) / sqrt(ab)`` is defined only when 0 is
    outside the support.
    """
    if not a < b:
        raise ValueError("need a < b")
    p = int(p)
    if p < -1:
        raise ValueError("p must be >= -1")
    if p == -1:
        if a <= 0 <= b:
            raise ValueError("d_{-1} needs 0 outside [a, b]")
        return _sign_ab(a, b) / math.sqrt(a * b)
    m, s = 0.5 * (a + b), 0.5 * (b - a)
    total = 0.0
    for ell in range(p + 1):
        q = p - ell
        if q % 2:
            continue
        total += comb(p, ell, exact=True) * comb(q, q // 2, exact=True) * m**ell * s**q / 2.0**q
    return float(total)


def _semi_moment(k: int, m: float, s: float) -> float:
    """``int_a^b sqrt((x-a)(b-x)) x^k dx / pi``."""
    total = 0.0
    for ell in range(0, k + 1, 2):
        total += (comb(k, ell, exact=True) * (s / 2) ** ell * m ** (k - ell)
                  * (comb(ell, ell // 2, exact=True) - 0.25 * comb(ell + 2, ell // 2 + 1, exact=True)))
    return s * s * total


def tricomi_Ip(y, a: float, b: float, p: int):
    """``I_p(y) = PV int_a^b sqrt((x-a)(b-x)) x^p / (pi (y - x)) dx``."""
    if not a < b:
        raise ValueError("need a < b")
    if p < -1 or p > 3:
        raise ValueError("p must lie in [-1, 3]")
    y = np.asarray(y, dtype=float)
    m, s = 0.5 * (a + b), 0.5 * (b - a)

    def i0(t):
        t = np.asarray(t, dtype=float)
        ind = (t < a).astype(float) - (t > b).astype(float)
        root = np.sqrt(np.clip((t - a) * (t - b), 0, None))
        return (t - m) + ind * root

    if p == -1:
        if a <= 0 <= b:
            raise ValueError("I_{-1} needs 0 outside [a, b]")
        out = (i0(y) - i0(0.0)) / y
    else:
        out = y**p * i0(y)
        for k in range(p):
            out = out - y ** (p - 1 - k) * _semi_moment(k, m, s)
    return out if np.ndim(out) else float(out)


def _tricomi_numerator_coeffs(inp: TricomiInput, C: float):
    """Coefficients of the in-support numerator in powers of ``y`` (and ``1/y``)."""
    gm1, g0, g1, g2, g3 = inp.g_coeffs
    m, s = inp.m, inp.s
    c0 = C - gm1 + g0 * m + g1 * s * s / 2 + g2 * m * s * s / 2 + g3 * (m * m * s * s / 2 + s**4 / 8)
    c1 = -g0 + g1 * m + g2 * s * s / 2 + g3 * m * s * s / 2
    c2 = -g1 + g2 * m + g3 * s * s / 2
    c3 = -g2 + g3 * m
    c4 = -g3
    cinv = gm1 * _sign_ab(inp.a, inp.b) * math.sqrt(abs(inp.a * inp.b)) if gm1 else 0.0
    return cinv, (c0, c1, c2, c3, c4)


def tricomi_density(inp: TricomiInput, check_points: int = 2001) -> Density:
    """Equilibrium density on ``[a, b]`` for the potential derivative ``G'``.

    With ``C = NORMALIZE`` the constant is fixed analytically through the
    arcsine moments ``d_p`` so that the density has unit mass.
    """
    a, b = inp.a, inp.b
    if inp.C == NORMALIZE:
        cinv, cs = _tricomi_numerator_coeffs(inp, 0.0)
        mass = sum(c * arcsine_moments(a, b, p) for p, c in enumerate(cs))
        if cinv:
            mass += cinv * arcsine_moments(a, b, -1)
        C = 1.0 - mass
    else:
        C = float(inp.C)
    cinv, cs = _tricomi_numerator_coeffs(inp, C)

    def f(y):
        y = np.asarray(y, dtype=float)
        num = np.polyval(cs[::-1], y)
        if cinv:
            num = num + cinv / y
        return num / (math.pi * np.sqrt((y - a) * (b - y)))

    margin = 1e-6 * inp.s
    yy = np.linspace(a + margin, b - margin, check_points)
    vals = f(yy)
    if np.any(vals < -1e-12):
        raise InvalidDensityError("Tricomi density is negative inside the support")
    return Density((a, b), "tricomi", {"g_coeffs": inp.g_coeffs, "C": C},
                   pdf_fn=lambda y: np.clip(f(y), 0.0, None))


# ---------------------------------------------------------------------------
# potential reconstruction
# ---------------------------------------------------------------------------


@dataclass
class TabulatedPotential:
    """``V`` and ``V'`` tabulated on a grid inside the support."""

    x: np.ndarray
    V: np.ndarray
    dV: np.ndarray

    def value(self, t):
        return np.interp(t, self.x, self.V)

    def derivative(self, t):
        return np.interp(t, self.x, self.dV)


def hilbert_transform(rho: Density, x, n_nodes: int = 4000) -> np.ndarray:
    """Principal value ``int rho(t)/(x - t) dt`` by singularity subtraction.

    ``int (rho(t) - rho(x))/(x - t) dt + rho(x) ln((x - a)/(b - x))``; the
    regular integral uses Gauss-Legendre nodes mapped through
    ``t = m - s cos(theta)``, which clusters nodes at the square-root edges.
    """
    a, b = rho.support
    m, s = 0.5 * (a + b), 0.5 * (b - a)
    u, w = np.polynomial.legendre.leggauss(n_nodes)
    th = 0.5 * math.pi * (u + 1.0)
    t = m - s * np.cos(th)
    wt = w * 0.5 * math.pi * s * np.sin(th)
    rt = rho.pdf(t)
    x = np.asarray(x, dtype=float)
    rx = rho.pdf(x)
    d = x[:, None] - t[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        integrand = (rt[None, :] - rx[:, None]) / d
    integrand[~np.isfinite(integrand)] = 0.0
    reg = integrand @ wt
    return reg + rx * np.log((x - a) / (b - x))


def potential_from_density(rho: Density, beta: int = 2, n_grid: int = 801,
                           margin: float = 1e-3) -> TabulatedPotential:
    """Reconstruct the confining potential from its equilibrium density.

    ``V' = 4 H_rho``, the constant being fixed so that the semicircle of unit
    variance gives ``V(x) = x^2``; the warm-up stationarity ``V'/4 = R`` makes
    it independent of ``beta``.  ``V`` is the cumulative trapezoid of ``V'``
    with ``V = 0`` at the center of the support.
    """
    from .ensembles import check_beta

    check_beta(beta)
    a, b = rho.support
    s = 0.5 * (b - a)
    x = np.linspace(a + margin * s, b - margin * s, n_grid)
    h = hilbert_transform(rho, x)
    if not np.all(np.isfinite(h)):
        raise ArithmeticError("principal-value quadrature did not converge")
    dv = 4.0 * h
    v = integrate.cumulative_trapezoid(dv, x, initial=0.0)
    v -= np.interp(0.5 * (a + b), x, v)
    return TabulatedPotential(x, v, dv)


def interpolate_density(x, rho) -> Density:
    """Cubic Hermite interpolant through ``(x, rho)`` samples, clipped at zero.

    Slopes come from second-order finite differences.
    """
    x = np.asarray(x, dtype=float)
    rho = np.asarray(rho, dtype=float)
    if x.size < 4 or x.shape != rho.shape:
        raise ValueError("need at least 4 matching points")
    if np.any(np.diff(x) <= 0):
        raise ValueError("grid must be strictly increasing")
    slopes = np.gradient(rho, x, edge_order=2)
    spline = CubicHermiteSpline(x, rho, slopes)
    mass = float(np.trapezoid(rho, x))
    return Density((x[0], x[-1]), "hermite", grid=x, values=np.clip(rho, 0, None),
                   interpolant=spline,
                   flags={"mass": mass, "renormalized": False,
                          "normalization_deficit": abs(mass - 1.0) > 2e-3})
