"""Exact moment/free-cumulant algebra and small-lambda expansions.

All arithmetic is symbolic (sympy) with rational coefficients.  The
signal-to-noise ratio is carried through ``t = sqrt(lambda)`` so that half
integer powers of lambda are ordinary polynomial powers of ``t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping

import sympy as sp

__all__ = [
    "LAM",
    "T",
    "MAX_ORDER",
    "ExpansionSeries",
    "moments_from_cumulants",
    "cumulants_from_moments",
    "data_cumulants",
    "zjz_F",
    "spherical_series",
    "dbar_derivatives",
    "mi_expansion",
    "mmse_expansion",
    "normalize_moments",
    "wigner_moments",
    "uniform_moments",
    "centered_mp_moments",
]

LAM = sp.Symbol("lambda", positive=True)
T = sp.Symbol("t", positive=True)  # t = sqrt(lambda)
MAX_ORDER = 8
_Z = sp.Symbol("z")


def _vector(values, name: str, length: int = MAX_ORDER) -> list:
    """Index-1 list ``[v_1, ..., v_length]``; missing entries become symbols."""
    if isinstance(values, Mapping):
        out = [values.get(p) for p in range(1, length + 1)]
    else:
        vals = list(values)
        out = vals[:length] + [None] * (length - len(vals))
    return [sp.Symbol(f"{name}{p}") if v is None else sp.nsimplify(v) if isinstance(v, float)
            else sp.sympify(v) for p, v in enumerate(out, start=1)]


def _truncate(expr, var, order: int):
    poly = sp.Poly(sp.expand(expr), var)
    return sum((c * var**m[0] for m, c in poly.terms() if m[0] <= order), sp.Integer(0))


def _series_coeffs(coeffs: list, exponent: int, order: int) -> list:
    """Coefficients of ``(sum_j a_j z^j)^exponent`` up to ``z^order``, ``a_0 = 1``.

    Uses the J.C.P. Miller recurrence, valid for any (also negative) exponent.
    """
    a = list(coeffs) + [sp.Integer(0)] * (order + 1 - len(coeffs))
    b = [sp.Integer(1)] + [sp.Integer(0)] * order
    for n in range(1, order + 1):
        b[n] = sp.expand(sum(((exponent + 1) * j - n) * a[j] * b[n - j]
                             for j in range(1, n + 1)) / n)
    return b


# ---------------------------------------------------------------------------
# moments <-> free cumulants
# ---------------------------------------------------------------------------


def moments_from_cumulants(k) -> list:
    """Moments ``m_1..m_8`` from free cumulants ``k_1..k_8``.

    Order-by-order solution of ``M(z) = 1 + sum_p k_p (z M(z))^p``.
    """
    k = _vector(k, "k")
    m = [sp.Integer(1)]
    for n in range(1, MAX_ORDER + 1):
        # [z^n] sum_p k_p z^p M^p only needs m_0..m_{n-1}
        m.append(sp.expand(sum(k[p - 1] * _series_coeffs(m, p, n - p)[n - p]
                               for p in range(1, n + 1))))
    return m[1:]


def cumulants_from_moments(m) -> list:
    """Free cumulants ``k_1..k_8`` from moments ``m_1..m_8``.

    ``k_1 = m_1`` and ``k_p = -[z^p] M(z)^{1-p} / (p - 1)`` for ``p >= 2``
    (Lagrange inversion), with ``M(z) = 1 + sum m_p z^p``.
    """
    m = _vector(m, "m")
    a = [sp.Integer(1)] + m
    out = [sp.expand(m[0])]
    for p in range(2, MAX_ORDER + 1):
        out.append(sp.expand(-_series_coeffs(a, 1 - p, p)[p] / (p - 1)))
    return out


def data_cumulants(k_signal, lam=LAM) -> list:
    """Free cumulants of ``sqrt(lam) S + xi`` from those of ``S``.

    ``c_1 = 0``, ``c_2 = lam k_2 + 1`` and ``c_p = k_p lam^{p/2}`` otherwise;
    the Wigner noise only shifts the second cumulant.
    """
    k = _vector(k_signal, "k")
    if k[0] != 0:
        raise ValueError("signal must be centered (k_1 = 0)")
    lam = sp.sympify(lam)
    root = sp.sqrt(lam)
    c = [sp.Integer(0), sp.expand(lam * k[1] + 1)]
    c += [sp.expand(k[p - 1] * root**p) for p in range(3, MAX_ORDER + 1)]
    return c


# ---------------------------------------------------------------------------
# F-terms of the small-coupling expansion
# ---------------------------------------------------------------------------


def zjz_F(theta, c, n: int):
    """Term ``F_n`` of ``I = sum_n lambda^{n/2} F_n`` for ``n = 2..8``.

    ``theta`` holds the signal moments (with ``theta_2 = 1`` built in) and
    ``c`` the free cumulants of the data, both indexed from 1.
    """
    if not 2 <= n <= 8:
        raise ValueError("F_n is available for 2 <= n <= 8 only")
    m = _vector(theta, "m")
    c = _vector(c, "c")
    m3, m4, m5, m6, m7, m8 = m[2:8]
    c2, c3, c4, c5, c6, c7, c8 = c[1:8]
    R = sp.Rational
    if n == 2:
        f = c2 / 2
    elif n == 3:
        f = c3 * m3 / 3
    elif n == 4:
        f = c4 * m4 / 4 - R(1, 2) * (c2**2 / 2 + c4)
    elif n == 5:
        f = c5 * m5 / 5 - m3 * (c2 * c3 + c5)
    elif n == 6:
        f = (-R(1, 2) * m3**2 * (c2**3 / 3 + c2 * c4 + c3**2 + c6)
             + R(1, 6) * (2 * c2**3 + 12 * c2 * c4 + 5 * c3**2 + 7 * c6)
             - m4 * (c2 * c4 + c3**2 / 2 + c6) + c6 * m6 / 6)
    elif n == 7:
        f = (-m3 * m4 * (c2**2 * c3 + c2 * c5 + 2 * c3 * c4 + c7)
             + m3 * (5 * c2**2 * c3 + 7 * c2 * c5 + 8 * c3 * c4 + 4 * c7)
             - m5 * (c2 * c5 + c3 * c4 + c7) + c7 * m7 / 7)
    else:
        f = (-m3 * m5 * (c2**2 * c4 + c2 * c3**2 + c2 * c6 + 2 * c3 * c5 + c4**2 + c8)
             + m3**2 * (2 * c2**4 + 16 * c2**2 * c4 + 20 * c2 * c3**2 + 16 * c2 * c6
                        + 24 * c3 * c5 + 11 * c4**2 + 9 * c8)
             - R(1, 2) * m4**2 * (c2**4 / 4 + c2**2 * c4 + 2 * c2 * c3**2 + c2 * c6
                                  + 2 * c3 * c5 + R(3, 2) * c4**2 + c8)
             + R(1, 2) * m4 * (c2**4 + 11 * c2**2 * c4 + 14 * c2 * c3**2 + 16 * c2 * c6
                               + 18 * c3 * c5 + 11 * c4**2 + 9 * c8)
             - R(3, 8) * (3 * c2**4 + 24 * c2**2 * c4 + 24 * c2 * c3**2 + 24 * c2 * c6
                          + 24 * c3 * c5 + 15 * c4**2 + 10 * c8)
             - m6 * (c2 * c6 + c3 * c5 + c4**2 / 2 + c8) + c8 * m8 / 8)
    return sp.expand(f)


# ---------------------------------------------------------------------------
# series container
# ---------------------------------------------------------------------------


@dataclass
class ExpansionSeries:
    """Coefficients of ``lambda^{n/2}``, keyed by the rational exponent ``n/2``."""

    coeffs: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        clean = {}
        for e, c in self.coeffs.items():
            e = sp.Rational(e)
            if (2 * e).q != 1 or e < 0 or e > 8:
                raise ValueError(f"exponent {e} is not a half-integer in [0, 8]")
            clean[e] = sp.simplify(c)
        self.coeffs = dict(sorted(clean.items()))

    @classmethod
    def from_t_polynomial(cls, expr, max_exponent, notes=None) -> "ExpansionSeries":
        """Read coefficients off a polynomial in ``t = sqrt(lambda)``."""
        poly = sp.Poly(sp.expand(expr), T)
        coeffs = {}
        for n in range(0, int(2 * max_exponent) + 1):
            coeffs[sp.Rational(n, 2)] = sp.expand(poly.coeff_monomial(T**n))
        return cls(coeffs, notes or {})

    def __getitem__(self, exponent):
        return self.coeffs.get(sp.Rational(exponent), sp.Integer(0))

    def integer_orders(self, upto: int) -> list:
        return [self[k] for k in range(1, upto + 1)]

    def as_expr(self, var=LAM):
        return sum((c * var**e for e, c in self.coeffs.items()), sp.Integer(0))

    def to_records(self) -> list:
        out = []
        for e, c in self.coeffs.items():
            n = int(2 * e)
            rec = {"exponent": f"{n}/2"}
            if c.is_Rational:
                rec.update(numerator=int(c.p), denominator=int(c.q))
            else:
                rec.update(numerator=str(c), denominator=1)
            out.append(rec)
        return out


# ---------------------------------------------------------------------------
# expansions
# ---------------------------------------------------------------------------


def normalize_moments(theta) -> tuple:
    """Rescale centered moments to unit variance.

    Returns ``(theta', theta_2)`` with ``theta'_p = theta_p / theta_2^{p/2}``;
    the expansion in ``lambda'`` equals the original one at
    ``lambda' = lambda theta_2``.
    """
    th = _vector(theta, "theta")
    if th[0] != 0:
        raise ValueError("signal must be centered (theta_1 = 0)")
    th2 = th[1]
    if th2.is_number and th2 <= 0:
        raise ValueError("theta_2 must be positive")
    return [sp.simplify(th[p - 1] / th2 ** sp.Rational(p, 2)) for p in range(1, MAX_ORDER + 1)], th2


def spherical_series(theta, max_n: int = 8):
    """``I = sum_{n=2}^{max_n} t^n F_n`` as a polynomial in ``t`` (unit variance).

    The data cumulants are those of ``t S + xi``.
    """
    th = _vector(theta, "theta")
    k = cumulants_from_moments(th)
    c = data_cumulants(k, T**2)
    return sp.expand(sum(T**n * zjz_F(th, c, n) for n in range(2, max_n + 1)))


def mi_expansion(theta, max_order: int = 4) -> ExpansionSeries:
    """Small-lambda series of the per-``N^2`` mutual information (``beta=2``).

    ``MI = lambda theta_2 - sum_n lambda^{n/2} F_n`` truncated at
    ``lambda^max_order``.  Signals with ``theta_2 != 1`` are normalized and
    the series mapped back through ``lambda' = lambda theta_2``.
    """
    if max_order > 4:
        raise ValueError("orders above lambda^4 need F_n with n > 8")
    if max_order < 1:
        raise ValueError("max_order must be >= 1")
    th, th2 = normalize_moments(theta)
    i_t = spherical_series(th, 8)
    mi_t = _truncate(T**2 - i_t, T, 2 * max_order)
    # lambda' = lambda theta_2  <=>  t' = t sqrt(theta_2)
    mi_t = sp.expand(mi_t.subs(T, T * sp.sqrt(th2)))
    return ExpansionSeries.from_t_polynomial(mi_t, max_order,
                                             notes={"theta2": th2, "normalized": th2 != 1})


_DBAR_ORDER = {2: 4, 3: 3, 4: 4}  # kept powers of t


def _data_moment_symbols():
    return [sp.Symbol(f"thetabar{p}") for p in range(1, MAX_ORDER + 1)]


def _spherical_in_data_moments(th, max_n=8):
    """``I`` as a function of ``t`` and symbolic data moments ``thetabar_p``."""
    tb = _data_moment_symbols()
    tb_centered = [sp.Integer(0)] + tb[1:]
    c = cumulants_from_moments(tb_centered)
    expr = sum(T**n * zjz_F(th, c, n) for n in range(2, max_n + 1))
    return sp.expand(expr), tb


def _data_moments(th):
    """Data moments ``thetabar_p`` as polynomials in ``t``."""
    k = cumulants_from_moments(th)
    return moments_from_cumulants(data_cumulants(k, T**2))


def dbar_derivatives(theta, p: int):
    """``Dbar_p = p dI/dthetabar_p`` at the data moments, as a polynomial in lambda.

    Truncations: ``Dbar_2`` and ``Dbar_4`` through ``lambda^2``, ``Dbar_3``
    through ``lambda^{3/2}``.  Returned as an expression in ``LAM``.
    """
    if p not in _DBAR_ORDER:
        raise ValueError("Dbar_p is available for p in {2, 3, 4}")
    th, th2 = normalize_moments(theta)
    if th2 != 1:
        raise ValueError("dbar_derivatives expects unit-variance moments")
    expr, tb = _spherical_in_data_moments(th, max_n=8)
    d = sp.diff(expr, tb[p - 1]) * p
    tbar = _data_moments(th)
    d = sp.expand(d.subs({tb[q - 1]: tbar[q - 1] for q in range(1, MAX_ORDER + 1)}))
    d = _truncate(d, T, _DBAR_ORDER[p])
    return sp.expand(d.subs(T, sp.sqrt(LAM)))


def mmse_expansion(theta, max_order: int = 2) -> ExpansionSeries:
    """Series of ``beta`` times the MMSE at ``beta=2``, through ``lambda^2``.

    ``4 theta_2 - 4 sum_n (n/2) lambda^{n/2-1} F_n - 4 sum_p (Dbar_p/p)
    dthetabar_p/dlambda``: the first sum differentiates at fixed data
    moments, the second carries their lambda dependence.
    """
    if max_order > 2:
        raise ValueError("the Dbar truncations support orders up to lambda^2")
    th, th2 = normalize_moments(theta)
    expr, tb = _spherical_in_data_moments(th, max_n=8)
    tbar = _data_moments(th)
    subs = {tb[q - 1]: tbar[q - 1] for q in range(1, MAX_ORDER + 1)}
    # d/dlambda = (1/(2t)) d/dt
    partial = sp.expand(sp.diff(expr, T).subs(subs))
    chain = sp.Integer(0)
    for q in range(2, MAX_ORDER + 1):
        dq = sp.diff(expr, tb[q - 1])
        if dq == 0:
            continue
        chain += sp.expand(dq.subs(subs)) * sp.diff(tbar[q - 1], T)
    d_i_dt = _truncate(partial + sp.expand(chain), T, 2 * max_order + 1)
    d_i_dlam = sp.expand(d_i_dt / (2 * T))
    series_t = sp.expand(4 - 4 * d_i_dlam)
    # map back: MMSE(lambda) = theta_2 * MMSE'(lambda theta_2) in beta*MMSE units
    series_t = sp.expand(th2 * series_t.subs(T, T * sp.sqrt(th2)))
    series_t = _truncate(series_t, T, 2 * max_order)
    return ExpansionSeries.from_t_polynomial(series_t, max_order,
                                             notes={"theta2": th2, "normalized": th2 != 1})


# ---------------------------------------------------------------------------
# reference moment vectors
# ---------------------------------------------------------------------------


def wigner_moments() -> list:
    """Catalan moments of the unit semicircle."""
    return [0 if p % 2 else sp.catalan(p // 2) for p in range(1, MAX_ORDER + 1)]


def uniform_moments() -> list:
    """Moments of the uniform law on ``[-sqrt 3, sqrt 3]`` (unit variance)."""
    return [0 if p % 2 else sp.Integer(3) ** (p // 2) / (p + 1) for p in range(1, MAX_ORDER + 1)]


def centered_mp_moments(phi) -> list:
    """Moments of ``X X^† - 1`` for the Marchenko-Pastur law of ratio ``phi``.

    Raw moments ``(1/p) sum_k phi^{k-1} C(p,k) C(p,k-1)``, then centered by
    the binomial expansion.
    """
    phi = sp.Rational(phi) if not isinstance(phi, sp.Basic) else phi
    raw = [sp.Integer(1)]
    for p in range(1, MAX_ORDER + 1):
        raw.append(sum(phi ** (k - 1) * sp.binomial(p, k) * sp.binomial(p, k - 1)
                       for k in range(1, p + 1)) / p)
    cen = []
    for p in range(1, MAX_ORDER + 1):
        cen.append(sp.expand(sum(sp.binomial(p, j) * raw[j] * (-1) ** (p - j)
                                 for j in range(p + 1))))
    return cen


def as_fraction(x) -> Fraction:
    x = sp.Rational(x)
    return Fraction(int(x.p), int(x.q))
