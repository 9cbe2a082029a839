"""Spherical (HCIZ) integrals and their eigenvalue gradients.

The quantity computed throughout is

    I_N(A, B, gamma) = N^{-2} ln E_U exp((beta gamma / 2) N Tr[U^† A U B])

with ``U`` Haar-distributed on the orthogonal (``beta=1``) or unitary
(``beta=2``) group.  Only the spectra of ``A`` and ``B`` matter.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import gammaln, i0e

from .ensembles import check_beta

__all__ = [
    "HcizEstimate",
    "DegenerateSpectrumError",
    "NumericalBreakdownError",
    "BHValidityWarning",
    "LowESSWarning",
    "stabilizer_m",
    "hciz_exact_beta2",
    "hciz_grad_exact_beta2",
    "kernel_weighted_trace",
    "hciz_bh_beta1",
    "hciz_bh_grad",
    "hciz_mc",
    "hciz_grad_mc",
    "hciz_semicircle_closed",
    "hciz_rect_exact",
    "BH_CONVENTIONS",
]

EXACT_DET = "ExactDet"
BH = "BH"
MONTE_CARLO = "MonteCarlo"
SEMICIRCLE_CLOSED = "SemicircleClosed"
RECT_EXACT_DET = "RectExactDet"
_DETERMINISTIC = {EXACT_DET, BH, SEMICIRCLE_CLOSED, RECT_EXACT_DET}

# coefficient c of the pair term -(c / N^2) sum_{i<j} ln(1 + ...)
BH_CONVENTIONS = {"half_pairs": 0.5, "pairs": 1.0, "ordered_pairs": 2.0}


class DegenerateSpectrumError(ValueError):
    """Two eigenvalues of one spectrum coincide."""


class NumericalBreakdownError(ArithmeticError):
    """The determinant formula lost its sign or overflowed."""


class BHValidityWarning(RuntimeWarning):
    """Some pair violates the Brezin-Hikami validity criterion."""


class LowESSWarning(RuntimeWarning):
    """The tilted Monte-Carlo weights have a small effective sample size."""


@dataclass
class HcizEstimate:
    value: float
    stderr: float
    method: str
    n: int
    validity: Optional[np.ndarray] = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stderr < 0:
            raise ValueError("stderr must be non-negative")
        if self.method in _DETERMINISTIC and self.stderr != 0:
            raise ValueError("deterministic methods carry zero stderr")
        if (self.validity is not None) != (self.method == BH):
            raise ValueError("validity flags are present exactly for the BH method")

    @property
    def validity_violations(self) -> list:
        if self.validity is None:
            return []
        i, j = np.nonzero(np.triu(self.validity, 1))
        return [[int(a), int(b)] for a, b in zip(i, j)]

    def to_dict(self) -> dict:
        return {
            "value": float(self.value),
            "stderr": float(self.stderr),
            "method": self.method,
            "n": int(self.n),
            "validity_violations": self.validity_violations,
        }


def _vec(x) -> np.ndarray:
    values = getattr(x, "values", x)
    return np.asarray(values, dtype=float).reshape(-1)


def _log_abs_vandermonde(x: np.ndarray, what: str = "spectrum", tol: float = 1e-12):
    """Return ``(sign, ln|Delta(x)|)`` with ``Delta = prod_{i<j} (x_j - x_i)``."""
    n = x.size
    if n < 2:
        return 1.0, 0.0
    d = x[None, :] - x[:, None]
    iu = np.triu_indices(n, 1)
    diffs = d[iu]
    if np.min(np.abs(diffs)) <= tol:
        raise DegenerateSpectrumError(f"repeated eigenvalues in {what}")
    sign = -1.0 if np.count_nonzero(diffs < 0) % 2 else 1.0
    return sign, float(np.sum(np.log(np.abs(diffs))))


def _log_sum_factorials(n: int) -> float:
    """``ln prod_{k=1}^{n-1} k!``."""
    return float(np.sum(gammaln(np.arange(1, n) + 1.0)))


def stabilizer_m(x, y, c: float, rho: float = 0.5) -> float:
    """Exponent offset ``rho * max + (1 - rho) * min`` of ``c x_i y_j``."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    e = c * np.outer(_vec(x), _vec(y))
    return float(rho * e.max() + (1.0 - rho) * e.min())


def _stabilized_kernel(x, y, c, n, m):
    """``exp(n (c x_i y_j - m))`` with row and column maxima removed.

    Returns the scaled kernel and the total log-scale that was removed, so
    that ``ln det K = ln det K_scaled + shift``.
    """
    e = n * (c * np.outer(x, y) - m)
    rmax = e.max(axis=1, keepdims=True)
    e = e - rmax
    cmax = e.max(axis=0, keepdims=True)
    e = e - cmax
    return np.exp(e), float(rmax.sum() + cmax.sum())


def hciz_exact_beta2(lamA, lamB, gamma: float, rho: float = 0.5,
                     condition_warn: float = 1e12) -> HcizEstimate:
    """Exact unitary spherical integral from the determinant formula.

    Parameters
    ----------
    lamA, lamB : array_like or Spectrum
        Eigenvalues of the two matrices, equal lengths.
    gamma : float
        Coupling; the integrand is ``exp(gamma N Tr[U^† A U B])``.
    rho : float
        Mixing weight of the exponent stabilizer.

    Returns
    -------
    HcizEstimate
        ``diagnostics['log10_cond']`` holds the condition number of the
        scaled kernel, which grows quickly past N of about 10.
    """
    a, b = _vec(lamA), _vec(lamB)
    n = a.size
    if b.size != n:
        raise ValueError("spectra must have equal lengths")
    _log_abs_vandermonde(a, "lamA")
    _log_abs_vandermonde(b, "lamB")
    if gamma == 0:
        return HcizEstimate(0.0, 0.0, EXACT_DET, n, diagnostics={"log10_cond": 0.0})
    ta, tb = a.mean(), b.mean()
    shift = gamma * ta * tb
    a0, b0 = a - ta, b - tb
    if n == 1:
        return HcizEstimate(float(gamma * a[0] * b[0]), 0.0, EXACT_DET, 1,
                            diagnostics={"log10_cond": 0.0})
    sa, lda = _log_abs_vandermonde(a0, "lamA")
    sb, ldb = _log_abs_vandermonde(b0, "lamB")
    m = stabilizer_m(a0, b0, gamma, rho)
    k, scale = _stabilized_kernel(a0, b0, gamma, n, m)
    sdet, ldet = np.linalg.slogdet(k)
    npairs = n * (n - 1) // 2
    sg = -1.0 if (gamma < 0 and npairs % 2) else 1.0
    sign = sdet * sa * sb * sg
    if sdet == 0 or sign < 0 or not np.isfinite(ldet):
        raise NumericalBreakdownError(
            "determinant ratio came out non-positive; reduce N or use the Monte-Carlo method")
    log_int = (_log_sum_factorials(n) - npairs * math.log(abs(gamma) * n)
               + ldet + scale + n * n * m - lda - ldb)
    cond = float(np.linalg.cond(k))
    log10_cond = math.log10(cond) if np.isfinite(cond) and cond > 0 else float("inf")
    if log10_cond > math.log10(condition_warn):
        warnings.warn(f"ill-conditioned kernel (log10 cond = {log10_cond:.1f})",
                      RuntimeWarning, stacklevel=2)
    return HcizEstimate(float(log_int / n**2 + shift), 0.0, EXACT_DET, n,
                        diagnostics={"log10_cond": log10_cond})


def kernel_weighted_trace(x, y, c: float, weights, m: Optional[float] = None,
                          rho: float = 0.5) -> np.ndarray:
    """``diag(K diag(w) K^{-1})`` for ``K_ij = exp(N (c x_i y_j - m))``.

    Entry ``i`` is ``sum_j (K^{-1})_{ji} w_j K_ij``.  The result does not
    depend on ``m`` nor on any diagonal rescaling of rows and columns.
    """
    x, y, w = _vec(x), _vec(y), _vec(weights)
    n = x.size
    if m is None:
        m = stabilizer_m(x, y, c, rho)
    k, _ = _stabilized_kernel(x, y, c, n, m)
    kt = k.T
    try:
        sol = np.linalg.solve(kt, (k * w[None, :]).T)
    except np.linalg.LinAlgError as exc:
        raise DegenerateSpectrumError(f"singular kernel matrix: {exc}") from exc
    return np.diagonal(sol).copy()


def hciz_grad_exact_beta2(lamS, lamY, lam: float, m: Optional[float] = None,
                          rho: float = 0.5) -> np.ndarray:
    """Determinant-gradient part of the unitary spherical integral.

    Entry ``i`` equals ``N dI/dlam_i^s + R_i`` where ``I = I_N(lamS, lamY,
    sqrt(lam))`` and ``R`` is the resolvent of ``lamS``.

    Parameters
    ----------
    m : float, optional
        Exponent stabilizer; defaults to the ``rho``-mix of the extreme
        exponents. The output is independent of it up to round-off.
    """
    s, y = _vec(lamS), _vec(lamY)
    if s.size != y.size:
        raise ValueError("spectra must have equal lengths")
    if lam <= 0:
        raise ValueError("lambda must be positive")
    _log_abs_vandermonde(s, "lamS")
    _log_abs_vandermonde(y, "lamY")
    c = math.sqrt(lam)
    return kernel_weighted_trace(s, y, c, c * y, m=m, rho=rho)


# ---------------------------------------------------------------------------
# Brezin-Hikami approximation (beta = 1)
# ---------------------------------------------------------------------------


def _check_desc(x, name):
    if np.any(np.diff(x) > 0):
        raise ValueError(f"{name} must be sorted in descending order")


def _bh_pairs(s, y, lam):
    ds = s[:, None] - s[None, :]
    dy = y[:, None] - y[None, :]
    return math.sqrt(lam) * ds * dy, dy


def hciz_bh_beta1(lamS, lamY, lam: float, convention: str = "half_pairs") -> HcizEstimate:
    """Brezin-Hikami approximation of the orthogonal spherical integral.

    ``(sqrt(lam)/(2N)) sum_i s_i y_i - (c/N^2) sum_{i<j} ln(1 + x_ij)`` with
    ``x_ij = sqrt(lam)(s_i - s_j)(y_i - y_j)`` and ``c`` fixed by
    ``convention`` (see ``BH_CONVENTIONS``).  With ``c = 1/2`` the term linear
    in ``sqrt(lam)`` cancels for traceless spectra, as it must.

    Pairs with ``x_ij >= 1`` are flagged in ``validity`` and trigger a
    ``BHValidityWarning``.
    """
    s, y = _vec(lamS), _vec(lamY)
    n = s.size
    if y.size != n:
        raise ValueError("spectra must have equal lengths")
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    _check_desc(s, "lamS")
    _check_desc(y, "lamY")
    coef = BH_CONVENTIONS[convention]
    if lam == 0:
        return HcizEstimate(0.0, 0.0, BH, n, validity=np.zeros((n, n), dtype=bool))
    x, _ = _bh_pairs(s, y, lam)
    iu = np.triu_indices(n, 1)
    viol = np.zeros((n, n), dtype=bool)
    viol[iu] = x[iu] >= 1.0
    if viol.any():
        warnings.warn(f"{int(viol.sum())} pair(s) violate the Brezin-Hikami criterion",
                      BHValidityWarning, stacklevel=2)
    value = (math.sqrt(lam) / (2 * n) * float(s @ y)
             - coef / n**2 * float(np.sum(np.log1p(x[iu]))))
    return HcizEstimate(value, 0.0, BH, n, validity=viol,
                        diagnostics={"convention": convention})


def hciz_bh_grad(lamS, lamY, lam: float, convention: str = "half_pairs") -> np.ndarray:
    """Minus ``N`` times the ``lamS``-gradient of :func:`hciz_bh_beta1`.

    Entry ``i`` is ``(c sqrt(lam)/N) sum_{j != i} (y_i - y_j)/(1 + x_ij)
    - (sqrt(lam)/2) y_i``.
    """
    s, y = _vec(lamS), _vec(lamY)
    n = s.size
    if y.size != n:
        raise ValueError("spectra must have equal lengths")
    if lam == 0:
        return np.zeros(n)
    coef = BH_CONVENTIONS[convention]
    x, dy = _bh_pairs(s, y, lam)
    den = 1.0 + x
    np.fill_diagonal(den, 1.0)
    if np.any(den <= 0):
        raise ValueError("Brezin-Hikami pair denominator is non-positive")
    r = math.sqrt(lam)
    return coef * r / n * np.sum(dy / den, axis=1) - 0.5 * r * y


# ---------------------------------------------------------------------------
# tilted Monte-Carlo
# ---------------------------------------------------------------------------

_CHUNK = 4096


def _haar_sq_chunks(n: int, beta: int, k: int, seed):
    """Yield ``|U_ij|^2`` for ``k`` Haar matrices, chunk by chunk.

    Chunk ``c`` uses its own child ``SeedSequence``, so the stream does not
    depend on how chunks are scheduled.
    """
    if isinstance(seed, np.random.SeedSequence):
        ss = seed
    elif isinstance(seed, np.random.Generator):
        ss = np.random.SeedSequence(int(seed.integers(2**63)))
    else:
        ss = np.random.SeedSequence(seed)
    nchunks = -(-k // _CHUNK)
    for c, child in enumerate(ss.spawn(nchunks)):
        size = min(_CHUNK, k - c * _CHUNK)
        rng = np.random.default_rng(child)
        if beta == 1:
            z = rng.standard_normal((size, n, n))
        else:
            z = rng.standard_normal((size, n, n)) + 1j * rng.standard_normal((size, n, n))
        # column phases from the QR sign fix do not change |U_ij|^2
        q, _ = np.linalg.qr(z)
        yield np.abs(q) ** 2 if beta == 2 else q * q


def _tilted_samples(a, b, gamma, beta, K, seed):
    n = a.size
    energies = np.empty(K)
    rows = np.empty((K, n))
    pos = 0
    for p in _haar_sq_chunks(n, beta, K, seed):
        pb = p @ b
        energies[pos:pos + len(p)] = (beta * gamma / 2) * n * (pb @ a)
        rows[pos:pos + len(p)] = pb
        pos += len(p)
    return energies, rows


def hciz_mc(lamA, lamB, gamma: float, beta: int = 2, K: int = 100_000,
            seed=None) -> HcizEstimate:
    """Tilted Monte-Carlo estimate of ``I_N`` from ``K`` Haar samples.

    The largest exponent is subtracted before averaging, and the standard
    error is the delta-method error of the log-mean.
    """
    beta = check_beta(beta)
    if K < 2:
        raise ValueError("K must be >= 2")
    a, b = _vec(lamA), _vec(lamB)
    n = a.size
    if b.size != n:
        raise ValueError("spectra must have equal lengths")
    if gamma == 0:
        return HcizEstimate(0.0, 0.0, MONTE_CARLO, n, diagnostics={"ess": float(K)})
    e, _ = _tilted_samples(a, b, gamma, beta, K, seed)
    top = e.max()
    w = np.exp(e - top)
    mean = w.mean()
    assert mean > 0
    value = (top + math.log(mean)) / n**2
    rel_var = w.var(ddof=1) / (K * mean**2)
    stderr = math.sqrt(rel_var) / n**2
    ess = float(w.sum() ** 2 / np.sum(w * w))
    return HcizEstimate(float(value), float(stderr), MONTE_CARLO, n,
                        diagnostics={"ess": ess, "K": K})


def hciz_grad_mc(lamA, lamB, gamma: float, beta: int = 2, K: int = 100_000,
                 seed=None):
    """Monte-Carlo estimate of ``dI_N/dlamA``.

    Returns
    -------
    grad, stderr : ndarray
        Self-normalized tilted averages of ``(beta gamma/(2N)) sum_j
        |U_kj|^2 lamB_j`` and their delta-method standard errors.
    """
    beta = check_beta(beta)
    if K < 2:
        raise ValueError("K must be >= 2")
    a, b = _vec(lamA), _vec(lamB)
    n = a.size
    pref = beta * gamma / (2 * n)
    if gamma == 0:
        return np.zeros(n), np.zeros(n)
    e, rows = _tilted_samples(a, b, gamma, beta, K, seed)
    w = np.exp(e - e.max())
    w /= w.sum()
    ess = 1.0 / float(np.sum(w * w))
    if ess < 10:
        warnings.warn(f"effective sample size {ess:.1f} < 10", LowESSWarning, stacklevel=2)
    mean = w @ rows
    var = (w * w) @ (rows - mean) ** 2
    return pref * mean, abs(pref) * np.sqrt(var)


# ---------------------------------------------------------------------------
# closed forms
# ---------------------------------------------------------------------------


def hciz_semicircle_closed(lam: float, beta: int = 2) -> HcizEstimate:
    """Spherical integral between two semicircles at coupling ``sqrt(lam)``.

    One spectrum is the unit semicircle, the other the data law with
    variance ``1 + lam``; ``sigma^4 = lam (1 + lam)``.
    """
    beta = check_beta(beta)
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    sig4 = lam * (1.0 + lam)
    r = math.sqrt(4.0 * sig4 + 1.0)
    val = 0.5 * (r - 1.0 - math.log1p(r) + math.log(2.0))
    if lam == 0:
        val = 0.0
    return HcizEstimate(val * beta / 2.0, 0.0, SEMICIRCLE_CLOSED, 0,
                        diagnostics={"sigma2": math.sqrt(sig4)})


def hciz_rect_exact(sigA, sigB, gamma: float, include_mfactorial: bool = False) -> HcizEstimate:
    """Two-sided unitary integral of ``exp(gamma M Re Tr[A U B V])``.

    Bessel-determinant formula evaluated in the log domain through the scaled
    Bessel function ``e^{-x} I_0(x)``.  The ``1/M!`` in some statements of the
    prefactor is wrong (it breaks the small-``gamma`` limit) and is left out
    unless ``include_mfactorial`` is set.
    """
    a, b = _vec(sigA), _vec(sigB)
    n = a.size
    if b.size != n:
        raise ValueError("spectra must have equal lengths")
    if np.any(a < 0) or np.any(b < 0):
        raise ValueError("singular values must be non-negative")
    _log_abs_vandermonde(a * a, "sigA^2")
    _log_abs_vandermonde(b * b, "sigB^2")
    if gamma == 0:
        return HcizEstimate(0.0, 0.0, RECT_EXACT_DET, n)
    g = abs(gamma)  # the integral is even in gamma (absorb -1 into U)
    if n == 1:
        x = g * a[0] * b[0]
        return HcizEstimate(float(math.log(i0e(x)) + x), 0.0, RECT_EXACT_DET, 1)
    sa, lda = _log_abs_vandermonde(a * a)
    sb, ldb = _log_abs_vandermonde(b * b)
    x = n * g * np.outer(a, b)
    logk = np.log(i0e(x)) + x
    rmax = logk.max(axis=1, keepdims=True)
    logk = logk - rmax
    cmax = logk.max(axis=0, keepdims=True)
    logk = logk - cmax
    sdet, ldet = np.linalg.slogdet(np.exp(logk))
    sign = sdet * sa * sb
    if sdet == 0 or sign < 0:
        raise NumericalBreakdownError("rectangular determinant ratio is non-positive")
    npairs = n * (n - 1)
    log_pref = npairs * math.log(2.0) + 2 * _log_sum_factorials(n) - npairs * math.log(n * g)
    if include_mfactorial:
        log_pref -= float(gammaln(n + 1.0))
    log_int = log_pref + ldet + float(rmax.sum() + cmax.sum()) - lda - ldb
    return HcizEstimate(float(log_int / n**2), 0.0, RECT_EXACT_DET, n)
