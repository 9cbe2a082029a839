"""Random matrix ensembles, denoising instances and confining potentials.

Conventions
-----------
Wigner matrices are drawn from ``exp Tr[-beta N / 4 S^2]`` so that the
spectrum converges to the semicircle on ``[-2, 2]`` with unit second
moment.  ``beta = 1`` gives real symmetric matrices, ``beta = 2`` complex
Hermitian ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "Spectrum",
    "Potential",
    "EnsembleSpec",
    "EnsembleSample",
    "DenoisingInstance",
    "DomainError",
    "EigensolverError",
    "as_rng",
    "check_beta",
    "sample_haar",
    "sample_haar_batch",
    "sample_wigner",
    "sample_ensemble",
    "uniform_spectrum",
    "gamma_n",
    "make_denoising_instance",
    "eigh_sorted",
    "potential_value",
    "potential_derivative",
]


class DomainError(ValueError):
    """Raised when a function is evaluated outside its domain."""


class EigensolverError(RuntimeError):
    """Raised when an eigen-decomposition fails."""


def as_rng(seed) -> np.random.Generator:
    """Return a ``Generator`` from an int, ``SeedSequence`` or generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def check_beta(beta: int) -> int:
    if beta not in (1, 2):
        raise ValueError(f"Dyson index must be 1 or 2, got {beta!r}")
    return int(beta)


@dataclass(frozen=True)
class Spectrum:
    """Real eigenvalues (or singular values) of an N x N matrix."""

    values: np.ndarray
    sorted: bool = False
    beta: int = 2

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).reshape(-1)
        if v.size < 1:
            raise ValueError("spectrum must contain at least one value")
        if not np.all(np.isfinite(v)):
            raise ValueError("spectrum contains non-finite values")
        if self.sorted and np.any(np.diff(v) < 0):
            raise ValueError("spectrum flagged as sorted but is not non-decreasing")
        check_beta(self.beta)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_values(cls, values, beta: int = 2) -> "Spectrum":
        v = np.sort(np.asarray(values, dtype=float).reshape(-1))
        return cls(v, sorted=True, beta=beta)

    def __len__(self) -> int:
        return self.values.size

    @property
    def n(self) -> int:
        return self.values.size

    def moment(self, k: int) -> float:
        return float(np.mean(self.values**k))


@dataclass(frozen=True)
class Potential:
    """Confining potential ``V(x) = log_coeff * ln|x| + sum_k c_k x^k``.

    ``poly_coeffs[0]`` multiplies ``x``, ``poly_coeffs[1]`` multiplies ``x**2``
    and so on.
    """

    log_coeff: float = 0.0
    poly_coeffs: tuple = (0.0, 1.0)

    def __post_init__(self):
        coeffs = tuple(float(c) for c in self.poly_coeffs)
        object.__setattr__(self, "poly_coeffs", coeffs)
        object.__setattr__(self, "log_coeff", float(self.log_coeff))
        if self.log_coeff == 0.0 and not any(c != 0.0 for c in coeffs):
            raise ValueError("potential must have a log term or a non-zero polynomial part")

    @classmethod
    def wigner(cls) -> "Potential":
        return cls(0.0, (0.0, 1.0))

    @classmethod
    def wishart(cls, alpha: float) -> "Potential":
        """``V(x) = 2(1 - 1/alpha) ln|x| + 2x/alpha`` with ``alpha = N/M``."""
        if alpha <= 0:
            raise ValueError("alpha must be positive")
        return cls(2.0 * (1.0 - 1.0 / alpha), (2.0 / alpha,))

    def value(self, x):
        return potential_value(self, x)

    def derivative(self, x):
        return potential_derivative(self, x)


def _check_log_domain(pot: Potential, x):
    if pot.log_coeff != 0.0 and np.any(np.asarray(x) == 0):
        raise DomainError("potential with a log term is undefined at x = 0")


def potential_value(pot: Potential, x):
    """Evaluate ``V(x)``; vectorized over ``x``."""
    x = np.asarray(x, dtype=float)
    _check_log_domain(pot, x)
    out = np.zeros_like(x)
    for k, c in enumerate(pot.poly_coeffs, start=1):
        if c:
            out = out + c * x**k
    if pot.log_coeff:
        out = out + pot.log_coeff * np.log(np.abs(x))
    return out if out.ndim else float(out)


def potential_derivative(pot: Potential, x):
    """Evaluate ``V'(x)``; vectorized over ``x``."""
    x = np.asarray(x, dtype=float)
    _check_log_domain(pot, x)
    out = np.zeros_like(x)
    for k, c in enumerate(pot.poly_coeffs, start=1):
        if c:
            out = out + k * c * x ** (k - 1)
    if pot.log_coeff:
        out = out + pot.log_coeff / x
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class EnsembleSpec:
    """Which ensemble to sample.

    kind is one of ``"wigner"``, ``"wishart"``, ``"uniform"``, ``"custom"``.
    """

    kind: str
    n: int
    beta: int = 2
    alpha: Optional[float] = None
    potential: Optional[Potential] = None
    regularization: float = 0.0

    def __post_init__(self):
        kind = self.kind.lower()
        object.__setattr__(self, "kind", kind)
        if kind not in ("wigner", "wishart", "uniform", "custom"):
            raise ValueError(f"unknown ensemble kind {self.kind!r}")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        check_beta(self.beta)
        if kind == "wishart":
            if self.alpha is None or self.alpha <= 0:
                raise ValueError("Wishart ensemble needs alpha > 0")
        if kind == "custom" and self.potential is None:
            raise ValueError("custom ensemble needs a potential")
        if self.regularization < 0:
            raise ValueError("regularization must be non-negative")

    @property
    def m(self) -> int:
        """Number of columns of the Wishart factor, ``round(N / alpha)``."""
        return max(1, int(round(self.n / self.alpha)))

    def resolved_potential(self) -> Potential:
        if self.kind == "wigner":
            return Potential.wigner()
        if self.kind == "wishart":
            return Potential.wishart(self.n / self.m)
        if self.kind == "custom":
            return self.potential
        raise ValueError("the uniform-spectrum prior has no confining potential")


@dataclass
class EnsembleSample:
    matrix: np.ndarray
    spectrum: Spectrum
    alpha: Optional[float] = None


@dataclass
class DenoisingInstance:
    """A realization of ``Y = sqrt(lambda) S + xi``."""

    S: np.ndarray
    xi: np.ndarray
    Y: np.ndarray
    lam: float
    beta: int
    lamY: Spectrum
    psiY: np.ndarray
    proj: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return self.Y.shape[0]


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def _gaussian(rng: np.random.Generator, shape, beta: int) -> np.ndarray:
    """Standard Gaussian entries with ``E|z|^2 = 1``."""
    if beta == 1:
        return rng.standard_normal(shape)
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / math.sqrt(2.0)


def _haar_from_gaussian(z: np.ndarray) -> np.ndarray:
    q, r = np.linalg.qr(z)
    d = np.diagonal(r, axis1=-2, axis2=-1)
    phase = d / np.abs(d)
    return q * phase[..., None, :]


def sample_haar(n: int, beta: int = 2, seed=None) -> np.ndarray:
    """Haar-distributed orthogonal (``beta=1``) or unitary (``beta=2``) matrix.

    QR of a Gaussian matrix with the phases of ``diag(R)`` moved into ``Q``,
    which is the Gram-Schmidt construction made unique.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    beta = check_beta(beta)
    rng = as_rng(seed)
    return _haar_from_gaussian(_gaussian(rng, (n, n), beta))


def sample_haar_batch(k: int, n: int, beta: int, rng: np.random.Generator) -> np.ndarray:
    """``k`` independent Haar matrices stacked along axis 0."""
    return _haar_from_gaussian(_gaussian(rng, (k, n, n), beta))


def sample_wigner(n: int, beta: int = 2, seed=None) -> np.ndarray:
    """Standard Wigner matrix with density ``exp Tr[-beta N/4 X^2]``.

    Diagonal entries have variance ``2/(beta N)``; off-diagonal entries have
    total variance ``1/N`` (split evenly over real and imaginary parts when
    ``beta = 2``).
    """
    beta = check_beta(beta)
    rng = as_rng(seed)
    g = _gaussian(rng, (n, n), beta)
    return (g + g.conj().T) / math.sqrt(2.0 * n)


def gamma_n(n: int) -> float:
    """Scale making ``Tr Lambda^2 = N`` for the equally spaced spectrum."""
    return 12.0 * n * n / (n * n + 2.0)


def uniform_spectrum(n: int) -> np.ndarray:
    """``sqrt(gamma_N) (i/N - 1/2)`` for ``i = 0..N-1`` (increasing)."""
    return math.sqrt(gamma_n(n)) * (np.arange(n) / n - 0.5)


def _rotate(values: np.ndarray, u: np.ndarray) -> np.ndarray:
    s = (u.conj().T * values) @ u
    return 0.5 * (s + s.conj().T)


def sample_ensemble(spec: EnsembleSpec, seed=None) -> EnsembleSample:
    """Draw a Hermitian matrix from ``spec`` together with its spectrum."""
    rng = as_rng(seed)
    n, beta = spec.n, spec.beta
    alpha = None
    if spec.kind == "wigner":
        s = sample_wigner(n, beta, rng)
    elif spec.kind == "wishart":
        m = spec.m
        alpha = n / m
        x = _gaussian(rng, (n, m), beta) / math.sqrt(m)
        s = x @ x.conj().T
        s = 0.5 * (s + s.conj().T)
    elif spec.kind == "uniform":
        s = _rotate(uniform_spectrum(n), sample_haar(n, beta, rng))
    else:
        from .coulomb import warmup_equilibrium

        lam = warmup_equilibrium(spec.potential, n, beta)
        s = _rotate(lam, sample_haar(n, beta, rng))
    if spec.regularization > 0:
        s = s + spec.regularization * sample_wigner(n, beta, rng)
    if spec.kind == "uniform" and spec.regularization == 0:
        values = uniform_spectrum(n)
    else:
        values = np.linalg.eigvalsh(s)
    return EnsembleSample(s, Spectrum(values, sorted=True, beta=beta), alpha)


def eigh_sorted(h: np.ndarray):
    """Ascending eigen-decomposition with a deterministic phase convention.

    Each eigenvector is multiplied by a phase making its largest-magnitude
    component real and positive.
    """
    try:
        w, v = np.linalg.eigh(h)
    except np.linalg.LinAlgError as exc:
        raise EigensolverError(f"eigendecomposition failed: {exc}") from exc
    idx = np.argmax(np.abs(v), axis=0)
    pivot = v[idx, np.arange(v.shape[1])]
    v = v * (np.abs(pivot) / pivot)[None, :]
    return w, v


def make_denoising_instance(S: np.ndarray, lam: float, beta: int = 2, seed=None,
                            xi: Optional[np.ndarray] = None) -> DenoisingInstance:
    """Build ``Y = sqrt(lam) S + xi`` with a fresh Wigner ``xi``.

    ``xi`` may be passed explicitly to reuse the same noise across several
    signal-to-noise ratios.
    """
    S = np.asarray(S)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError("S must be square")
    if not np.allclose(S, S.conj().T, atol=1e-12 * max(1.0, np.abs(S).max())):
        raise ValueError("S must be Hermitian")
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    beta = check_beta(beta)
    n = S.shape[0]
    if xi is None:
        xi = sample_wigner(n, beta, seed)
    Y = math.sqrt(lam) * S + xi
    w, v = eigh_sorted(Y)
    proj = np.real(np.sum(v.conj() * (S @ v), axis=0))
    return DenoisingInstance(S, xi, Y, float(lam), beta,
                             Spectrum(w, sorted=True, beta=beta), v, proj)


def spectra_of(values: Sequence[float], beta: int = 2) -> Spectrum:
    return Spectrum.from_values(values, beta)
