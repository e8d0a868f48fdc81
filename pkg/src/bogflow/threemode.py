"""Scalar quantities of a single interacting pair {0, +j, -j}.

Index convention: i is the zero-mode occupation of a level, so level i holds
(N - i)/2 particles in each of the modes +j and -j.  i = N is the condensate
state eta; the continued fraction runs over even i from 0 up to N - 2.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np


class AdmissibilityError(ValueError):
    """Spectral parameter outside the range where a quantity is defined."""

    def __init__(self, msg: str, i: int | None = None, z: float | None = None):
        super().__init__(msg)
        self.i, self.z = i, z


class DivergentSeriesError(AdmissibilityError):
    """A geometric series with ratio >= 1 was requested."""


class RegimeError(RuntimeError):
    """Inputs are outside the regime where a bracket or bound exists."""


# ---------------------------------------------------------------------------
# coefficients
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CoefficientSet:
    """a, b, c and the auxiliary exponents attached to a ratio eps = k^2/phi.

    ``a`` is 2 eps + kappa eps^nu; the kappa term defaults to zero.  ``delta`` is
    pinned to 1 + sqrt(eps) for every sequence built from this set.
    """

    eps: float
    nu: float
    delta: float
    theta: float
    eta_factor: float
    a: float
    b: float
    c: float

    @classmethod
    def from_eps(cls, eps: float, nu: float = 1.5, kappa: float = 0.0) -> "CoefficientSet":
        if not eps > 0:
            raise ValueError(f"eps must be positive, got {eps}")
        if not nu > 11 / 8:
            raise ValueError(f"nu must exceed 11/8, got {nu}")
        delta = 1.0 + math.sqrt(eps)
        return cls(
            eps=eps,
            nu=nu,
            delta=delta,
            theta=min(2 * (nu - 11 / 8), 0.25),
            eta_factor=1.0 - math.sqrt(eps),
            a=2 * eps + kappa * eps ** nu,
            b=b_coefficient(eps, delta),
            c=c_coefficient(eps, delta),
        )

    @classmethod
    def degenerate(cls) -> "CoefficientSet":
        """The formal a = b = 0, c = 1 set (eps-dependent exponents frozen at eps = 0)."""
        return cls(eps=0.0, nu=1.5, delta=1.0, theta=0.25, eta_factor=1.0,
                   a=0.0, b=0.0, c=1.0)

    def b_over_root(self) -> float:
        """b / sqrt(eta a), taken as 0 when b vanishes."""
        if self.b == 0.0:
            return 0.0
        return self.b / math.sqrt(self.eta_factor * self.a)

    def x_floor_factor(self, denom: float) -> float:
        """1 + sqrt(eta a) - (b/sqrt(eta a)) / denom."""
        if self.eta_factor * self.a < 0:
            raise RegimeError(f"eps={self.eps:g} >= 1 leaves no lower bound (1 - sqrt(eps) < 0)")
        return 1.0 + math.sqrt(self.eta_factor * self.a) - self.b_over_root() / denom


def _chi(delta: float) -> float:
    return 1.0 if 0.0 <= delta < 2.0 else 0.0


def b_coefficient(eps: float, delta: float) -> float:
    return (1 + eps) * delta * _chi(delta) * math.sqrt(eps * eps + 2 * eps)


def c_coefficient(eps: float, delta: float) -> float:
    return -(1 - delta * delta * _chi(delta)) * (eps * eps + 2 * eps)


def _quadratic_form(coeffs: CoefficientSet, n: float, b: float | None = None,
                    c: float | None = None) -> float:
    b = coeffs.b if b is None else b
    c = coeffs.c if c is None else c
    return 1 + coeffs.a - 2 * b / n - (1 - c) / n ** 2


# ---------------------------------------------------------------------------
# closed forms and the continued fraction
# ---------------------------------------------------------------------------


def bogoliubov_energy(k2: float, phi: float) -> float:
    if k2 < 0 or phi < 0:
        raise ValueError("k2 and phi must be nonnegative")
    return -(k2 + phi - math.sqrt(k2 * k2 + 2 * phi * k2))


def upper_bracket(k2: float, phi: float) -> float:
    """E^Bog + sqrt(eps) phi sqrt(eps^2 + 2 eps): top of the admissible window."""
    eps = k2 / phi
    return bogoliubov_energy(k2, phi) + math.sqrt(eps) * phi * math.sqrt(eps * eps + 2 * eps)


def level_energy(i: int, N: int, k2: float, phi: float) -> float:
    """Diagonal energy of level i: (i phi / N + k^2)(N - i)."""
    return (i * phi / N + k2) * (N - i)


def ww_star(i: int, z: float, N: int, k2: float, phi: float) -> float:
    if i % 2 or not 2 <= i <= N - 2:
        raise ValueError(f"i={i} must be even with 2 <= i <= N-2")
    d_hi = level_energy(i, N, k2, phi) - z
    d_lo = level_energy(i - 2, N, k2, phi) - z
    if d_hi <= 0 or d_lo <= 0:
        raise AdmissibilityError(f"z={z} is not below the level energies at i={i}", i, z)
    n = (N - i) // 2
    return (i - 1) * i / N ** 2 * phi ** 2 * (n + 1) ** 2 / (d_hi * d_lo)


@dataclass(frozen=True)
class CheckGTable:
    z: float
    N: int
    values: np.ndarray  # values[i // 2] for i = 0, 2, ..., N - 2

    def at(self, i: int) -> float:
        return float(self.values[i // 2])


def check_g(z: float, N: int, k2: float, phi: float) -> CheckGTable:
    vals = [1.0]
    for i in range(2, N - 1, 2):
        x = ww_star(i, z, N, k2, phi) * vals[-1]
        if x >= 1.0:
            raise DivergentSeriesError(f"series diverges at i={i} for z={z}", i, z)
        vals.append(1.0 / (1.0 - x))
    return CheckGTable(z, N, np.array(vals))


def f_of_z(z: float, N: int, k2: float, phi: float) -> float:
    """-z - <eta, Gamma_{N,N}(z) eta>.

    The second term is written as (1-1/N) phi^2 G / (2k^2 + (2 - 4/N) phi - z),
    which equals the phi G / (2 eps - 4/N + 2 - z/phi) form and stays finite at phi = 0.
    """
    if phi == 0.0:
        return -z
    denom = 2 * k2 + (2 - 4 / N) * phi - z
    if denom <= 0:
        raise AdmissibilityError(f"z={z} is not below the first excited level", N - 2, z)
    g = check_g(z, N, k2, phi).values[-1]
    return -z - (1 - 1 / N) * phi * phi * g / denom


@dataclass(frozen=True)
class FixedPointResult:
    z_star: float
    e_bog: float
    bracket: tuple[float, float]
    iterations: int
    residual: float


def _regime_warning(N: int, eps: float):
    if eps > 0.3:
        warnings.warn(f"eps={eps:g} exceeds 0.3; bounds may not apply", RuntimeWarning,
                      stacklevel=3)
    if 1 / N > eps ** (11 / 8):
        warnings.warn(f"1/N={1 / N:g} exceeds eps^(11/8); bounds may not apply",
                      RuntimeWarning, stacklevel=3)


def bisect_decreasing(f: Callable[[float], float], lo: float, hi: float, tol: float,
                      max_iter: int = 400) -> tuple[float, float, int]:
    """Root of a decreasing function on [lo, hi] with f(lo) > 0.

    An AdmissibilityError raised by f marks a point above the root: admissible
    parameters form a half-line on which f falls to -infinity at the edge.
    """
    def sign_of(z):
        try:
            return f(z)
        except AdmissibilityError:
            return -math.inf

    for it in range(1, max_iter + 1):
        mid = 0.5 * (lo + hi)
        val = sign_of(mid)
        if abs(val) <= tol or mid in (lo, hi):
            return mid, val, it
        if val > 0:
            lo = mid
        else:
            hi = mid
    return mid, val, max_iter


def solve_ground_energy(N: int, k2: float, phi: float, tol: float | None = None,
                        check_regime: bool = True) -> FixedPointResult:
    if N % 2 or N < 4:
        raise ValueError(f"N={N} must be even and >= 4")
    tol = 1e-12 * phi if tol is None else tol
    if check_regime:
        _regime_warning(N, k2 / phi)
    e_bog = bogoliubov_energy(k2, phi)
    lo, hi = e_bog - phi, upper_bracket(k2, phi)

    def f(z):
        return f_of_z(z, N, k2, phi)

    width = phi
    for _ in range(60):
        if f(lo) > 0:
            break
        width *= 2
        lo = e_bog - width
    else:
        raise RegimeError("no positive value of f below E^Bog was found")
    try:
        top = f(hi)
    except AdmissibilityError:
        top = -math.inf
    if top > 0:
        raise RegimeError(
            f"f has no sign change on [{lo}, {hi}] (N={N}, eps={k2 / phi:g}); "
            "try larger phi, smaller eps or larger N")
    z, val, iters = bisect_decreasing(f, lo, hi, tol)
    if not abs(val) <= tol:
        raise RegimeError(f"bisection stalled at z={z} with |f|={abs(val):.3e}")
    return FixedPointResult(z, e_bog, (lo, hi), iters, abs(val))


# ---------------------------------------------------------------------------
# X-sequence and diagnostic bounds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class XSequence:
    N: int
    eps: float
    values: np.ndarray  # X_0, X_2, ..., X_{N-2}

    def at(self, i: int) -> float:
        return float(self.values[i // 2])


def x_sequence(N: int, coeffs: CoefficientSet) -> XSequence:
    vals = [1.0]
    for j in range(0, (N - 2) // 2):
        q = _quadratic_form(coeffs, N - 2 * j - 1)
        if q <= 0:
            raise RegimeError(f"non-positive denominator at j={j}; eps too large for N={N}")
        x = 1.0 - 1.0 / (4 * q * vals[-1])
        if not x > 0:
            raise RegimeError(f"X_{2 * j + 2} = {x} is not positive (N={N}, eps={coeffs.eps})")
        vals.append(x)
    return XSequence(N, coeffs.eps, np.array(vals))


def x_lower_bound(N: int, coeffs: CoefficientSet) -> np.ndarray:
    """Pointwise lower bound 1/2 [1 + sqrt(eta a) - (b/sqrt(eta a))/(N - 2j - eps^Theta)]."""
    j = np.arange(N // 2)
    denom = N - 2 * j - coeffs.eps ** coeffs.theta
    return 0.5 * np.array([coeffs.x_floor_factor(dn) for dn in denom])


def block_bound_rhs(i: int, N: int, coeffs: CoefficientSet, delta: float | None = None) -> float:
    """1 / (4 (1 + a - 2b/(N-i+2) - (1-c)/(N-i+2)^2)), optionally at a free delta."""
    if delta is None:
        b, c = coeffs.b, coeffs.c
    else:
        b, c = b_coefficient(coeffs.eps, delta), c_coefficient(coeffs.eps, delta)
    return 1.0 / (4 * _quadratic_form(coeffs, N - i + 2, b, c))


@dataclass(frozen=True)
class KZReport:
    f: np.ndarray
    K: np.ndarray
    Z: np.ndarray  # Z_{f-2}
    factor: np.ndarray  # K_f / (1 - Z_{f-2})^2
    cumulative: np.ndarray
    bulk: np.ndarray  # N - f > C / sqrt(eps)
    c_measured: float  # largest c with factor <= 1/(1 + c sqrt(eps)) on the bulk
    geometric: bool


def kz_factors(f: int, N: int, coeffs: CoefficientSet) -> tuple[float, float]:
    K = 1.0 / (4 * _quadratic_form(coeffs, N - f + 1))
    Z = (1.0 / (4 * _quadratic_form(coeffs, N - f + 3))
         * 2.0 / coeffs.x_floor_factor(N - f + 4 - coeffs.eps ** coeffs.theta))
    return K, Z


def kz_product(l_range, coeffs: CoefficientSet, N: int, C: float = 1.0) -> KZReport:
    """Per-f factors K_f/(1 - Z_{f-2})^2 over even f in l_range and running products."""
    fs = np.array([f for f in l_range if f % 2 == 0], dtype=int)
    K = np.empty(len(fs))
    Z = np.empty(len(fs))
    for n, f in enumerate(fs):
        K[n], Z[n] = kz_factors(int(f), N, coeffs)
    factor = K / (1 - Z) ** 2
    cumulative = np.cumprod(factor)
    root = math.sqrt(coeffs.eps) if coeffs.eps > 0 else 0.0
    bulk = (N - fs) > (C / root if root else math.inf)
    if root and bulk.any():
        c_meas = float(np.min((1 / factor[bulk] - 1) / root))
    else:
        c_meas = float("nan")
    return KZReport(fs, K, Z, factor, cumulative, bulk, c_meas, bool(c_meas > 0))


@dataclass(frozen=True)
class CSeries:
    j: np.ndarray
    c: np.ndarray
    ratios: np.ndarray  # c_{j+1} / c_j


def series_cj(j_max: int, coeffs: CoefficientSet) -> CSeries:
    """c_j = prod_{l=2..j} 1 / ([1 + sqrt(eta a) - (b/sqrt(eta a))/(2l - eps^Theta)]
    [1 + a - 2b/(2l-1) - (1-c)/(2l-1)^2]^(1/2)) for j = 2..j_max."""
    et = coeffs.eps ** coeffs.theta
    js = np.arange(2, j_max + 1)
    terms = []
    for l in js:
        q = _quadratic_form(coeffs, 2 * l - 1)
        terms.append(1.0 / (coeffs.x_floor_factor(2 * l - et) * math.sqrt(q)))
    c = np.cumprod(terms)
    return CSeries(js, c, c[1:] / c[:-1])
