"""Characteristic function of the closed-loop 2x2 hyperbolic system.

The closed loop (rightward speed 1, leftward speed lam, couplings a and b,
proportional boundary gain k on an interval of length L) has eigenvalues
exactly at the zeros of

    F(sigma) = (k-1) cosh(eta L) - [(k+1)(lam+1) sigma / (2 lam) + (k b / lam + a)] sinh(eta L) / eta

with eta^2 = ((lam+1)^2 sigma^2 - 4 lam a b) / (4 lam^2).  F depends on eta only
through eta^2, so it is entire in sigma; the evaluation below never picks a
branch for eta except in the exponential path, where both branches give the
same cosh and sinh(eta L)/eta.
"""
from dataclasses import dataclass, replace
from typing import Any, Union
import logging
import math

import numpy as np

from .errors import InvalidParameters, OverflowRange, BranchPrecondition

logger = logging.getLogger(__name__)

SERIES_THRESHOLD = 1e-4
OVERFLOW_LIMIT = 700.0
SERIES_TERMS = 6

ComplexLike = Union[complex, float, np.ndarray]

# 1/(2n)! and 1/(2n+1)! for the even series of cosh and sinh(z)/z
_COSH_COEFFS = np.array([1.0 / math.factorial(2 * n) for n in range(SERIES_TERMS)])
_SINHC_COEFFS = np.array([1.0 / math.factorial(2 * n + 1) for n in range(SERIES_TERMS)])


@dataclass(frozen=True)
class SystemParams:
    """(a, b, lambda, L, k) of the closed-loop system; ``lam`` is the leftward speed"""
    a: float
    b: float
    lam: float
    L: float
    k: float = 0.0

    def __post_init__(self):
        for name in ("a", "b", "lam", "L", "k"):
            value = getattr(self, name)
            if not isinstance(value, (int, float, np.floating, np.integer)) or not math.isfinite(value):
                raise InvalidParameters(f"{name} must be a finite real number, got {value!r}")
        if self.lam <= 0:
            raise InvalidParameters(f"lambda must be positive, got {self.lam}")
        if self.L < 0:
            raise InvalidParameters(f"L must be nonnegative, got {self.L}")

    def with_(self, **changes: Any) -> "SystemParams":
        return replace(self, **changes)

    @property
    def triple(self):
        return (self.a, self.b, self.lam)

    def to_dict(self):
        return {"a": self.a, "b": self.b, "lambda": self.lam, "L": self.L, "k": self.k}


@dataclass(frozen=True)
class CharParts:
    eta_sq: ComplexLike
    xi: ComplexLike
    cosh_eta_l: ComplexLike
    sinhc_eta_l: ComplexLike


def _prepare(sigma: ComplexLike):
    arr = np.asarray(sigma, dtype=complex)
    return arr, arr.ndim == 0


def _finish(arr: np.ndarray, scalar: bool) -> ComplexLike:
    return complex(arr) if scalar else arr


def char_parts(p: SystemParams, sigma: ComplexLike,
               series_threshold: float = SERIES_THRESHOLD,
               overflow_limit: float = OVERFLOW_LIMIT) -> CharParts:
    """eta^2, xi, cosh(eta L) and sinh(eta L)/eta at sigma (scalar or array)"""
    s_in, scalar = _prepare(sigma)
    shape = s_in.shape
    s = s_in.reshape(-1)
    lam = p.lam
    eta_sq = ((lam + 1.0) ** 2 * s ** 2 - 4.0 * lam * p.a * p.b) / (4.0 * lam ** 2)
    xi = -(lam - 1.0) * s / (2.0 * lam)

    z = eta_sq * p.L ** 2
    near = np.abs(z) < series_threshold
    cosh_v = np.empty_like(z)
    sinhc_v = np.empty_like(z)

    if np.any(near):
        zn = z[near]
        # Horner in z = eta^2 L^2
        c = np.zeros_like(zn)
        sh = np.zeros_like(zn)
        for n in range(SERIES_TERMS - 1, -1, -1):
            c = c * zn + _COSH_COEFFS[n]
            sh = sh * zn + _SINHC_COEFFS[n]
        cosh_v[near] = c
        sinhc_v[near] = p.L * sh

    far = ~near
    if np.any(far):
        eta = np.sqrt(eta_sq[far])
        w = eta * p.L
        worst = float(np.max(np.abs(w.real)))
        if worst > overflow_limit:
            raise OverflowRange(f"|Re(eta L)| = {worst:.1f} exceeds {overflow_limit}; shrink the contour")
        cosh_v[far] = np.cosh(w)
        sinhc_v[far] = np.sinh(w) / eta

    return CharParts(
        eta_sq=_finish(eta_sq.reshape(shape), scalar),
        xi=_finish(xi.reshape(shape), scalar),
        cosh_eta_l=_finish(cosh_v.reshape(shape), scalar),
        sinhc_eta_l=_finish(sinhc_v.reshape(shape), scalar),
    )


def boundary_coefficient(p: SystemParams, sigma: ComplexLike) -> ComplexLike:
    """(k+1)(lam+1) sigma/(2 lam) + (k b/lam + a), the factor in front of sinhc"""
    return (p.k + 1.0) * (p.lam + 1.0) * sigma / (2.0 * p.lam) + (p.k * p.b / p.lam + p.a)


def eval_char(p: SystemParams, sigma: ComplexLike, **kwargs) -> ComplexLike:
    """F(sigma); raises OverflowRange instead of returning infinities"""
    s, scalar = _prepare(sigma)
    parts = char_parts(p, s, **kwargs)
    value = (p.k - 1.0) * parts.cosh_eta_l - boundary_coefficient(p, s) * parts.sinhc_eta_l
    return _finish(np.asarray(value), scalar)


def normalized_radius_floor(p: SystemParams) -> float:
    """Smallest |sigma| at which H keeps clear of the branch points of Q"""
    return math.sqrt(8.0 * p.lam * abs(p.a * p.b)) / (p.lam + 1.0)


def q_branch(p: SystemParams, sigma: ComplexLike) -> ComplexLike:
    """Q(sigma) with 4 lam^2 Q^2 = (lam+1)^2 sigma^2 - 4 lam a b and Re Q >= 0"""
    s, scalar = _prepare(sigma)
    q = np.sqrt((p.lam + 1.0) ** 2 * s ** 2 - 4.0 * p.lam * p.a * p.b) / (2.0 * p.lam)
    q = np.where(q.real < 0, -q, q)
    return _finish(q, scalar)


def eval_char_normalized(p: SystemParams, sigma: ComplexLike) -> ComplexLike:
    """H(sigma) = 2 e^{-Q L} F(sigma), valid on the closed right half-plane away from the branch points"""
    s, scalar = _prepare(sigma)
    mod = np.abs(s)
    if np.any(s.real < -1e-12 * np.maximum(mod, 1.0)):
        raise BranchPrecondition("H is defined on the closed right half-plane only")
    floor = normalized_radius_floor(p)
    if np.any(mod ** 2 < floor ** 2) or np.any(mod == 0):
        raise BranchPrecondition(f"|sigma| must be at least {floor:.6g} (and nonzero) for H")

    q = np.asarray(q_branch(p, s))
    e = np.exp(-2.0 * q * p.L)
    lam = p.lam
    bracket = (p.k + 1.0) * (lam + 1.0) * s / (2.0 * lam * q) + (p.k * p.b + lam * p.a) / (lam * q)
    value = (p.k - 1.0) * (1.0 + e) - bracket * (1.0 - e)
    return _finish(np.asarray(value), scalar)


def eval_asymptotic(p: SystemParams, sigma: ComplexLike,
                    overflow_limit: float = OVERFLOW_LIMIT) -> ComplexLike:
    """G(sigma), the large-|sigma| model of H whose zeros are the unstable-root seeds"""
    s, scalar = _prepare(sigma)
    exponent = -(p.lam + 1.0) * s * p.L / p.lam
    if np.any(np.abs(exponent.real) > overflow_limit):
        raise OverflowRange("asymptotic exponent outside the double range")
    e = np.exp(exponent)
    value = (p.k - 1.0) * (1.0 + e) - (p.k + 1.0) * (1.0 - e)
    return _finish(np.asarray(value), scalar)


def reduce_general(lambda1: float, lambda2: float, a: float, b: float, L: float,
                   k: float = 0.0) -> SystemParams:
    """Rescale x -> x/lambda1 so the rightward speed becomes 1"""
    if not (lambda1 > 0 and lambda2 > 0):
        raise InvalidParameters(f"speeds must be positive, got {lambda1}, {lambda2}")
    if L < 0:
        raise InvalidParameters(f"L must be nonnegative, got {L}")
    return SystemParams(a=a, b=b, lam=lambda2 / lambda1, L=L / lambda1, k=k)
