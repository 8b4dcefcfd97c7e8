"""Closed-form marginal curves, critical length and block index.

A point (k, L) with |k| < 1 is marginal when F has a root at sigma = 0.  At
sigma = 0 the characteristic equation reduces to a real equation in L whose
solutions form at most one curve (ab <= 0) or a family spaced by
pi*sqrt(lam/ab) (ab > 0).  The number of curves strictly below a point equals
the number of unstable eigenvalues there.
"""
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple, Union
import logging
import math

import numpy as np
from scipy.optimize import brentq

from .core import SystemParams
from .errors import InvalidParameters

logger = logging.getLogger(__name__)

MARGINAL = "Marginal"
MARGINAL_TOL = 1e-9
THRESHOLD_TOL = 1e-10

REFERENCE_TRIPLES: List[Tuple[float, float, float]] = [
    (1.0, 1.0, 1.0),
    (-1.0, -2.0, 1.0),
    (0.0, 1.0, 1.0),
    (-1.0, 0.0, 1.0),
]


def arccot(x):
    """Inverse cotangent with values in (0, pi)"""
    return np.pi / 2.0 - np.arctan(x)


def arccoth(x):
    """Inverse hyperbolic cotangent for |x| > 1"""
    return np.arctanh(1.0 / np.asarray(x, dtype=float))


@dataclass(frozen=True)
class KDomain:
    lo: float
    hi: float
    lo_closed: bool = False
    hi_closed: bool = False

    @property
    def empty(self) -> bool:
        return self.hi <= self.lo

    def contains(self, k):
        k = np.asarray(k, dtype=float)
        lower = k >= self.lo if self.lo_closed else k > self.lo
        upper = k <= self.hi if self.hi_closed else k < self.hi
        return lower & upper

    def __str__(self):
        left = "[" if self.lo_closed else "("
        right = "]" if self.hi_closed else ")"
        return f"{left}{self.lo:g},{self.hi:g}{right}"


EMPTY_DOMAIN = KDomain(0.0, 0.0)


@dataclass(frozen=True)
class MarginalCurve:
    """One branch of the marginal set; ``height(k)`` is the L on the curve"""
    branch_index: int
    k_domain: KDomain
    formula: Callable[[np.ndarray], np.ndarray] = field(repr=False, compare=False)

    def height(self, k):
        """Curve height at k; NaN outside the domain, +inf at poles"""
        scalar = np.ndim(k) == 0
        k = np.atleast_1d(np.asarray(k, dtype=float))
        out = np.full(k.shape, np.nan)
        inside = self.k_domain.contains(k)
        if np.any(inside):
            with np.errstate(divide="ignore", invalid="ignore"):
                out[inside] = self.formula(k[inside])
        return float(out[0]) if scalar else out

    # k -> L mapping under its short name
    eval = height


@dataclass(frozen=True)
class CriticalLength:
    value: float

    @property
    def is_infinite(self) -> bool:
        return math.isinf(self.value)

    def __str__(self):
        return "Infinite" if self.is_infinite else repr(self.value)


@dataclass(frozen=True)
class ThresholdGain:
    k: float
    slope: float
    stable_side: str  # "below": stable for gains k < k*, "above": for k > k*


def _check_lambda(lam: float):
    if not lam > 0:
        raise InvalidParameters(f"lambda must be positive, got {lam}")


def _default_branch_cap(a: float, b: float, lam: float, L_max: float) -> int:
    """Number of ab>0 branches needed to cover heights up to 10*max(1, L_max)"""
    spacing = math.sqrt(lam / (a * b)) * math.pi
    return max(1, int(math.ceil(10.0 * max(1.0, L_max) / spacing)) + 1)


def marginal_curves(a: float, b: float, lam: float, n_max: Optional[int] = None,
                    L_max: float = 1.0) -> List[MarginalCurve]:
    """Full marginal-curve family for (a, b, lambda)"""
    _check_lambda(lam)
    ab = a * b

    if ab == 0.0:
        if a == 0.0 and b > 0:
            domain = KDomain(-1.0, 0.0, hi_closed=True)
        elif a == 0.0 and b < 0:
            domain = KDomain(0.0, 1.0, lo_closed=True)
        elif a < 0 and b == 0.0:
            domain = KDomain(-1.0, 1.0)
        else:
            return []

        def linear(k):
            denom = k * b / lam + a
            return np.where(denom == 0.0, np.inf, (k - 1.0) / np.where(denom == 0.0, 1.0, denom))

        return [MarginalCurve(0, domain, linear)]

    if ab > 0:
        omega = math.sqrt(ab / lam)
        scale = 1.0 / omega
        count = n_max + 1 if n_max is not None else _default_branch_cap(a, b, lam, L_max)
        curves = []
        for n in range(count):
            def branch(k, n=n):
                x = (k * b / lam + a) / ((k - 1.0) * omega)
                return scale * (arccot(x) + n * np.pi)
            curves.append(MarginalCurve(n, KDomain(-1.0, 1.0), branch))
        return curves

    nu = math.sqrt(-ab / lam)
    k1 = math.sqrt(-lam * a / b) * math.copysign(1.0, a)
    if -lam * a >= b > 0:
        domain = KDomain(-1.0, 1.0)
    elif 0 > -lam * a > b:
        domain = KDomain(k1, 1.0)
    elif b > -lam * a > 0:
        domain = KDomain(-1.0, k1)
    else:
        return []

    def hyperbolic(k):
        h = (k * b / lam + a) / ((k - 1.0) * nu)
        valid = h > 1.0
        safe = np.where(valid, h, 2.0)
        return np.where(valid, arccoth(safe) / nu, np.inf)

    return [MarginalCurve(0, domain, hyperbolic)]


def critical_length(a: float, b: float, lam: float) -> CriticalLength:
    """Supremum of the lengths stabilizable by some gain |k| < 1"""
    _check_lambda(lam)
    if a > 0 and b > 0:
        return CriticalLength(math.sqrt(lam / (a * b)) * math.pi)
    if a < 0 and b < 0:
        x = (b - lam * a) / (2.0 * math.sqrt(lam * a * b))
        return CriticalLength(math.sqrt(lam / (a * b)) * float(arccot(x)))
    if -lam * a > b > 0:
        x = (b - lam * a) / (2.0 * math.sqrt(-lam * a * b))
        return CriticalLength(math.sqrt(-lam / (a * b)) * float(arccoth(x)))
    if b == 0 and a < 0:
        return CriticalLength(-2.0 / a)
    return CriticalLength(math.inf)


def is_stabilizable(a: float, b: float, lam: float, L: float) -> bool:
    """Dichotomy: some |k| < 1 stabilizes exactly when L < L_c"""
    if L < 0:
        raise InvalidParameters(f"L must be nonnegative, got {L}")
    return L < critical_length(a, b, lam).value


def _require_inside_gain(p: SystemParams):
    if not abs(p.k) < 1.0:
        raise InvalidParameters(f"block index needs |k| < 1, got k={p.k}")


def block_index(p: SystemParams, tol: float = MARGINAL_TOL) -> Union[int, str]:
    """Number of marginal curves strictly below (k, L), or ``"Marginal"``"""
    _require_inside_gain(p)
    a, b, lam, k, L = p.a, p.b, p.lam, p.k, p.L

    if a * b > 0:
        omega = math.sqrt(a * b / lam)
        base = float(arccot((k * b / lam + a) / ((k - 1.0) * omega))) / omega
        spacing = math.pi / omega
        # heights base + n*spacing, n >= 0
        offset = (L - base) / spacing
        nearest = round(offset)
        if nearest >= 0 and abs(L - (base + nearest * spacing)) < tol:
            return MARGINAL
        return 0 if L <= base else int(math.floor(offset)) + 1

    count = 0
    for curve in marginal_curves(a, b, lam):
        height = curve.height(k)
        if not np.isfinite(height):
            continue
        if abs(L - height) < tol:
            return MARGINAL
        if height < L:
            count += 1
    return count


def distance_to_curves(a: float, b: float, lam: float, k: float, L: float) -> float:
    """Vertical distance from (k, L) to the nearest marginal curve (inf if none)"""
    if a * b > 0:
        omega = math.sqrt(a * b / lam)
        base = float(arccot((k * b / lam + a) / ((k - 1.0) * omega))) / omega
        spacing = math.pi / omega
        n = max(0, round((L - base) / spacing))
        return abs(L - (base + n * spacing))
    best = math.inf
    for curve in marginal_curves(a, b, lam):
        height = curve.height(k)
        if np.isfinite(height):
            best = min(best, abs(L - height))
    return best


def threshold_k(a: float, b: float, lam: float, L: float,
                tol: float = THRESHOLD_TOL, samples: int = 2001) -> Optional[ThresholdGain]:
    """Gain where the lowest marginal curve crosses height L, or None"""
    _check_lambda(lam)
    if not L > 0:
        raise InvalidParameters(f"L must be positive, got {L}")
    curves = marginal_curves(a, b, lam, n_max=0)
    if not curves:
        return None
    lowest = curves[0]
    dom = lowest.k_domain
    if dom.empty:
        return None

    pad = 1e-9 * max(1.0, dom.hi - dom.lo)
    grid = np.linspace(dom.lo + pad, dom.hi - pad, samples)
    heights = lowest.height(grid)
    finite = np.isfinite(heights)
    diff = np.where(finite, heights - L, np.inf)
    signs = np.sign(diff)

    for i in range(samples - 1):
        if signs[i] == 0 and finite[i]:
            return _threshold_at(lowest, float(grid[i]), L)
        if signs[i] * signs[i + 1] < 0 and finite[i] and finite[i + 1]:
            k_star = brentq(lambda k: lowest.height(k) - L, grid[i], grid[i + 1], xtol=tol, rtol=4 * np.finfo(float).eps)
            return _threshold_at(lowest, float(k_star), L)
    logger.debug(f"no crossing of L={L} by the lowest marginal curve of {(a, b, lam)}")
    return None


def _threshold_at(curve: MarginalCurve, k_star: float, L: float) -> ThresholdGain:
    dom = curve.k_domain
    h = 1e-6 * max(1.0, abs(k_star))
    left = max(k_star - h, dom.lo + 1e-12)
    right = min(k_star + h, dom.hi - 1e-12)
    slope = (curve.height(right) - curve.height(left)) / (right - left)
    # stable where the curve lies above L
    stable_side = "above" if slope > 0 else "below"
    return ThresholdGain(k=k_star, slope=float(slope), stable_side=stable_side)


def curve_table(a: float, b: float, lam: float, k_values, n_max: Optional[int] = None,
                L_max: float = 3.0) -> List[dict]:
    """Rows ``branch,k,L`` for export; points outside a branch domain are skipped"""
    rows = []
    k_values = np.asarray(k_values, dtype=float)
    for curve in marginal_curves(a, b, lam, n_max=n_max, L_max=L_max):
        heights = curve.height(k_values)
        for k, L in zip(k_values, heights):
            if np.isfinite(L):
                rows.append({"branch": curve.branch_index, "k": float(k), "L": float(L)})
    return rows
