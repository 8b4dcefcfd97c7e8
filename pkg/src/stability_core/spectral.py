"""Right-half-plane eigenvalue counting and root location.

For |k| < 1 the number of unstable eigenvalues is the winding number of F
around 0 along the boundary of the half-disc {Re sigma >= 0, |sigma| <= R}.
On the arc F is huge, so its phase is assembled from Im(Q) L + arg H (using
F = e^{QL} H / 2); on the imaginary axis F is evaluated directly and the
lower half is obtained from F(-i beta) = conj F(i beta).
"""
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple
import cmath
import logging
import math

import numpy as np

from .core import (OVERFLOW_LIMIT, SERIES_THRESHOLD, SystemParams, eval_char,
                   eval_char_normalized, normalized_radius_floor)
from .errors import (InvalidParameters, MarginalDegenerate, RadiusExhausted,
                     NoConvergence, DerivativeVanishes, OverflowRange)

logger = logging.getLogger(__name__)

STABLE = "Stable"
UNSTABLE = "Unstable"
MARGINAL = "Marginal"

MIN_SAMPLES = 64
MAX_DOUBLINGS = 8
MAX_BISECTIONS = 48
MARGINAL_TOL = 1e-9
ARC_FLOOR = 1e-300
NEWTON_MAX_ITER = 100


@dataclass(frozen=True)
class ContourSpec:
    radius: float
    n_arc: int = 256
    n_axis: int = 256
    min_modulus_floor: float = 1e-12

    def __post_init__(self):
        if not self.radius > 0:
            raise InvalidParameters(f"contour radius must be positive, got {self.radius}")
        if self.n_arc < MIN_SAMPLES or self.n_axis < MIN_SAMPLES:
            raise InvalidParameters(f"contour sample counts must be at least {MIN_SAMPLES}")
        if not self.min_modulus_floor > 0:
            raise InvalidParameters("min_modulus_floor must be positive")


@dataclass
class SpectralReport:
    n_unstable: Optional[int]
    radius_used: float
    min_abs_on_contour: float
    verdict: str
    arc_min_abs_h: float = math.nan
    params: Optional[SystemParams] = field(default=None, repr=False)

    def to_dict(self):
        row = dict(self.params.to_dict()) if self.params else {}
        row.update({
            "N": self.n_unstable if self.n_unstable is not None else self.verdict,
            "verdict": self.verdict,
            "radius": self.radius_used,
            "min_abs": self.min_abs_on_contour,
        })
        return row


class _ContourTooClose(Exception):
    """A zero sits on (or numerically at) the sampled contour"""


def marginal_threshold(p: SystemParams, tol: float = MARGINAL_TOL) -> float:
    return tol * (1.0 + abs(p.a) + abs(p.b))


def initial_radius(p: SystemParams) -> float:
    """Starting radius from the branch-point scale and the asymptotic root spacing"""
    lam, k = p.lam, p.k
    branch_scale = (2.0 * lam / (lam + 1.0)) * math.sqrt(abs(p.a * p.b) / lam)
    spacing = (2.0 * lam / ((lam + 1.0) * p.L)) * (abs(math.log(1.0 - abs(k))) + 2.0 * math.pi)
    radius = branch_scale + spacing + 1.0
    return max(radius, 1.5 * normalized_radius_floor(p))


def _default_samples(p: SystemParams, radius: float):
    """Sample counts keeping the exponential phase step near pi/4; the rest is bounded"""
    rate = (p.lam + 1.0) * p.L / (2.0 * p.lam)
    n_axis = MIN_SAMPLES + int(math.ceil(radius * rate / (math.pi / 4.0)))
    n_arc = MIN_SAMPLES + int(math.ceil(2.0 * radius * rate / (math.pi / 4.0)))
    return n_arc, n_axis


def _phase_change(func: Callable[[np.ndarray], np.ndarray], t0: float, t1: float, n: int,
                  floor: float):
    """Continuous change of arg func(t) over [t0, t1], every increment below pi/2"""
    t = np.linspace(t0, t1, n)
    values = func(t)
    magnitudes = np.abs(values)
    min_abs = float(np.min(magnitudes))
    if min_abs < floor:
        raise _ContourTooClose(min_abs)
    increments = np.angle(values[1:] / values[:-1])
    bad = np.flatnonzero(np.abs(increments) >= math.pi / 2.0)
    for i in bad:
        refined, low = _refine(func, t[i], values[i], t[i + 1], values[i + 1], floor, 0)
        increments[i] = refined
        min_abs = min(min_abs, low)
    return float(np.sum(increments)), min_abs


def _refine(func, ta, va, tb, vb, floor, depth):
    step = float(np.angle(vb / va))
    if abs(step) < math.pi / 2.0:
        return step, min(abs(va), abs(vb))
    if depth >= MAX_BISECTIONS:
        raise _ContourTooClose(min(abs(va), abs(vb)))
    tm = 0.5 * (ta + tb)
    vm = complex(func(np.array([tm]))[0])
    if abs(vm) < floor:
        raise _ContourTooClose(abs(vm))
    left, low_l = _refine(func, ta, va, tm, vm, floor, depth + 1)
    right, low_r = _refine(func, tm, vm, tb, vb, floor, depth + 1)
    return left + right, min(low_l, low_r)


def _winding(p: SystemParams, radius: float, n_arc: int, n_axis: int, floor: float,
             char_options: Dict[str, float]):
    """(N, min |F| on the axis, min |H| on the arc) for the half-disc of this radius"""
    lam, L = p.lam, p.L

    def on_arc(theta):
        return np.asarray(eval_char_normalized(p, radius * np.exp(1j * theta)))

    def on_axis(beta):
        return np.asarray(eval_char(p, 1j * beta, **char_options))

    arc_h, arc_min = _phase_change(on_arc, -math.pi / 2.0, math.pi / 2.0, n_arc, ARC_FLOOR)
    # Im(Q L) from sigma=-iR to sigma=iR; Q(+-iR) = +-i sqrt((lam+1)^2 R^2 + 4 lam a b)/(2 lam)
    arc_q = L * math.sqrt((lam + 1.0) ** 2 * radius ** 2 + 4.0 * lam * p.a * p.b) / lam

    try:
        axis_half, axis_min = _phase_change(on_axis, radius, 0.0, n_axis, floor)
    except _ContourTooClose as exc:
        raise MarginalDegenerate(
            f"|F(i beta)| fell to {exc.args[0]:.3e} on the imaginary axis for {p}") from None

    total = arc_h + arc_q + 2.0 * axis_half
    winding = total / (2.0 * math.pi)
    count = int(round(winding))
    if abs(winding - count) > 0.25:
        logger.warning(f"winding {winding:.3f} far from an integer at R={radius:g} for {p}")
    return count, axis_min, arc_min


def _report(p, count, radius, axis_min, arc_min):
    verdict = STABLE if count == 0 else UNSTABLE
    return SpectralReport(n_unstable=count, radius_used=radius, min_abs_on_contour=axis_min,
                          verdict=verdict, arc_min_abs_h=arc_min, params=p)


def count_unstable(p: SystemParams, spec: Optional[ContourSpec] = None,
                   marginal_tol: float = MARGINAL_TOL,
                   max_doublings: int = MAX_DOUBLINGS,
                   series_threshold: float = SERIES_THRESHOLD,
                   overflow_limit: float = OVERFLOW_LIMIT) -> SpectralReport:
    """Number of eigenvalues with Re sigma > 0 for |k| < 1"""
    if not abs(p.k) < 1.0:
        raise InvalidParameters(f"count_unstable needs |k| < 1, got k={p.k}; use seed_unstable_roots")

    if p.L == 0.0:
        # F is the constant k-1
        return SpectralReport(0, 0.0, abs(p.k - 1.0), STABLE, params=p)

    char_options = {"series_threshold": series_threshold, "overflow_limit": overflow_limit}
    f0 = abs(eval_char(p, 0.0, **char_options))
    threshold = marginal_threshold(p, marginal_tol)
    if f0 < threshold:
        logger.debug(f"|F(0)| = {f0:.3e} below {threshold:.3e}: marginal")
        return SpectralReport(None, 0.0, f0, MARGINAL, params=p)

    if spec is not None:
        if spec.radius < normalized_radius_floor(p):
            raise InvalidParameters(f"radius {spec.radius} is inside the branch-point disc")
        try:
            count, axis_min, arc_min = _winding(p, spec.radius, spec.n_arc, spec.n_axis,
                                                spec.min_modulus_floor, char_options)
        except _ContourTooClose as exc:
            raise RadiusExhausted(f"|H| vanished on the arc of radius {spec.radius}") from exc
        return _report(p, count, spec.radius, axis_min, arc_min)

    arc_floor = (1.0 - abs(p.k)) / 2.0
    radius = initial_radius(p)
    previous = None
    for attempt in range(max_doublings + 1):
        n_arc, n_axis = _default_samples(p, radius)
        try:
            count, axis_min, arc_min = _winding(p, radius, n_arc, n_axis, threshold, char_options)
        except _ContourTooClose:
            count, axis_min, arc_min = None, math.nan, 0.0
        logger.debug(f"R={radius:g}: N={count}, min|H| on arc={arc_min:.3g}")
        if count is not None and previous == count and arc_min > arc_floor:
            return _report(p, count, radius, axis_min, arc_min)
        previous = count
        radius *= 2.0
    raise RadiusExhausted(f"no stable winding count after {max_doublings} doublings for {p}")


def seed_unstable_roots(p: SystemParams, n_min: int, n_max: int) -> List[complex]:
    """Asymptotic locations of the right-half-plane roots for |k| > 1"""
    if not abs(p.k) > 1.0:
        raise InvalidParameters(f"seeds exist only for |k| > 1, got k={p.k}")
    if not p.L > 0:
        raise InvalidParameters("seeds need L > 0")
    if not (0 <= n_min <= n_max):
        raise InvalidParameters(f"need 0 <= n_min <= n_max, got {n_min}, {n_max}")
    shift = 0.0 if p.k > 1.0 else 0.5
    scale = p.lam / ((p.lam + 1.0) * p.L)
    return [scale * complex(math.log(abs(p.k)), 2.0 * (n + shift) * math.pi)
            for n in range(n_min, n_max + 1)]


def _derivative(p: SystemParams, sigma: complex) -> complex:
    h = 1e-7 * max(1.0, abs(sigma))
    return (eval_char(p, sigma + h) - eval_char(p, sigma - h)) / (2.0 * h)


def refine_root(p: SystemParams, seed: complex, tol: float = 1e-10,
                max_iter: int = NEWTON_MAX_ITER) -> complex:
    """Damped Newton polish of a root of F starting from seed"""
    sigma = complex(seed)
    if not (math.isfinite(sigma.real) and math.isfinite(sigma.imag)):
        raise InvalidParameters(f"seed must be finite, got {seed}")
    if not tol > 0:
        raise InvalidParameters("tol must be positive")

    value = eval_char(p, sigma)
    for iteration in range(max_iter):
        if abs(value) < tol:
            return sigma
        slope = _derivative(p, sigma)
        if slope == 0 or not cmath.isfinite(slope) or abs(slope) < np.finfo(float).tiny:
            raise DerivativeVanishes(f"F'({sigma}) vanished during refinement")
        step = value / slope
        damping = 1.0
        while True:
            candidate = sigma - damping * step
            try:
                trial = eval_char(p, candidate)
            except OverflowRange:
                trial = complex(math.inf)
            if abs(trial) < abs(value) or damping < 1e-4:
                break
            damping *= 0.5
        if not cmath.isfinite(trial):
            raise NoConvergence(f"Newton left the representable range from seed {seed}")
        sigma, value = candidate, trial
    if abs(value) < tol:
        return sigma
    raise NoConvergence(f"|F| = {abs(value):.3e} after {max_iter} iterations from seed {seed}")


def k1_imaginary_roots(p: SystemParams, n_max: int, n_min: int = 1) -> List[complex]:
    """Closed-form root family at k = 1, purely imaginary once n pi/L exceeds sqrt(ab/lam)"""
    if p.k != 1.0:
        raise InvalidParameters(f"the closed-form family needs k = 1, got k={p.k}")
    if not p.L > 0:
        raise InvalidParameters("the closed-form family needs L > 0")
    if not (0 <= n_min <= n_max):
        raise InvalidParameters(f"need 0 <= n_min <= n_max, got {n_min}, {n_max}")
    factor = 2.0 * p.lam / (p.lam + 1.0)
    ratio = p.a * p.b / p.lam
    return [factor * cmath.sqrt(ratio - (n * math.pi / p.L) ** 2) for n in range(n_min, n_max + 1)]


def unstable_roots(p: SystemParams, n_min: int, n_max: int, tol: float = 1e-10,
                   max_iter: int = NEWTON_MAX_ITER) -> List[Tuple[int, complex]]:
    """(n, root) for the |k| > 1 seeds that refine into the right half-plane"""
    roots = []
    for n, seed in enumerate(seed_unstable_roots(p, n_min, n_max), start=n_min):
        try:
            root = refine_root(p, seed, tol, max_iter=max_iter)
        except (NoConvergence, DerivativeVanishes) as e:
            logger.debug(f"seed {n} at {seed} did not refine: {e}")
            continue
        if root.real > 0:
            roots.append((n, root))
    return roots


def stability_verdict(p: SystemParams, **kwargs) -> SpectralReport:
    """Verdict for any gain: |k| >= 1 settled in closed form, |k| < 1 by winding"""
    if abs(p.k) > 1.0:
        return SpectralReport(None, 0.0, math.nan, UNSTABLE, params=p)
    if abs(p.k) == 1.0:
        return SpectralReport(None, 0.0, math.nan, MARGINAL, params=p)
    return count_unstable(p, **kwargs)
