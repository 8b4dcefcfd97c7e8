"""Finite-difference simulation of the closed loop and energy-rate fitting.

State orientation: u moves right with speed 1, v moves left with speed lam,

    u_t + u_x + a v = s_u,    v_t - lam v_x + b u = s_v,
    u(t, 0) = k v(t, 0) + U(t),   u(t, L) = v(t, L).

U(t) is zero for proportional feedback; the backstepping loop drives it.
Every stepper is linear in (state, inflow, sources), which the closed-loop
code relies on.
"""
from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Union
import logging
import math

import numpy as np
from scipy import sparse
from scipy.integrate import trapezoid
from scipy.sparse.linalg import splu

from .core import SystemParams
from .errors import (InvalidParameters, SingularStepMatrix, NonFiniteState,
                     InsufficientData)

logger = logging.getLogger(__name__)

SCHEMES = ("implicit", "characteristic")
BLOWUP_LIMIT = 1e150
MIN_FIT_SAMPLES = 10


@dataclass
class SimState:
    u: np.ndarray
    v: np.ndarray
    t: float = 0.0

    def copy(self) -> "SimState":
        return SimState(self.u.copy(), self.v.copy(), self.t)


@dataclass
class EnergyTrace:
    times: np.ndarray
    energies: np.ndarray
    snapshots: List[dict] = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.energies = np.asarray(self.energies, dtype=float)
        if self.times.shape != self.energies.shape:
            raise InvalidParameters("times and energies must have the same length")

    def __len__(self):
        return len(self.times)

    def at(self, t: float) -> float:
        """Energy at the first recorded time >= t"""
        idx = int(np.searchsorted(self.times, t - 1e-12))
        if idx >= len(self.times):
            raise InvalidParameters(f"t={t} is past the end of the trace ({self.times[-1]})")
        return float(self.energies[idx])

    def rows(self) -> List[dict]:
        return [{"t": float(t), "energy": float(e)} for t, e in zip(self.times, self.energies)]


InitialData = Union[None, SimState, Tuple[np.ndarray, np.ndarray]]


@dataclass
class SimConfig:
    params: SystemParams
    n_cells: int = 100
    dt: Optional[float] = None
    t_final: float = 30.0
    initial: InitialData = None
    scheme: str = "implicit"

    def __post_init__(self):
        if self.n_cells < 4:
            raise InvalidParameters(f"n_cells must be at least 4, got {self.n_cells}")
        if not self.params.L > 0:
            raise InvalidParameters("simulation needs L > 0")
        if not self.t_final > 0:
            raise InvalidParameters(f"t_final must be positive, got {self.t_final}")
        if self.scheme not in SCHEMES:
            raise InvalidParameters(f"unknown scheme {self.scheme!r}; choose from {SCHEMES}")
        if self.dt is not None and not self.dt > 0:
            raise InvalidParameters(f"dt must be positive, got {self.dt}")

    @property
    def dx(self) -> float:
        return self.params.L / self.n_cells

    @property
    def time_step(self) -> float:
        if self.dt is not None:
            return self.dt
        if self.scheme == "implicit":
            return 2.0 * self.params.L / self.n_cells
        return self.dx / max(1.0, self.params.lam)


def grid(L: float, n_cells: int) -> np.ndarray:
    return np.linspace(0.0, L, n_cells + 1)


def energy(x: np.ndarray, u: np.ndarray, v: np.ndarray) -> float:
    """Trapezoid rule for the integral of u^2 + v^2"""
    return float(trapezoid(u * u + v * v, x))


def default_initial_data(L: float, n_cells: int) -> SimState:
    """u = x + sin^2 x with the quadratic v that matches it at x = L"""
    if not L > 0:
        raise InvalidParameters(f"L must be positive, got {L}")
    x = grid(L, n_cells)
    u = x + np.sin(x) ** 2
    v = ((L + math.sin(L) ** 2) / (L + L * L)) * (x * x + x)
    return SimState(u=u, v=v, t=0.0)


def _resolve_initial(cfg: SimConfig) -> SimState:
    init = cfg.initial
    if init is None:
        return default_initial_data(cfg.params.L, cfg.n_cells)
    if isinstance(init, SimState):
        state = init.copy()
    else:
        u, v = init
        state = SimState(np.array(u, dtype=float), np.array(v, dtype=float), 0.0)
    n = cfg.n_cells + 1
    if state.u.shape != (n,) or state.v.shape != (n,):
        raise InvalidParameters(f"initial data must have {n} nodes")
    return state


class Stepper:
    """Common shape of the one-step maps; subclasses fill in ``step``"""

    def __init__(self, params: SystemParams, n_cells: int, dt: float):
        self.logger = logging.getLogger(__name__)
        self.params = params
        self.n_cells = n_cells
        self.dt = dt
        self.x = grid(params.L, n_cells)
        self.dx = params.L / n_cells

    def step(self, u, v, inflow=0.0, src_old=None, src_new=None):
        raise NotImplementedError

    def zero_sources(self):
        return np.zeros(self.n_cells + 1), np.zeros(self.n_cells + 1)


class UpwindImplicitStepper(Stepper):
    """Fully implicit first-order upwind scheme, factored once"""

    def __init__(self, params: SystemParams, n_cells: int, dt: float):
        super().__init__(params, n_cells, dt)
        self._lu = self._factor(self._assemble())

    def _assemble(self) -> sparse.csr_matrix:
        p, n, dt, dx = self.params, self.n_cells, self.dt, self.dx
        size = 2 * (n + 1)
        vi = n + 1  # offset of v in the unknown vector
        rows, cols, vals = [], [], []

        def put(r, c, value):
            rows.append(r)
            cols.append(c)
            vals.append(value)

        put(0, 0, 1.0)
        put(0, vi, -p.k)
        for j in range(1, n + 1):
            put(j, j, 1.0 / dt + 1.0 / dx)
            put(j, j - 1, -1.0 / dx)
            put(j, vi + j, p.a)
        for j in range(n):
            put(vi + j, vi + j, 1.0 / dt + p.lam / dx)
            put(vi + j, vi + j + 1, -p.lam / dx)
            put(vi + j, j, p.b)
        put(vi + n, n, 1.0)
        put(vi + n, vi + n, -1.0)
        return sparse.coo_matrix((vals, (rows, cols)), shape=(size, size)).tocsr()

    def _factor(self, matrix):
        try:
            return splu(matrix.tocsc())
        except RuntimeError as e:
            raise SingularStepMatrix(f"step matrix is singular: {e}") from e

    def step(self, u, v, inflow=0.0, src_old=None, src_new=None):
        n = self.n_cells
        rhs = np.empty(2 * (n + 1))
        rhs[:n + 1] = u / self.dt
        rhs[n + 1:] = v / self.dt
        if src_new is not None:
            rhs[1:n + 1] += src_new[0][1:]
            rhs[n + 1:2 * n + 1] += src_new[1][:n]
        rhs[0] = inflow
        rhs[2 * n + 1] = 0.0
        sol = self._lu.solve(rhs)
        return sol[:n + 1], sol[n + 1:]


class CharacteristicStepper(Stepper):
    """Transport along characteristics with trapezoidal coupling; exact shifts when lam*dt = dx"""

    def __init__(self, params: SystemParams, n_cells: int, dt: float):
        super().__init__(params, n_cells, dt)
        limit = self.dx / max(1.0, params.lam)
        if dt > limit * (1.0 + 1e-12):
            raise InvalidParameters(f"characteristic step needs dt <= {limit:g}, got {dt:g}")
        half = 0.5 * dt
        self.det = 1.0 - half * half * params.a * params.b
        if self.det == 0.0 or 1.0 + half * params.b * params.k == 0.0 or 1.0 + half * params.a == 0.0:
            raise SingularStepMatrix("local 2x2 coupling system is singular for this dt")
        self.u_departure = np.clip(self.x - dt, 0.0, params.L)
        self.v_departure = np.clip(self.x + params.lam * dt, 0.0, params.L)

    def step(self, u, v, inflow=0.0, src_old=None, src_new=None):
        p, x, h = self.params, self.x, 0.5 * self.dt
        s_old = src_old if src_old is not None else self.zero_sources()
        s_new = src_new if src_new is not None else self.zero_sources()

        u_dep = np.interp(self.u_departure, x, u)
        v_at_u = np.interp(self.u_departure, x, v)
        su_dep = np.interp(self.u_departure, x, s_old[0])
        v_dep = np.interp(self.v_departure, x, v)
        u_at_v = np.interp(self.v_departure, x, u)
        sv_dep = np.interp(self.v_departure, x, s_old[1])

        # u' + h a v' = A,  v' + h b u' = B
        A = u_dep - h * p.a * v_at_u + h * (su_dep + s_new[0])
        B = v_dep - h * p.b * u_at_v + h * (sv_dep + s_new[1])

        u_new = (A - h * p.a * B) / self.det
        v_new = (B - h * p.b * A) / self.det

        # x = 0: u' = k v' + inflow
        v_new[0] = (B[0] - h * p.b * inflow) / (1.0 + h * p.b * p.k)
        u_new[0] = p.k * v_new[0] + inflow
        # x = L: v' = u'
        u_new[-1] = A[-1] / (1.0 + h * p.a)
        v_new[-1] = u_new[-1]
        return u_new, v_new


class ReflectedStepper:
    """Runs a stepper under x -> L - x, for the control-at-x=L orientation

    Arrays passed in and returned are (y1, y2) on the original grid, with
    y1 moving left, y2 moving right, y2(0) = y1(0) and y1(L) = U.
    """

    def __init__(self, inner: Stepper):
        self.inner = inner
        self.x = inner.x
        self.dt = inner.dt
        self.n_cells = inner.n_cells

    def step(self, y1, y2, inflow=0.0, src_old=None, src_new=None):
        flip = self._flip
        u, v = self.inner.step(y1[::-1], y2[::-1], inflow, flip(src_old), flip(src_new))
        return u[::-1].copy(), v[::-1].copy()

    @staticmethod
    def _flip(src):
        if src is None:
            return None
        return src[0][::-1], src[1][::-1]

    def output(self, y2) -> float:
        """Y = y2 at x = L"""
        return float(y2[-1])


def make_stepper(params: SystemParams, n_cells: int, dt: float, scheme: str) -> Stepper:
    if scheme == "implicit":
        return UpwindImplicitStepper(params, n_cells, dt)
    if scheme == "characteristic":
        return CharacteristicStepper(params, n_cells, dt)
    raise InvalidParameters(f"unknown scheme {scheme!r}; choose from {SCHEMES}")


def step_count(t_final: float, dt: float) -> int:
    ratio = t_final / dt
    nearest = round(ratio)
    return int(nearest) if abs(ratio - nearest) < 1e-9 * max(1.0, ratio) else int(math.ceil(ratio))


def check_finite(u, v, step: int):
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
        raise NonFiniteState(f"state became non-finite at step {step}", step=step)
    if max(np.max(np.abs(u)), np.max(np.abs(v))) > BLOWUP_LIMIT:
        raise NonFiniteState(f"state left the representable range at step {step}", step=step)


def _snapshot_rows(t, x, u, v):
    return [{"t": float(t), "x": float(xi), "u": float(ui), "v": float(vi)}
            for xi, ui, vi in zip(x, u, v)]


def run_simulation(cfg: SimConfig, snapshot_every: Optional[int] = None) -> Tuple[EnergyTrace, SimState]:
    """Advance the proportional-feedback loop to t_final, recording energy every step"""
    if snapshot_every is not None and snapshot_every < 1:
        raise InvalidParameters("snapshot_every must be a positive step count")
    dt = cfg.time_step
    stepper = make_stepper(cfg.params, cfg.n_cells, dt, cfg.scheme)
    state = _resolve_initial(cfg)
    x = stepper.x
    n_steps = step_count(cfg.t_final, dt)
    logger.debug(f"{cfg.scheme} run: {n_steps} steps of {dt:g} on {cfg.n_cells} cells")

    u, v = state.u, state.v
    times = np.empty(n_steps + 1)
    energies = np.empty(n_steps + 1)
    times[0], energies[0] = 0.0, energy(x, u, v)
    snapshots = _snapshot_rows(0.0, x, u, v) if snapshot_every else []

    for n in range(1, n_steps + 1):
        u, v = stepper.step(u, v)
        check_finite(u, v, n)
        times[n] = n * dt
        energies[n] = energy(x, u, v)
        if snapshot_every and n % snapshot_every == 0:
            snapshots.extend(_snapshot_rows(times[n], x, u, v))

    trace = EnergyTrace(times, energies, snapshots)
    return trace, SimState(u, v, float(times[-1]))


def fit_decay_rate(trace: EnergyTrace, window: Tuple[float, float] = (0.5, 1.0)) -> float:
    """Least-squares slope of ln E over the tail window of the trace"""
    times, energies = trace.times, trace.energies
    if len(times) < MIN_FIT_SAMPLES:
        raise InsufficientData(f"need at least {MIN_FIT_SAMPLES} samples, got {len(times)}")
    if np.all(energies < 1e-300):
        raise InsufficientData("energies are all below 1e-300")

    reference = energies[0] if energies[0] > 0 else float(np.max(energies))
    t_end = times[-1]
    lo, hi = window[0] * t_end, window[1] * t_end
    mask = (times >= lo - 1e-12) & (times <= hi + 1e-12) & (energies >= 1e-30 * reference)
    if np.count_nonzero(mask) < 2:
        raise InsufficientData("fewer than two usable samples in the fit window")

    t = times[mask]
    design = np.column_stack([t, np.ones_like(t)])
    coeffs, *_ = np.linalg.lstsq(design, np.log(energies[mask]), rcond=None)
    return float(coeffs[0])
