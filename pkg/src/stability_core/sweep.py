"""(k, L) stability sweeps, evaluated cell by cell in parallel."""
from dataclasses import dataclass, field, asdict
from typing import List, Optional, Tuple, Union
import asyncio
import csv
import io
import logging

import numpy as np
from joblib import Parallel, delayed

from .core import OVERFLOW_LIMIT, SERIES_THRESHOLD, SystemParams
from .errors import InvalidParameters, StabilityError
from .marginal import distance_to_curves, MARGINAL
from .simulator import SimConfig, run_simulation, fit_decay_rate
from .spectral import MARGINAL_TOL, MAX_DOUBLINGS, count_unstable

logger = logging.getLogger(__name__)

SPECTRAL = "Spectral"
SIMULATION = "Simulation"
BOTH = "Both"
METHODS = (SPECTRAL, SIMULATION, BOTH)
SWEEP_FIELDS = ["k", "L", "N", "rate", "flag"]

Range = Tuple[float, float, int]


def _check_range(name: str, rng: Range):
    lo, hi, count = rng
    if not hi > lo:
        raise InvalidParameters(f"{name} range must be increasing, got [{lo}, {hi}]")
    if int(count) != count or count < 2:
        raise InvalidParameters(f"{name} range needs an integer count >= 2, got {count}")


@dataclass(frozen=True)
class SweepSpec:
    a: float
    b: float
    lam: float
    k_range: Range
    L_range: Range
    method: str = SPECTRAL
    exclusion_margin: float = 0.02
    n_cells: int = 100
    t_final: float = 30.0
    scheme: str = "implicit"
    marginal_tol: float = MARGINAL_TOL
    max_doublings: int = MAX_DOUBLINGS
    series_threshold: float = SERIES_THRESHOLD
    overflow_limit: float = OVERFLOW_LIMIT

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidParameters(f"method must be one of {METHODS}, got {self.method!r}")
        if not self.lam > 0:
            raise InvalidParameters(f"lambda must be positive, got {self.lam}")
        _check_range("k", self.k_range)
        _check_range("L", self.L_range)
        if self.method != SIMULATION and not (-1.0 < self.k_range[0] and self.k_range[1] < 1.0):
            raise InvalidParameters("spectral sweeps need the k range inside (-1, 1)")
        if self.L_range[0] < 0:
            raise InvalidParameters("L range must be nonnegative")
        if self.exclusion_margin < 0:
            raise InvalidParameters("exclusion_margin must be nonnegative")

    @property
    def k_values(self) -> np.ndarray:
        return np.linspace(*self.k_range[:2], int(self.k_range[2]))

    @property
    def L_values(self) -> np.ndarray:
        return np.linspace(*self.L_range[:2], int(self.L_range[2]))

    @property
    def uses_spectral(self) -> bool:
        return self.method in (SPECTRAL, BOTH)

    @property
    def uses_simulation(self) -> bool:
        return self.method in (SIMULATION, BOTH)


@dataclass
class SweepCell:
    k: float
    L: float
    N: Union[int, str, None] = None
    rate: Union[float, str, None] = None
    flag: Optional[bool] = None
    errors: List[str] = field(default_factory=list)

    @property
    def marginal(self) -> bool:
        return self.N == MARGINAL

    def row(self) -> dict:
        return {"k": self.k, "L": self.L, "N": self.N, "rate": self.rate, "flag": self.flag}


def evaluate_cell(spec: SweepSpec, k: float, L: float) -> SweepCell:
    """One sweep cell; numerical errors are stored, never raised"""
    cell = SweepCell(k=float(k), L=float(L))
    near = abs(k) < 1.0 and distance_to_curves(spec.a, spec.b, spec.lam, k, L) < spec.exclusion_margin

    try:
        p = SystemParams(spec.a, spec.b, spec.lam, float(L), float(k))
    except StabilityError as e:
        cell.N = e.code
        cell.errors.append(e.code)
        return cell

    if spec.uses_spectral:
        try:
            report = count_unstable(p, marginal_tol=spec.marginal_tol, max_doublings=spec.max_doublings,
                                    series_threshold=spec.series_threshold,
                                    overflow_limit=spec.overflow_limit)
            cell.N = MARGINAL if report.n_unstable is None else report.n_unstable
        except StabilityError as e:
            logger.warning(f"cell k={k:g}, L={L:g}: {e.code}: {e}")
            cell.N = e.code
            cell.errors.append(e.code)

    if spec.uses_simulation:
        try:
            trace, _ = run_simulation(SimConfig(p, n_cells=spec.n_cells, t_final=spec.t_final,
                                                scheme=spec.scheme))
            cell.rate = fit_decay_rate(trace)
        except StabilityError as e:
            logger.warning(f"cell k={k:g}, L={L:g}: {e.code}: {e}")
            cell.rate = e.code
            cell.errors.append(e.code)

    if near:
        cell.N = MARGINAL

    if spec.method == BOTH and isinstance(cell.N, int) and isinstance(cell.rate, float):
        cell.flag = (cell.N == 0) == (cell.rate < 0)
    return cell


@dataclass
class SweepResult:
    spec: SweepSpec
    cells: List[SweepCell]

    @property
    def shape(self) -> Tuple[int, int]:
        return int(self.spec.k_range[2]), int(self.spec.L_range[2])

    def cell(self, i: int, j: int) -> SweepCell:
        """Cell at the i-th k value and j-th L value"""
        return self.cells[i * self.shape[1] + j]

    def rows(self) -> List[dict]:
        return [c.row() for c in self.cells]

    def to_dict(self) -> dict:
        return {"spec": asdict(self.spec), "cells": self.rows()}

    def to_csv(self) -> str:
        buffer = io.StringIO()
        write_rows(buffer, SWEEP_FIELDS, self.rows())
        return buffer.getvalue()

    def disagreements(self) -> List[SweepCell]:
        return [c for c in self.cells if c.flag is False]


def format_value(value) -> str:
    """Deterministic text for CSV cells"""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_rows(stream, fieldnames: List[str], rows: List[dict]):
    writer = csv.DictWriter(stream, fieldnames=fieldnames, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({key: format_value(row.get(key)) for key in fieldnames})


def run_sweep(spec: SweepSpec, jobs: int = 1) -> SweepResult:
    """Evaluate every (k, L) cell, row-major in k then L"""
    if jobs == 0:
        raise InvalidParameters("jobs must be nonzero")
    points = [(k, L) for k in spec.k_values for L in spec.L_values]
    logger.info(f"sweep of {len(points)} cells ({spec.method}) on {jobs} worker(s)")
    cells = Parallel(n_jobs=jobs)(delayed(evaluate_cell)(spec, k, L) for k, L in points)
    failed = sum(1 for c in cells if c.errors)
    if failed:
        logger.warning(f"{failed} sweep cell(s) recorded numerical errors")
    return SweepResult(spec=spec, cells=list(cells))


async def run_sweep_async(spec: SweepSpec, jobs: int = 1) -> SweepResult:
    """run_sweep off the event loop thread"""
    return await asyncio.to_thread(run_sweep, spec, jobs)
