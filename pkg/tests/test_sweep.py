import io
import json
import math

import numpy as np
import pytest

from src.stability_core.core import SystemParams
from src.stability_core.errors import InvalidParameters
from src.stability_core.marginal import MARGINAL, REFERENCE_TRIPLES, block_index
from src.stability_core.sweep import (SweepSpec, SweepCell, SWEEP_FIELDS, SPECTRAL, SIMULATION, BOTH,
                                      evaluate_cell, run_sweep, run_sweep_async, format_value,
                                      write_rows)


@pytest.fixture
def small_spec():
    return SweepSpec(a=1.0, b=1.0, lam=1.0, k_range=(-0.9, 0.9, 4), L_range=(0.2, 3.0, 3))


# --- spec -------------------------------------------------------------------------

def test_grid_values(small_spec):
    """Test the k and L axes of a sweep"""
    assert small_spec.k_values[0] == -0.9
    assert len(small_spec.k_values) == 4
    assert small_spec.L_values.tolist() == pytest.approx([0.2, 1.6, 3.0])
    assert small_spec.uses_spectral and not small_spec.uses_simulation


@pytest.mark.parametrize("kwargs", [
    {"method": "Guess"},
    {"k_range": (0.5, -0.5, 3)},
    {"k_range": (-0.5, 0.5, 1)},
    {"k_range": (-1.0, 0.5, 3)},
    {"L_range": (-1.0, 1.0, 3)},
    {"exclusion_margin": -0.1},
    {"lam": 0.0},
])
def test_spec_validation(kwargs):
    """Test SweepSpec argument checks"""
    values = dict(a=1.0, b=1.0, lam=1.0, k_range=(-0.5, 0.5, 3), L_range=(0.5, 1.0, 2))
    values.update(kwargs)
    with pytest.raises(InvalidParameters):
        SweepSpec(**values)


def test_simulation_sweeps_accept_outer_gains():
    """Test that simulation-only sweeps allow |k| >= 1"""
    spec = SweepSpec(1.0, 1.0, 1.0, k_range=(-2.0, 2.0, 3), L_range=(0.5, 1.0, 2),
                     method=SIMULATION)
    assert spec.uses_simulation and not spec.uses_spectral


def test_numerics_reach_every_cell():
    """Test that overflow_limit is stored per cell as an error code"""
    values = dict(a=4.0, b=-1.0, lam=1.0, k_range=(-0.5, 0.5, 2), L_range=(2.5, 3.0, 2))
    assert all(c.N == 0 for c in run_sweep(SweepSpec(**values)).cells)
    result = run_sweep(SweepSpec(**values, overflow_limit=1.0))
    assert all(c.N == "OverflowRange" for c in result.cells)
    assert all(c.errors == ["OverflowRange"] for c in result.cells)


# --- runs ---------------------------------------------------------------------------

def test_row_major_order(small_spec):
    """Test k-major cell order"""
    result = run_sweep(small_spec)
    assert result.shape == (4, 3)
    assert len(result.cells) == 12
    assert [c.L for c in result.cells[:3]] == pytest.approx([0.2, 1.6, 3.0])
    assert result.cell(1, 2).k == pytest.approx(small_spec.k_values[1])
    assert result.cell(1, 2).L == pytest.approx(3.0)


def test_zero_gain_column_is_stable_below_first_curve():
    """Test N = 0 along k = 0 below L = 3 pi/4"""
    spec = SweepSpec(1.0, 1.0, 1.0, k_range=(-0.9, 0.9, 11), L_range=(0.2, 3.0, 11))
    result = run_sweep(spec)
    column = [c for c in result.cells if abs(c.k) < 1e-12]
    assert len(column) == 11
    for cell in column:
        if cell.L < 3.0 * math.pi / 4.0 - 0.02:
            assert cell.N == 0
    assert all(c.flag is None for c in result.cells)


def test_empty_marginal_set_is_stable_everywhere():
    """Test N = 0 everywhere for (4, -1, 1)"""
    spec = SweepSpec(4.0, -1.0, 1.0, k_range=(-0.9, 0.9, 5), L_range=(0.5, 6.0, 5))
    result = run_sweep(spec)
    assert all(c.N == 0 for c in result.cells)


def test_determinism_across_worker_counts(small_spec):
    """Test identical CSV from one and two workers"""
    serial = run_sweep(small_spec, jobs=1)
    parallel = run_sweep(small_spec, jobs=2)
    assert serial.to_csv() == parallel.to_csv()


def test_determinism_over_random_grids(rng):
    """Test serial and parallel sweeps over 100 random cells"""
    cells = 0
    while cells < 100:
        a, b, lam = REFERENCE_TRIPLES[int(rng.integers(len(REFERENCE_TRIPLES)))]
        k_lo = float(rng.uniform(-0.95, 0.0))
        L_lo = float(rng.uniform(0.1, 2.0))
        spec = SweepSpec(a, b, lam, k_range=(k_lo, k_lo + 0.9, 5),
                         L_range=(L_lo, L_lo + float(rng.uniform(0.5, 2.0)), 5))
        serial = run_sweep(spec, jobs=1)
        assert serial.to_csv() == run_sweep(spec, jobs=2).to_csv()
        assert serial.to_csv() == run_sweep(spec, jobs=1).to_csv()
        cells += len(serial.cells)


def test_cell_independence(small_spec):
    """Test that a cell evaluated alone matches the sweep"""
    result = run_sweep(small_spec)
    for i, j in [(0, 0), (2, 1), (3, 2)]:
        cell = result.cell(i, j)
        alone = evaluate_cell(small_spec, small_spec.k_values[i], small_spec.L_values[j])
        assert alone.row() == cell.row()


def test_cells_near_curves_are_marginal():
    """Test the exclusion margin around marginal curves"""
    L0 = 3.0 * math.pi / 4.0
    spec = SweepSpec(1.0, 1.0, 1.0, k_range=(-0.5, 0.5, 3), L_range=(L0 - 0.01, L0 + 0.5, 2))
    result = run_sweep(spec)
    assert result.cell(1, 0).N == MARGINAL
    assert result.cell(1, 0).marginal
    assert result.cell(1, 1).N == 1


def test_errors_are_recorded_not_raised():
    """Test that cell errors are stored as codes"""
    spec = SweepSpec(1.0, 1.0, 1.0, k_range=(-0.5, 0.5, 2), L_range=(0.0, 1.0, 2),
                     method=SIMULATION, n_cells=20, t_final=2.0)
    result = run_sweep(spec)
    assert result.cell(0, 0).rate == "InvalidParameters"
    assert result.cell(0, 0).errors == ["InvalidParameters"]
    assert isinstance(result.cell(0, 1).rate, float)


def test_rejects_zero_jobs(small_spec):
    """Test InvalidParameters for jobs = 0"""
    with pytest.raises(InvalidParameters):
        run_sweep(small_spec, jobs=0)


def test_exports(small_spec):
    """Test CSV and JSON exports"""
    result = run_sweep(small_spec)
    lines = result.to_csv().splitlines()
    assert lines[0] == ",".join(SWEEP_FIELDS)
    assert len(lines) == 13
    payload = json.loads(json.dumps(result.to_dict()))
    assert payload["spec"]["method"] == SPECTRAL
    assert len(payload["cells"]) == 12


@pytest.mark.asyncio
async def test_async_wrapper_matches(small_spec):
    """Test that the async wrapper returns the same sweep"""
    result = await run_sweep_async(small_spec)
    assert result.to_csv() == run_sweep(small_spec).to_csv()


@pytest.mark.slow
def test_both_methods_agree_around_threshold_gain():
    """Test spectral and simulated verdicts around k* for (-1, -2, 1)"""
    spec = SweepSpec(-1.0, -2.0, 1.0, k_range=(-0.6, 0.0, 5), L_range=(0.5, 0.9, 2),
                     method=BOTH)
    result = run_sweep(spec, jobs=2)
    assert result.disagreements() == []
    at_09 = [result.cell(i, 1) for i in range(5)]
    assert [c.N for c in at_09] == [0, 0, 0, 1, 1]
    assert all(c.flag for c in result.cells)


@pytest.mark.slow
def test_counts_match_block_index_on_reference_triples():
    """Test sweep counts against the block index on every reference triple"""
    for a, b, lam in REFERENCE_TRIPLES:
        spec = SweepSpec(a, b, lam, k_range=(-0.95, 0.95, 21), L_range=(0.1, 3.0, 21))
        result = run_sweep(spec, jobs=4)
        for cell in result.cells:
            if cell.marginal:
                continue
            assert cell.N == block_index(SystemParams(a, b, lam, cell.L, cell.k)), cell


# --- cells and formatting ------------------------------------------------------------

def test_flag_only_for_combined_method():
    """Test that single-method cells carry no flag"""
    cell = SweepCell(k=0.0, L=1.0, N=0, rate=-0.5)
    assert cell.flag is None
    assert cell.row() == {"k": 0.0, "L": 1.0, "N": 0, "rate": -0.5, "flag": None}


def test_format_value():
    """Test CSV formatting of cell values"""
    assert format_value(None) == ""
    assert format_value(True) == "true"
    assert format_value(np.bool_(False)) == "false"
    assert format_value(0.1) == "0.1"
    assert format_value(np.float64(2.5)) == "2.5"
    assert format_value(3) == "3"
    assert format_value(MARGINAL) == "Marginal"


def test_write_rows():
    """Test rows with missing fields"""
    stream = io.StringIO()
    write_rows(stream, ["t", "energy"], [{"t": 0.0, "energy": 1.0}, {"t": 0.5}])
    assert stream.getvalue() == "t,energy\n0.0,1.0\n0.5,\n"
