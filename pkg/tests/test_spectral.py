import math

import numpy as np
import pytest

from src.stability_core.core import SystemParams, eval_char
from src.stability_core.errors import InvalidParameters, NoConvergence, OverflowRange, RadiusExhausted
from src.stability_core.marginal import MARGINAL, block_index, distance_to_curves, marginal_curves
from src.stability_core.spectral import (MIN_SAMPLES, ContourSpec, STABLE, UNSTABLE, count_unstable,
                                         seed_unstable_roots, refine_root, k1_imaginary_roots,
                                         unstable_roots, stability_verdict, initial_radius,
                                         _default_samples)


def params(a=1.0, b=1.0, lam=1.0, L=1.0, k=0.0):
    return SystemParams(a=a, b=b, lam=lam, L=L, k=k)


# --- counting ---------------------------------------------------------------

def test_short_interval_is_stable():
    """Test N = 0 for (1, 1, 1) at L = 1"""
    report = count_unstable(params(L=1.0))
    assert report.n_unstable == 0
    assert report.verdict == STABLE
    assert report.radius_used > 0


def test_one_crossing_gives_one_root():
    """Test N = 1 past the first marginal curve"""
    report = count_unstable(params(L=2.5))
    assert report.n_unstable == 1
    assert report.verdict == UNSTABLE


def test_zero_length():
    """Test that L = 0 is stable without a contour"""
    report = count_unstable(params(a=3.0, b=-2.0, lam=0.7, L=0.0, k=0.3))
    assert report.n_unstable == 0
    assert report.verdict == STABLE


def test_marginal_point():
    """Test the marginal verdict on a curve"""
    report = count_unstable(params(L=3.0 * math.pi / 4.0))
    assert report.verdict == MARGINAL
    assert report.n_unstable is None
    assert report.to_dict()["N"] == MARGINAL


@pytest.mark.parametrize("k", [1.0, -1.0, 1.5])
def test_rejects_outer_gains(k):
    """Test that counting needs |k| < 1"""
    with pytest.raises(InvalidParameters):
        count_unstable(params(k=k))


def test_radius_stability():
    """Test that doubling the radius keeps the count"""
    p = params(L=3.0, k=0.2)
    report = count_unstable(p)
    doubled = count_unstable(p, ContourSpec(radius=2.0 * report.radius_used))
    assert doubled.n_unstable == report.n_unstable == 1


def test_explicit_radius_inside_branch_disc():
    """Test rejection of a radius inside the branch disc"""
    with pytest.raises(InvalidParameters):
        count_unstable(params(a=4.0, b=4.0), ContourSpec(radius=0.5))


def test_contour_spec_validation():
    """Test ContourSpec argument checks"""
    with pytest.raises(InvalidParameters):
        ContourSpec(radius=0.0)
    with pytest.raises(InvalidParameters):
        ContourSpec(radius=10.0, n_arc=10)


def test_exhausted_doublings():
    """Test RadiusExhausted when no doubling is allowed"""
    with pytest.raises(RadiusExhausted):
        count_unstable(params(L=3.0), max_doublings=0)


def test_initial_radius_clears_branch_points():
    """Test the radius floor for large |ab|"""
    p = params(a=10.0, b=10.0, L=5.0)
    assert initial_radius(p) >= 1.5 * math.sqrt(8.0 * 100.0) / 2.0


@pytest.mark.parametrize("L", [1e-3, 1e-2, 0.1, 1.0])
def test_sample_counts_stay_bounded_on_short_intervals(L):
    """Test that contour sampling does not grow as L shrinks"""
    p = params(L=L)
    n_arc, n_axis = _default_samples(p, initial_radius(p))
    assert MIN_SAMPLES <= n_axis <= n_arc <= 2 * MIN_SAMPLES


def test_tiny_length_is_stable():
    """Test N = 0 at L = 1e-3"""
    report = count_unstable(params(a=-4.0, b=1.0, lam=0.5, L=1e-3, k=0.5))
    assert report.n_unstable == 0


def test_char_options_reach_the_contour():
    """Test that overflow_limit applies to every evaluation of the count"""
    p = params(a=4.0, b=-1.0, L=2.5)
    assert count_unstable(p).n_unstable == 0
    with pytest.raises(OverflowRange):
        count_unstable(p, overflow_limit=1.0)


def test_report_row():
    """Test the report row fields"""
    row = count_unstable(params(L=1.0)).to_dict()
    assert row["lambda"] == 1.0
    assert row["N"] == 0
    assert row["verdict"] == STABLE


@pytest.mark.parametrize("triple", [(1.0, 1.0, 1.0), (-1.0, -2.0, 1.0), (0.0, 1.0, 1.0),
                                    (-1.0, 0.0, 1.0), (-4.0, 1.0, 0.5)])
def test_counts_agree_with_block_index(triple, rng):
    """Test that winding counts match the block index off the curves"""
    checked = 0
    while checked < 12:
        k = float(rng.uniform(-0.95, 0.95))
        L = float(rng.uniform(0.1, 4.0))
        if distance_to_curves(*triple, k, L) < 0.02:
            continue
        p = SystemParams(*triple, L=L, k=k)
        assert count_unstable(p).n_unstable == block_index(p), p
        checked += 1


def test_crossing_a_curve_adds_one_root(rng):
    """Test that crossing the first curve upward adds one root"""
    for triple in [(1.0, 1.0, 1.0), (-1.0, -2.0, 1.0), (-1.0, 0.0, 1.0)]:
        curve = marginal_curves(*triple, n_max=0)[0]
        for _ in range(4):
            k = float(rng.uniform(-0.8, 0.8))
            L0 = curve.height(k)
            if not (np.isfinite(L0) and L0 > 0.05):
                continue
            below = count_unstable(SystemParams(*triple, L=L0 - 0.01, k=k)).n_unstable
            above = count_unstable(SystemParams(*triple, L=L0 + 0.01, k=k)).n_unstable
            assert above == below + 1


def test_block_constancy_along_a_path():
    """Test a constant count along a path inside one block"""
    counts = {count_unstable(params(L=L, k=k)).n_unstable
              for k, L in zip(np.linspace(-0.5, 0.5, 6), np.linspace(2.6, 3.2, 6))}
    assert counts == {1}


# --- seeds ------------------------------------------------------------------

def test_seeds_positive_gain():
    """Test the n = 0 seed for k = 2"""
    seeds = seed_unstable_roots(params(k=2.0), 0, 0)
    assert seeds[0] == pytest.approx(0.5 * math.log(2.0))


def test_seeds_negative_gain_are_shifted():
    """Test the half-period shift for k < -1"""
    seeds = seed_unstable_roots(params(k=-2.0), 0, 1)
    assert seeds[0] == pytest.approx(0.5 * complex(math.log(2.0), math.pi))
    assert seeds[1] == pytest.approx(0.5 * complex(math.log(2.0), 3.0 * math.pi))


def test_seeds_scale_with_lambda_and_length():
    """Test the seed scaling 2 lam/((lam+1) L)"""
    seeds = seed_unstable_roots(params(lam=2.0, L=2.0, k=2.0), 1, 1)
    assert seeds[0] == pytest.approx(complex(math.log(2.0), 2.0 * math.pi) / 3.0)


@pytest.mark.parametrize("kwargs,n_min,n_max", [
    ({"k": 0.5}, 0, 1),
    ({"k": 2.0, "L": 0.0}, 0, 1),
    ({"k": 2.0}, 3, 1),
])
def test_seed_preconditions(kwargs, n_min, n_max):
    """Test seed argument checks"""
    with pytest.raises(InvalidParameters):
        seed_unstable_roots(params(**kwargs), n_min, n_max)


# --- refinement -----------------------------------------------------------------

def test_refines_high_seed():
    """Test Newton refinement of the n = 6 seed"""
    p = params(k=2.0)
    seed = seed_unstable_roots(p, 6, 6)[0]
    root = refine_root(p, seed)
    assert root.real > 0
    assert abs(eval_char(p, root)) < 1e-10
    # conjugate pairing
    assert abs(eval_char(p, root.conjugate())) < 1e-10


def test_unstable_roots_for_k_two():
    """Test refined roots for k = 2 labelled by their seed index"""
    p = params(k=2.0)
    pairs = unstable_roots(p, 5, 10)
    assert [n for n, _ in pairs] == [5, 6, 7, 8, 9, 10]
    for n, root in pairs:
        assert root.real > 0
        assert abs(eval_char(p, root)) < 1e-10
        assert root.imag == pytest.approx(n * math.pi, abs=0.5)


def test_unstable_roots_respect_iteration_budget():
    """Test that max_iter = 0 keeps every unrefined seed out"""
    assert unstable_roots(params(k=2.0), 5, 8, max_iter=0) == []
    assert len(unstable_roots(params(k=2.0), 5, 8, max_iter=50)) == 4


def test_converges_to_origin_at_unit_gain():
    """Test refinement to the zero root at k = 1, L = pi"""
    p = params(L=math.pi, k=1.0)
    root = refine_root(p, 0.1j)
    assert abs(root) < 1e-4
    assert abs(eval_char(p, root)) < 1e-10


def test_far_seed_never_returns_a_bad_value():
    """Test that a far seed either converges or raises"""
    p = params(k=0.0)
    try:
        root = refine_root(p, 50.0 + 50.0j)
    except NoConvergence:
        return
    assert abs(eval_char(p, root)) < 1e-10


def test_rejects_non_finite_seed():
    """Test that NaN seeds are rejected"""
    with pytest.raises(InvalidParameters):
        refine_root(params(), complex(math.nan, 0.0))


# --- unit gain ----------------------------------------------------------------------

def test_unit_gain_residuals():
    """Test residuals of the closed-form k = 1 roots"""
    for L in (1.0, 2.0, 5.0):
        p = params(L=L, k=1.0)
        for sigma in k1_imaginary_roots(p, 5):
            assert abs(eval_char(p, sigma)) < 1e-9


def test_unit_gain_values_from_zero_index():
    """Test the k = 1 roots from n = 0 at L = pi"""
    roots = k1_imaginary_roots(params(L=math.pi, k=1.0), 2, n_min=0)
    assert roots[0] == pytest.approx(1.0)
    assert abs(roots[1]) < 1e-12
    assert roots[2] == pytest.approx(1j * math.sqrt(3.0))


def test_first_imaginary_root():
    """Test the n = 1 root at L = 1"""
    root = k1_imaginary_roots(params(L=1.0, k=1.0), 1)[0]
    assert root == pytest.approx(1j * math.sqrt(math.pi ** 2 - 1.0))
    assert abs(root.imag - 2.978) < 1e-3


def test_unit_gain_family_requires_unit_gain():
    """Test that k != 1 is rejected"""
    with pytest.raises(InvalidParameters):
        k1_imaginary_roots(params(k=0.9), 3)


def test_stability_verdict_covers_every_gain():
    """Test verdicts for k = 2, k = -1 and |k| < 1"""
    assert stability_verdict(params(k=2.0)).verdict == UNSTABLE
    assert stability_verdict(params(k=-1.0)).verdict == MARGINAL
    assert stability_verdict(params(L=1.0)).verdict == STABLE
