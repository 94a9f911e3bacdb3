import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import ndtr

from mcuq.covmax import (
    AllocationProblem,
    allocate,
    allocate_greedy,
    expected_coverage,
    marginal_gain,
    realized_coverage,
)


def coverage_of(lengths, s):
    return float(np.mean(2 * ndtr(np.asarray(lengths) / (2 * np.asarray(s))) - 1))


def problem(s, budget, center=None):
    s = np.asarray(s, dtype=float)
    return AllocationProblem.from_arrays(np.zeros_like(s) if center is None else center, s, budget)


def test_zero_budget():
    alloc = allocate(problem([1.0, 2.0, 0.5], 0.0))
    assert np.all(alloc.lengths == 0)
    assert alloc.expected_coverage == 0.0
    assert alloc.multiplier == float("inf")


def test_equal_widths_split_evenly():
    alloc = allocate(problem([0.7, 0.7], 3.0))
    np.testing.assert_allclose(alloc.lengths, [1.5, 1.5], rtol=1e-9)


def test_single_entry_95():
    alloc = allocate(problem([1.0], 3.919928))
    assert alloc.expected_coverage == pytest.approx(0.95, abs=1e-6)
    assert expected_coverage(alloc, s=[1.0]) == pytest.approx(0.95, abs=1e-6)


def test_intervals_are_centred():
    c = np.array([3.0, -1.0])
    alloc = allocate(problem([1.0, 2.0], 4.0, center=c))
    np.testing.assert_allclose((alloc.a + alloc.b) / 2, c, atol=1e-12)


def test_degenerate_entries_get_nothing():
    alloc = allocate(problem([0.0, 1.0], 2.0))
    assert alloc.lengths[0] == 0 and alloc.n_degenerate == 1
    assert alloc.lengths[1] == pytest.approx(2.0, rel=1e-9)


def test_negative_budget_rejected():
    with pytest.raises(ValueError):
        problem([1.0], -1.0)
    with pytest.raises(ValueError):
        problem([-1.0], 1.0)


def test_kkt_conditions(rng):
    s = rng.uniform(0.1, 3.0, 200)
    alloc = allocate(problem(s, 150.0))
    lam = alloc.multiplier
    g = marginal_gain(alloc.lengths, s)
    pos = alloc.lengths > 0
    assert pos.any() and (~pos).any()
    assert np.max(np.abs(g[pos] - lam)) / lam < 1e-6
    # Entries left at zero would not gain more than the multiplier.
    assert np.all(g[~pos] <= lam * (1 + 1e-6))


def test_matches_greedy_oracle(rng):
    s = rng.uniform(0.2, 2.0, 50)
    prob = problem(s, 60.0)
    exact = allocate(prob)
    greedy = allocate_greedy(prob, steps=20_000)
    assert greedy.total_length == pytest.approx(60.0)
    assert exact.expected_coverage >= greedy.expected_coverage - 1e-4


def test_two_entry_grid_search():
    s = np.array([0.5, 2.0])
    alpha = 3.0
    best = max(coverage_of([x, alpha - x], s) for x in np.linspace(0, alpha, 30_001))
    alloc = allocate(problem(s, alpha))
    assert alloc.expected_coverage >= best - 1e-9


def test_three_entry_grid_search():
    s = np.array([0.3, 1.0, 4.0])
    alpha = 4.0
    grid = np.linspace(0, alpha, 401)
    best = max(coverage_of([x, y, alpha - x - y], s)
               for x, y in itertools.product(grid, grid) if x + y <= alpha)
    assert allocate(problem(s, alpha)).expected_coverage >= best - 1e-9


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.01, 10.0), min_size=1, max_size=30), st.one_of(st.just(0.0), st.floats(1e-6, 200.0)))
def test_budget_feasible(s, budget):
    alloc = allocate(problem(s, budget))
    assert alloc.total_length <= budget * (1 + 1e-12) + 1e-12
    assert np.all(alloc.lengths >= 0)
    if budget > 0:
        assert alloc.total_length >= budget * (1 - 1e-9)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.05, 5.0), min_size=1, max_size=20), st.floats(0.1, 50.0), st.floats(0.01, 10.0))
def test_monotone_in_budget(s, budget, extra):
    a = allocate(problem(s, budget)).expected_coverage
    b = allocate(problem(s, budget + extra)).expected_coverage
    assert b >= a - 1e-12


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.05, 5.0), min_size=1, max_size=20), st.floats(0.1, 50.0), st.floats(0.1, 10.0))
def test_scale_equivariance(s, budget, c):
    s = np.array(s)
    a = allocate(problem(s, budget))
    b = allocate(problem(c * s, c * budget))
    np.testing.assert_allclose(b.lengths, c * a.lengths, rtol=1e-8, atol=1e-10 * c * budget)
    assert b.expected_coverage == pytest.approx(a.expected_coverage, abs=1e-9)


def test_realized_coverage():
    prob = AllocationProblem.from_arrays([0.0, 0.0, 5.0], [1.0, 1.0, 1.0], 6.0, rows=[0, 1, 1], cols=[0, 0, 1])
    alloc = allocate(prob)
    truth = np.array([[0.5, 0.0], [10.0, 5.0]])
    assert realized_coverage(alloc, truth) == pytest.approx(2 / 3)
    assert realized_coverage(alloc, [0.5, 10.0, 5.0]) == pytest.approx(2 / 3)
    with pytest.raises(ValueError):
        realized_coverage(alloc, np.zeros((1, 1)))
    with pytest.raises(ValueError):
        realized_coverage(alloc, [0.0])


def test_expected_coverage_uses_given_centres():
    alloc = allocate(problem([1.0], 2.0))
    shifted = expected_coverage(alloc, centers=[1.0], s=[1.0])
    assert shifted == pytest.approx(ndtr(0.0) - ndtr(-2.0))
    with pytest.raises(ValueError):
        expected_coverage(alloc)
