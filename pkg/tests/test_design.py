import math
import warnings
from fractions import Fraction

import numpy as np
import pytest

from conftest import make_design
from splitplot.design import Assignment, DesignSpec, PopulationData, enumerate_assignments, randomize, randomize_batch, validate_design
from splitplot.errors import CountMismatch, InvalidDesign, SpaceTooLarge
from splitplot.numkernels import RngStream


def test_sim1_shape_design_derived_quantities():
    d = validate_design(DesignSpec.from_arrays(180, [8] * 600, [3] * 600))
    assert d.p[1] == pytest.approx(0.3, abs=0)
    assert np.all(d.q[:, 1] == 3 / 8)
    assert d.N == 4800
    assert d.warnings == []


def test_empty_a_arm_rejected():
    with pytest.raises(InvalidDesign):
        validate_design(DesignSpec.from_arrays(2, [2, 2], [1, 1]))
    with pytest.raises(InvalidDesign):
        validate_design(DesignSpec.from_arrays(0, [2, 2], [1, 1]))


@pytest.mark.parametrize("M,M1", [([1, 2], [1, 1]), ([2, 2], [0, 1]), ([2, 2], [2, 1])])
def test_subplot_constraints_rejected(M, M1):
    with pytest.raises(InvalidDesign):
        validate_design(DesignSpec.from_arrays(1, M, M1))


def test_singleton_b_arm_is_a_warning_not_error():
    with pytest.warns(UserWarning, match="arm of size 1"):
        d = validate_design(DesignSpec.from_arrays(2, [2, 2, 3, 3], [1, 1, 1, 2]))
    assert d.warnings


def test_toy_alpha_averages_to_one(toy):
    assert np.allclose(toy.alpha, np.array([2, 2, 3, 3]) / 2.5)
    assert sum(Fraction(int(m) * 4, 10) for m in toy.m) / 4 == 1
    assert toy.alpha.mean() == pytest.approx(1.0, abs=1e-15)


def test_randomize_counts_exact(medium):
    rng = RngStream(5)
    for r in range(50):
        asg = randomize(medium, rng.child(r))
        asg.check(medium)


def test_batch_counts_exact(medium):
    batch = randomize_batch(medium, RngStream(1), 64)
    assert np.all(batch.A.sum(axis=1) == medium.W1)
    for i in range(batch.n):
        batch.assignment(medium, i).check(medium)


def test_assignment_check_catches_bad_counts(toy):
    a = np.array([1, 1, 0, 0])
    b = np.array([1, 0, 1, 0, 1, 0, 0, 1, 1, 0])
    Assignment(a, b).check(toy)
    with pytest.raises(CountMismatch):
        Assignment(np.array([1, 1, 1, 0]), b).check(toy)
    with pytest.raises(CountMismatch):
        Assignment(a, np.array([1, 1, 1, 0, 1, 0, 0, 1, 1, 0])).check(toy)


def test_enumeration_tiny_counts(tiny):
    items = list(enumerate_assignments(tiny))
    assert len(items) == 8
    assert all(p == 1 / 8 for _, p in items)
    keys = {(tuple(a.a), tuple(a.b)) for a, _ in items}
    assert len(keys) == 8


def test_enumeration_probabilities_sum_to_one(toy):
    total = math.fsum(p for _, p in enumerate_assignments(toy))
    assert abs(total - 1.0) <= 1e-12


def test_enumeration_cap(toy):
    with pytest.raises(SpaceTooLarge):
        next(enumerate_assignments(toy, cap=100))


def test_enumerated_inclusion_probabilities_exact(toy):
    freq = np.zeros((toy.N, 4))
    for asg, p in enumerate_assignments(toy):
        freq[np.arange(toy.N), asg.z(toy)] += p
    expect = np.column_stack([toy.inclusion_probabilities(np.full(toy.N, z)) for z in range(4)])
    assert np.abs(freq - expect).max() <= 1e-12


def test_randomize_marginals_match_inclusion_probabilities(toy):
    n = 100_000
    batch = randomize_batch(toy, RngStream(42), n)
    counts = np.zeros((toy.N, 4))
    for (_, plots, units), grp in zip(toy.size_groups, batch.B_groups):
        a = batch.A[:, plots][:, :, None].astype(int)
        z = 2 * a + grp.astype(int)
        for k in range(4):
            counts[units.ravel(), k] += (z == k).reshape(n, -1).sum(axis=0)
    phat = counts / n
    expect = np.column_stack([toy.inclusion_probabilities(np.full(toy.N, z)) for z in range(4)])
    se = np.sqrt(expect * (1 - expect) / n)
    assert np.all(np.abs(phat - expect) <= 3 * se + 1e-12)


def test_pairwise_a_inclusion(toy):
    n = 100_000
    A = randomize_batch(toy, RngStream(3), n, with_b=False).A.astype(float)
    joint = (A.T @ A) / n
    target = toy.W1 * (toy.W1 - 1) / (toy.W * (toy.W - 1))
    se = math.sqrt(target * (1 - target) / n)
    off = joint[~np.eye(toy.W, dtype=bool)]
    assert np.all(np.abs(off - target) <= 3 * se)


def test_same_seed_same_assignment(medium):
    a1 = randomize(medium, RngStream(9, 2))
    a2 = randomize(medium, RngStream(9, 2))
    a3 = randomize(medium, RngStream(9, 3))
    assert np.array_equal(a1.a, a2.a) and np.array_equal(a1.b, a2.b)
    assert not (np.array_equal(a1.a, a3.a) and np.array_equal(a1.b, a3.b))


def test_population_linking_matrix_checked(toy):
    v = np.arange(2 * toy.N, dtype=float).reshape(toy.N, 2)
    PopulationData(x=v[:, :1], v=v, C=np.array([[1.0, 0.0]]))
    with pytest.raises(CountMismatch):
        PopulationData(x=v[:, :1] + 1e-6, v=v, C=np.array([[1.0, 0.0]]))


def test_population_row_counts_checked(toy):
    data = PopulationData(x=np.zeros((toy.N + 1, 1)))
    with pytest.raises(CountMismatch):
        data.check(toy)


def test_observe_picks_realized_column(toy):
    Y = np.arange(toy.N * 4, dtype=float).reshape(toy.N, 4)
    data = PopulationData(x=np.zeros((toy.N, 1)), potential=Y)
    asg = randomize(toy, RngStream(0))
    y = data.observe(toy, asg)
    assert np.array_equal(y, Y[np.arange(toy.N), asg.z(toy)])
