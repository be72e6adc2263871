import numpy as np
import pytest

from conftest import make_design, toy_population
from splitplot.design import enumerate_assignments, randomize
from splitplot.errors import InsufficientArms, SingularSigmaXX
from splitplot.estimators import G, arm_estimate_z, covariate_contrasts
from splitplot.moments import (
    CovariateMoments,
    estimated_tt,
    estimated_xt,
    h_matrix,
    h_within,
    population_moments,
    sigma_estimated,
    sigma_population,
)
from splitplot.numkernels import RngStream


def _enumerate(design, Y, cov, flavor):
    rows = np.arange(design.N)
    probs, taus, txs, stt, sxt = [], [], [], [], []
    for asg, p in enumerate_assignments(design):
        z = asg.z(design)
        y = Y[rows, z]
        probs.append(p)
        taus.append(G @ arm_estimate_z(y, z, design, flavor).values[:, 0])
        txs.append(covariate_contrasts(arm_estimate_z(cov.x, z, design, flavor)))
        stt.append(estimated_tt(design, asg, y, flavor))
        sxt.append(estimated_xt(design, asg, y, cov, flavor))
    return np.array(probs), np.array(taus), np.array(txs), np.array(stt), np.array(sxt)


def _wcov(values, probs):
    dev = values - probs @ values
    return (dev * probs[:, None]).T @ dev


def test_h_matrices_closed_form(toy):
    p0, p1 = toy.p
    H = np.kron(np.diag([1 / p0, 1 / p1]), np.ones((2, 2))) - np.ones((4, 4))
    assert np.allclose(h_matrix(toy), H, atol=0)
    hw = h_within(toy)
    for w in range(toy.W):
        q0, q1 = toy.q[w]
        expect = np.kron(np.diag([1 / p0, 1 / p1]), np.diag([1 / q0, 1 / q1]) - np.ones((2, 2)))
        assert np.allclose(hw[w], expect, atol=1e-15)


@pytest.fixture
def toy_moments(toy):
    Y, x = toy_population(toy, seed=1, L=2)
    pm = population_moments(toy, Y, x)
    return toy, Y, pm


def test_enumeration_exactness_ht(toy_moments):
    toy, Y, pm = toy_moments
    probs, taus, txs, stt, sxt = _enumerate(toy, Y, pm.cov, "ht")
    blocks = sigma_population(pm, "ht")
    W = toy.W
    assert np.abs(probs @ taus - pm.tau).max() <= 1e-12
    assert np.abs(probs @ txs).max() <= 1e-12
    assert np.abs(W * _wcov(taus, probs) - blocks.sigma_tt).max() <= 1e-10
    assert np.abs(W * _wcov(txs, probs) - pm.cov.full_sigma_xx("ht")).max() <= 1e-10
    joint = W * _wcov(np.hstack([taus, txs]), probs)
    assert np.abs(joint[:3, 3:] - blocks.sigma_tx).max() <= 1e-10
    assert np.abs(np.tensordot(probs, sxt, 1) - blocks.sigma_xt).max() <= 1e-10
    gap = np.tensordot(probs, stt, 1) - blocks.sigma_tt
    assert np.abs(gap - G @ pm.S["ht"] @ G.T).max() <= 1e-10


def test_enumeration_gap_additive_effects_uniform_design():
    d = make_design(2, [3, 3, 3, 3], [1, 2, 1, 2])
    base = np.random.default_rng(0).normal(size=d.N)
    Y = base[:, None] + np.array([0.0, 0.5, 1.0, 2.0])
    x = np.random.default_rng(1).normal(size=(d.N, 1))
    pm = population_moments(d, Y, x)
    probs, _, _, stt, _ = _enumerate(d, Y, pm.cov, "ht")
    gap = np.tensordot(probs, stt, 1) - sigma_population(pm, "ht").sigma_tt
    assert np.abs(gap - G @ pm.S["ht"] @ G.T).max() <= 1e-10


def test_constant_potential_outcomes(toy):
    Y = np.tile(np.array([1.0, 2.0, -1.0, 4.0]), (toy.N, 1))
    pm = population_moments(toy, Y)
    assert np.abs(pm.S["haj"]).max() == 0
    assert np.abs(pm.S_w).max() == 0
    assert np.abs(pm.Psi).max() == 0


def test_uniform_design_ht_equals_hajek():
    d = make_design(3, [4] * 6, [2] * 6)
    Y, x = toy_population(d, seed=3)
    pm = population_moments(d, Y, x)
    assert np.allclose(pm.S["ht"], pm.S["haj"], atol=1e-14)
    assert np.allclose(pm.cov.S_xx["ht"], pm.cov.S_xx["haj"], atol=1e-14)


def test_orthogonal_covariates_give_zero_coupling():
    # outcomes vary only between plots, covariates only within plots
    d = make_design(3, [4] * 6, [1, 2, 3, 1, 2, 3])
    gen = np.random.default_rng(2)
    u = gen.normal(size=(d.W, 4))
    Y = u[d.plot_of_unit] + np.array([0.0, 1.0, 3.0, 2.0])
    x = gen.normal(size=(d.N, 2))
    x -= (np.add.reduceat(x, d.offsets[:-1]) / d.m[:, None])[d.plot_of_unit]
    pm = population_moments(d, Y, x)
    for flavor in ("ht", "haj"):
        b = sigma_population(pm, flavor)
        assert np.abs(b.sigma_tx).max() <= 1e-12
        assert np.abs(b.parallel).max() <= 1e-12


def test_split_adds_up(toy_moments):
    _, _, pm = toy_moments
    for flavor in ("ht", "haj"):
        b = sigma_population(pm, flavor)
        assert np.allclose(b.perp_raw + b.parallel, b.sigma_tt, atol=1e-12)
        assert np.linalg.eigvalsh(b.perp).min() >= -1e-12
        assert np.linalg.eigvalsh(b.sigma_xx).min() > 0


def test_estimated_tt_block_diagonal_and_zero_for_constants(medium):
    asg = randomize(medium, RngStream(2))
    y = np.random.default_rng(0).normal(size=medium.N)
    for flavor in ("ht", "haj"):
        s = estimated_tt(medium, asg, y, flavor)
        assert np.allclose(s, s.T)
    s = estimated_tt(medium, asg, np.full(medium.N, 3.5), "haj")
    assert np.abs(s).max() <= 1e-24


def test_estimated_split_pre_clamp_identity(medium):
    gen = np.random.default_rng(4)
    x = gen.normal(size=(medium.N, 2))
    y = x @ [1.0, -0.5] + gen.normal(size=medium.N)
    cov = CovariateMoments.from_x(medium, x)
    asg = randomize(medium, RngStream(4))
    b = sigma_estimated(medium, asg, y, cov, "ht", strict=False)
    assert np.allclose(b.perp_raw + b.parallel, b.sigma_tt, atol=1e-12)
    assert np.linalg.eigvalsh(b.perp).min() >= -1e-12


def test_insufficient_arms():
    d = make_design(1, [3, 3, 3], [1, 1, 2])
    asg = randomize(d, RngStream(0))
    with pytest.raises(InsufficientArms):
        estimated_tt(d, asg, np.zeros(d.N), "ht")


def test_duplicated_covariate_is_singular(medium):
    x = np.random.default_rng(0).normal(size=medium.N)
    cov = CovariateMoments.from_x(medium, np.column_stack([x, 2 * x]))
    with pytest.raises(SingularSigmaXX):
        cov.sigma_xx_inv("ht")


def test_whole_plot_covariates_reduce_components(medium):
    xw = np.random.default_rng(1).normal(size=(medium.W, 1))
    cov = CovariateMoments.from_x(medium, xw[medium.plot_of_unit])
    assert cov.k == 1
    assert np.array_equal(cov.active, [True, False, False])
    full = cov.full_sigma_xx("ht")
    assert np.abs(full[1:, :]).max() <= 1e-12
    cov.sigma_xx_inv("haj")


def test_hajek_cross_block_unbiased(toy_moments):
    toy, Y, pm = toy_moments
    probs, _, _, _, sxt = _enumerate(toy, Y, pm.cov, "haj")
    blocks = sigma_population(pm, "haj")
    assert np.abs(np.tensordot(probs, sxt, 1) - blocks.sigma_xt).max() <= 1e-10
