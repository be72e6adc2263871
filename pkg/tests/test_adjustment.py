import warnings

import numpy as np
import pytest

from conftest import linear_population, make_design
from splitplot.adjustment import (
    adjusted_estimate,
    adjusted_outcomes,
    analysis_moments,
    fit_ag_lin,
    fit_wls_lin,
    gamma_ag_limit,
    gamma_wls_limit,
    heterogeneity_diagnostics,
    projection_estimate,
)
from splitplot.design import PopulationData, randomize
from splitplot.errors import SingularSigmaVV
from splitplot.estimators import G, arm_estimate
from splitplot.moments import CovariateMoments, sigma_estimated
from splitplot.numkernels import RngStream
from splitplot.simharness import SCENARIOS, ScenarioParams, generate_population


def _observe(design, Y, asg):
    return Y[np.arange(design.N), asg.z(design)]


@pytest.fixture
def realizations(medium):
    Y, v = linear_population(medium, seed=2)
    out = []
    for r in range(5):
        asg = randomize(medium, RngStream(40 + r))
        out.append((asg, _observe(medium, Y, asg)))
    return medium, Y, v, out


def test_recovery_identities(realizations):
    d, _, _, reps = realizations
    for asg, y in reps:
        ht = arm_estimate(y, asg, d, "ht").values[:, 0]
        haj = arm_estimate(y, asg, d, "haj").values[:, 0]
        assert np.abs(fit_ag_lin(d, asg, y).beta - ht).max() <= 1e-10
        assert np.abs(fit_wls_lin(d, asg, y).beta - haj).max() <= 1e-10


@pytest.mark.parametrize("kind", ["ag", "wls"])
def test_coefficient_identity(realizations, kind):
    d, _, v, reps = realizations
    flavor = "ht" if kind == "ag" else "haj"
    for asg, y in reps:
        fit = fit_ag_lin(d, asg, y, v) if kind == "ag" else fit_wls_lin(d, asg, y, v)
        yhat = arm_estimate(y, asg, d, flavor).values[:, 0]
        vhat = arm_estimate(v - v.mean(axis=0), asg, d, flavor).values  # 4 x J
        expected = yhat - np.einsum("zj,zj->z", vhat, fit.gamma)
        assert np.abs(fit.beta - expected).max() <= 1e-8


@pytest.mark.parametrize("kind", ["ag", "ag_alpha", "wls"])
def test_adjusted_outcomes_reproduce_intercepts(realizations, kind):
    d, _, v, reps = realizations
    for asg, y in reps:
        if kind == "wls":
            fit, flavor = fit_wls_lin(d, asg, y, v), "haj"
        else:
            fit, flavor = fit_ag_lin(d, asg, y, v, include_alpha=kind == "ag_alpha"), "ht"
        y_adj = adjusted_outcomes(fit, d, asg, y, v)
        assert np.abs(arm_estimate(y_adj, asg, d, flavor).values[:, 0] - fit.beta).max() <= 1e-8


@pytest.mark.parametrize("kind", ["ag", "ag_alpha", "wls"])
def test_residuals_orthogonal_and_vcov_psd(realizations, kind):
    d, _, v, reps = realizations
    asg, y = reps[0]
    fit = fit_wls_lin(d, asg, y, v) if kind == "wls" else fit_ag_lin(d, asg, y, v, include_alpha=kind == "ag_alpha")
    score = fit.X.T @ (fit.weights * fit.residuals)
    scale = np.abs(fit.X).max() * np.abs(fit.weights * fit.residuals).sum()
    assert np.abs(score).max() <= 1e-8 * scale
    assert np.allclose(fit.vcov_cluster, fit.vcov_cluster.T)
    assert np.linalg.eigvalsh(fit.vcov_cluster).min() >= -1e-12


def test_frisch_waugh_reproduces_alpha_variant(realizations):
    d, _, v, reps = realizations
    for asg, y in reps:
        fit = fit_ag_lin(d, asg, y, v, include_alpha=True)
        X = fit.X
        resp = X @ np.concatenate([fit.beta, fit.gamma.T.ravel()]) + fit.residuals
        D, C = X[:, :4], X[:, 4:]
        # partial the covariate block out of both the indicators and the response
        proj = C @ np.linalg.lstsq(C, np.column_stack([D, resp]), rcond=None)[0]
        Dr, rr = (np.column_stack([D, resp]) - proj)[:, :4], (np.column_stack([D, resp]) - proj)[:, 4]
        beta_fw = np.linalg.lstsq(Dr, rr, rcond=None)[0]
        assert np.abs(beta_fw - fit.beta).max() <= 1e-8


def test_tau_hat_is_g_beta(realizations):
    d, _, v, reps = realizations
    cov_x = CovariateMoments.from_x(d, v)
    for asg, y in reps:
        for fit in (fit_ag_lin(d, asg, y, v), fit_wls_lin(d, asg, y, v)):
            est = adjusted_estimate(fit, d, asg, y, v, cov_x, strict=False)
            assert np.abs(est.tau_hat - G @ fit.beta).max() <= 1e-12


def test_perfect_fit_wls(medium):
    gen = np.random.default_rng(4)
    v = gen.normal(size=(medium.N, 2))
    slopes = gen.normal(size=(4, 2))
    Y = np.arange(4.0) + v @ slopes.T
    asg = randomize(medium, RngStream(2))
    fit = fit_wls_lin(medium, asg, _observe(medium, Y, asg), v)
    assert np.abs(fit.residuals).max() <= 1e-10
    assert np.abs(fit.vcov_cluster).max() <= 1e-18
    assert np.allclose(fit.gamma, slopes, atol=1e-10)


def test_perfect_fit_aggregate_needs_alpha_column(medium):
    gen = np.random.default_rng(4)
    v = gen.normal(size=(medium.N, 1))
    Y = np.arange(4.0) + v @ gen.normal(size=(4, 1)).T
    asg = randomize(medium, RngStream(2))
    y = _observe(medium, Y, asg)
    assert np.abs(fit_ag_lin(medium, asg, y, v).residuals).max() > 1e-3
    assert np.abs(fit_ag_lin(medium, asg, y, v, include_alpha=True).residuals).max() <= 1e-10


def test_uniform_design_drops_alpha_column():
    d = make_design(3, [4] * 6, [2] * 6)
    gen = np.random.default_rng(0)
    v = gen.normal(size=(d.N, 1))
    Y = gen.normal(size=(d.N, 4))
    asg = randomize(d, RngStream(1))
    y = _observe(d, Y, asg)
    with pytest.warns(UserWarning, match="alpha"):
        fit = fit_ag_lin(d, asg, y, v, include_alpha=True)
    assert fit.dropped == ["arm00:alpha", "arm01:alpha", "arm10:alpha", "arm11:alpha"]
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        plain = fit_ag_lin(d, asg, y, v)
    assert np.allclose(fit.beta, plain.beta, atol=1e-12)
    assert np.all(fit.gamma[:, 1] == 0.0)


def test_duplicated_analysis_covariate_dropped_last_added(realizations):
    d, _, v, reps = realizations
    asg, y = reps[0]
    vv = np.column_stack([v, v[:, 0]])
    with pytest.warns(UserWarning):
        fit = fit_wls_lin(d, asg, y, vv)
    assert fit.dropped == ["arm00:v2", "arm01:v2", "arm10:v2", "arm11:v2"]
    assert np.allclose(fit.beta, fit_wls_lin(d, asg, y, v).beta, atol=1e-10)


def test_cluster_vcov_shift_invariance(realizations):
    d, _, v, reps = realizations
    for asg, y in reps:
        a = fit_wls_lin(d, asg, y, v)
        b = fit_wls_lin(d, asg, y + 7.5, v)
        assert np.abs(G @ a.vcov_cluster @ G.T - G @ b.vcov_cluster @ G.T).max() <= 1e-10


def test_cluster_vcov_uses_small_sample_factor(realizations):
    d, _, _, reps = realizations
    asg, y = reps[0]
    fit = fit_ag_lin(d, asg, y)
    # no covariates: the aggregate fit is per-arm means, so the sandwich reduces to
    # W/(W-1) * sum_w s_wz s_wz' / (n_z n_z') with s_wz the plot's residual in arm z
    X, e = fit.X, fit.residuals
    rows_w = np.repeat(np.arange(d.W), 2)
    s = np.zeros((d.W, 4))
    np.add.at(s, rows_w, X * e[:, None])
    n = X.sum(axis=0)
    expected = d.W / (d.W - 1) * (s.T @ s) / np.outer(n, n)
    assert np.allclose(fit.vcov_cluster, expected, rtol=1e-10, atol=1e-14)


def test_projection_with_v_equal_x_matches_unadjusted_perp(realizations):
    d, _, v, reps = realizations
    cov = CovariateMoments.from_x(d, v)
    for asg, y in reps:
        for flavor in ("ht", "haj"):
            p = projection_estimate(d, asg, y, cov, flavor, strict=False)
            u = sigma_estimated(d, asg, y, cov, flavor, strict=False)
            assert np.abs(p.sigma_blocks.perp_raw - u.perp_raw).max() <= 1e-10


def _projection_gap(W, reps=300):
    pop = generate_population(ScenarioParams(W=W, W1=W // 3, lam0=5, lam1=3, delta_var=0.5), RngStream(3).child(W))
    d = pop.design
    gen = np.random.default_rng(9)
    v = gen.normal(size=(d.N, 1))
    Y = np.tile(gen.normal(size=(d.N, 1)), (1, 4)) + np.arange(4.0)
    cov = CovariateMoments.from_x(d, v)
    diffs, taus = [], []
    for r in range(reps):
        asg = randomize(d, RngStream(r))
        y = _observe(d, Y, asg)
        tau = G @ arm_estimate(y, asg, d, "ht").values[:, 0]
        diffs.append(projection_estimate(d, asg, y, cov, "ht", strict=False).tau_hat - tau)
        taus.append(tau)
    return np.array(diffs).mean(axis=0), np.array(taus).std(axis=0)


def test_projection_null_when_outcome_ignores_v():
    # the gap is a finite-sample O(1/W) product-moment bias, negligible against sd(tau_hat)
    gap_s, _ = _projection_gap(160)
    gap_l, sd_l = _projection_gap(640)
    assert np.all(np.abs(gap_l) <= 0.2 * sd_l)
    ratio = np.abs(gap_s) / np.abs(gap_l)
    assert np.all((ratio > 2.5) & (ratio < 6.5))


def test_singular_analysis_covariates_raise(medium):
    v = np.random.default_rng(0).normal(size=medium.N)
    with pytest.raises(SingularSigmaVV):
        analysis_moments(medium, np.column_stack([v, 2 * v]))


def test_heterogeneity_whole_plot_covariates_zero(medium):
    vw = np.random.default_rng(1).normal(size=(medium.W, 2))
    diag = heterogeneity_diagnostics(medium, vw[medium.plot_of_unit])
    assert diag["Psi_vv_norm"] == 0.0 and diag["Q_in_vv_norm"] == 0.0


def test_heterogeneity_shift_invariance(medium):
    v = np.random.default_rng(1).normal(size=(medium.N, 2))
    a = heterogeneity_diagnostics(medium, v)
    b = heterogeneity_diagnostics(medium, v + 3.0)
    assert a["Psi_vv_norm"] == pytest.approx(b["Psi_vv_norm"], rel=1e-10)
    assert a["Q_in_vv_norm"] == pytest.approx(b["Q_in_vv_norm"], rel=1e-10)


def test_heterogeneity_matches_generator():
    pop = generate_population(SCENARIOS["Sim1_Varying"], RngStream(5).child(1))
    d = pop.design
    q = heterogeneity_diagnostics(d, pop.data.v)["Q_in_vv"]
    # E[Q_in] for i.i.d. N(0, 0.5) deviations after removing plot means
    target = 0.5 * (d.N - d.W) / (d.N - 1)
    assert np.allclose(np.diag(q), target, rtol=0.05)
    assert abs(q[0, 1]) <= 0.05 * target
    whole = generate_population(SCENARIOS["Sim1_WholePlot"], RngStream(5).child(1))
    assert heterogeneity_diagnostics(whole.design, whole.data.v)["Q_in_vv_norm"] == 0.0


def _gamma_error(W, kind, reps=30):
    params = ScenarioParams(W=W, W1=W // 3, lam0=5, lam1=3, delta_var=0.5)
    pop = generate_population(params, RngStream(77).child(W))
    d, v, Y = pop.design, pop.data.v, pop.data.potential
    limit = gamma_ag_limit(d, v, Y) if kind == "ag" else gamma_wls_limit(d, v, Y)
    est = []
    for r in range(reps):
        asg = randomize(d, RngStream(r, W))
        y = _observe(d, Y, asg)
        fit = fit_ag_lin(d, asg, y, v) if kind == "ag" else fit_wls_lin(d, asg, y, v)
        est.append(fit.gamma)
    est = np.array(est)
    rms = np.sqrt(((est - limit) ** 2).mean())
    # largest bias of the replication mean in MC standard errors
    mcse = est.std(axis=0, ddof=1) / np.sqrt(reps)
    return rms, float((np.abs(est.mean(axis=0) - limit) / mcse).max())


@pytest.mark.parametrize("kind", ["ag", "wls"])
def test_gamma_converges_to_population_limit(kind):
    small, _ = _gamma_error(60, kind)
    large, mean_err = _gamma_error(3000, kind)
    assert large < 0.5 * small
    assert mean_err < 4.0
