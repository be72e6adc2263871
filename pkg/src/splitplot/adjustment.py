"""Regression adjustment (aggregate OLS, inverse-probability WLS) and the projection estimator."""

import warnings
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .design import Assignment, ValidatedDesign
from .errors import RankDeficientDesignMatrix, SingularSigmaVV
from .estimators import G, arm_estimate_z, check_flavor, covariate_contrasts
from .moments import (
    CovariateMoments,
    SigmaBlocks,
    estimated_tt,
    estimated_xt,
    population_moments,
    split_blocks,
    within_arm_means,
)
from .numkernels import symmetrize

KIND_FLAVOR = {"ag": "ht", "ag_alpha": "ht", "wls": "haj"}
_COLLINEAR_TOL = 1e-10


@dataclass
class RegressionFit:
    beta: np.ndarray  # arm intercepts, 00 01 10 11
    gamma: np.ndarray  # 4 x (J or J+1); entries of dropped columns are 0
    vcov_cluster: np.ndarray  # 4 x 4
    kind: str
    dropped: List[str] = field(default_factory=list)
    v_center: Optional[np.ndarray] = None
    residuals: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None
    X: Optional[np.ndarray] = None

    @property
    def flavor(self) -> str:
        return KIND_FLAVOR[self.kind]


def _select_columns(X: np.ndarray, sw: np.ndarray, names: List[str]) -> List[int]:
    """Greedy left-to-right rank selection on the weighted design matrix.

    A column is kept when it is not (numerically) in the span of the columns
    kept before it, so collinear columns are dropped last-added first.
    """
    Xw = X * sw[:, None]
    basis = np.zeros((X.shape[0], 0))
    keep = []
    for j in range(X.shape[1]):
        col = Xw[:, j]
        norm = np.linalg.norm(col)
        if norm == 0:
            continue
        r = col - basis @ (basis.T @ col)
        r = r - basis @ (basis.T @ r)
        rn = np.linalg.norm(r)
        if rn > _COLLINEAR_TOL * norm:
            basis = np.column_stack([basis, r / rn])
            keep.append(j)
    return keep


def _cluster_fit(X, y, w, clusters, n_clusters, names, kind, n_cov):
    sw = np.sqrt(w)
    keep = _select_columns(X, sw, names)
    if keep[:4] != [0, 1, 2, 3]:
        raise RankDeficientDesignMatrix("arm indicator columns are collinear", {"kind": kind})
    dropped = [names[j] for j in range(X.shape[1]) if j not in keep]
    if dropped:
        warnings.warn(f"dropping collinear regressor(s): {', '.join(dropped)}", stacklevel=3)
    Xk = X[:, keep]
    Q, R = np.linalg.qr(Xk * sw[:, None])
    coef_k = np.linalg.solve(R, Q.T @ (sw * y))
    resid = y - Xk @ coef_k
    Rinv = np.linalg.solve(R, np.eye(R.shape[0]))
    bread = Rinv @ Rinv.T
    scores = Xk * (w * resid)[:, None]
    csum = np.zeros((n_clusters, Xk.shape[1]))
    np.add.at(csum, clusters, scores)
    meat = csum.T @ csum
    V = n_clusters / (n_clusters - 1) * bread @ meat @ bread
    coef = np.zeros(X.shape[1])
    coef[keep] = coef_k
    gamma = coef[4:].reshape(4, n_cov) if n_cov else np.zeros((4, 0))
    return RegressionFit(coef[:4], gamma, symmetrize(V[:4, :4]), kind, dropped, residuals=resid, weights=w, X=X)


def _interacted(D: np.ndarray, covs: np.ndarray, cov_names: List[str]):
    """Columns: the four arm indicators, then per arm its covariate interactions."""
    blocks = [D]
    names = [f"arm{z}" for z in ("00", "01", "10", "11")]
    for z, lab in enumerate(("00", "01", "10", "11")):
        if covs.shape[1]:
            blocks.append(D[:, [z]] * covs)
            names += [f"arm{lab}:{c}" for c in cov_names]
    return np.hstack(blocks), names


def _center_v(design: ValidatedDesign, v: Optional[np.ndarray]):
    if v is None:
        return np.zeros((design.N, 0)), np.zeros(0)
    v = np.asarray(v, dtype=float)
    if v.ndim == 1:
        v = v[:, None]
    mu = v.mean(axis=0)
    return v - mu, mu


def fit_wls_lin(design: ValidatedDesign, assignment: Assignment, y: np.ndarray, v: Optional[np.ndarray] = None) -> RegressionFit:
    """Unit-level WLS with weights 1/p_ws(Z_ws), arm indicators and arm x (v - vbar)."""
    vc, mu = _center_v(design, v)
    z = assignment.z(design)
    D = np.zeros((design.N, 4))
    D[np.arange(design.N), z] = 1.0
    names = [f"v{j}" for j in range(vc.shape[1])]
    X, colnames = _interacted(D, vc, names)
    w = 1.0 / design.inclusion_probabilities(z)
    fit = _cluster_fit(X, np.asarray(y, float), w, design.plot_of_unit, design.W, colnames, "wls", vc.shape[1])
    fit.v_center = mu
    return fit


def fit_ag_lin(
    design: ValidatedDesign,
    assignment: Assignment,
    y: np.ndarray,
    v: Optional[np.ndarray] = None,
    include_alpha: bool = False,
) -> RegressionFit:
    """Aggregate OLS over (whole plot, B level) rows.

    Response alpha_w * (plot mean of y over its B arm); regressors the arm
    indicators and arm x alpha_w * (plot arm mean of v - vbar), plus
    arm x (alpha_w - 1) when `include_alpha`.
    """
    vc, mu = _center_v(design, v)
    W = design.W
    yw = within_arm_means(design, assignment, np.asarray(y, float))  # W x 2
    rows_w = np.repeat(np.arange(W), 2)
    rows_b = np.tile([0, 1], W)
    z = 2 * assignment.a[rows_w].astype(np.int64) + rows_b
    alpha = design.alpha[rows_w]
    resp = alpha * yw[rows_w, rows_b]
    covs = np.zeros((2 * W, 0))
    names: List[str] = []
    if vc.shape[1]:
        vw = np.stack([within_arm_means(design, assignment, vc[:, j]) for j in range(vc.shape[1])], axis=-1)
        covs = alpha[:, None] * vw[rows_w, rows_b]
        names = [f"v{j}" for j in range(vc.shape[1])]
    if include_alpha:
        covs = np.column_stack([covs, alpha - 1.0])
        names.append("alpha")
    D = np.zeros((2 * W, 4))
    D[np.arange(2 * W), z] = 1.0
    X, colnames = _interacted(D, covs, names)
    kind = "ag_alpha" if include_alpha else "ag"
    fit = _cluster_fit(X, resp, np.ones(2 * W), rows_w, W, colnames, kind, covs.shape[1])
    fit.v_center = mu
    return fit


def adjusted_outcomes(fit: RegressionFit, design: ValidatedDesign, assignment: Assignment, y: np.ndarray, v: Optional[np.ndarray]) -> np.ndarray:
    """Y_ws minus the fitted covariate part for the unit's realized arm.

    The alpha term is divided by alpha_w so that the HT mean of the adjusted
    outcomes reproduces the aggregate-regression intercepts.
    """
    z = assignment.z(design)
    out = np.asarray(y, dtype=float).copy()
    J = 0
    if v is not None:
        v = np.asarray(v, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        J = v.shape[1]
        out -= np.einsum("nj,nj->n", v - fit.v_center, fit.gamma[z, :J])
    if fit.kind == "ag_alpha":
        alpha = design.alpha[design.plot_of_unit]
        out -= (1.0 - 1.0 / alpha) * fit.gamma[z, J]
    return out


@dataclass
class AdjustedEstimate:
    tau_hat: np.ndarray
    sigma_blocks: SigmaBlocks
    kind: str
    fit: Optional[RegressionFit] = None


def adjusted_estimate(
    fit: RegressionFit,
    design: ValidatedDesign,
    assignment: Assignment,
    y: np.ndarray,
    v: Optional[np.ndarray],
    cov_x: Optional[CovariateMoments],
    strict: bool = True,
) -> AdjustedEstimate:
    """Effect estimate from regression intercepts with cluster-robust and plug-in blocks."""
    flavor = fit.flavor
    tau = G @ fit.beta
    stt = design.W * G @ fit.vcov_cluster @ G.T
    if cov_x is None:
        blocks = split_blocks(stt, None, None, flavor, "estimated", strict)
    else:
        y_adj = adjusted_outcomes(fit, design, assignment, y, v)
        stx = estimated_xt(design, assignment, y_adj, cov_x, flavor).T
        blocks = split_blocks(stt, stx, cov_x, flavor, "estimated", strict)
    return AdjustedEstimate(tau, blocks, fit.kind, fit)


def projection_estimate(
    design: ValidatedDesign,
    assignment: Assignment,
    y: np.ndarray,
    cov_v: CovariateMoments,
    flavor: str,
    strict: bool = True,
) -> AdjustedEstimate:
    """Subtract the estimated regression of the effect estimate on the v contrasts."""
    check_flavor(flavor)
    z = assignment.z(design)
    yhat = arm_estimate_z(y, z, design, flavor).values[:, 0]
    tau = G @ yhat
    tau_v = covariate_contrasts(arm_estimate_z(cov_v.x, z, design, flavor))[cov_v.active]
    stt = estimated_tt(design, assignment, y, flavor, arm_means=yhat)
    stv = estimated_xt(design, assignment, y, cov_v, flavor).T
    blocks = split_blocks(stt, stv, cov_v, flavor, "estimated", strict)
    tau_p = tau - stv @ cov_v.sigma_xx_inv(flavor) @ tau_v
    # the projection law is normal with the residual variance
    proj = SigmaBlocks(blocks.perp_raw, np.zeros((3, 0)), np.zeros((0, 0)), np.zeros((0, 0)), np.zeros((3, 3)), blocks.perp, blocks.perp_raw, flavor, "estimated", blocks.projected)
    return AdjustedEstimate(tau_p, proj, "P")


def analysis_moments(design: ValidatedDesign, v: np.ndarray) -> CovariateMoments:
    """Covariate blocks for analysis covariates (singularity reported as SingularSigmaVV)."""
    cov = CovariateMoments.from_x(design, v, error=SingularSigmaVV)
    for flavor in ("ht", "haj"):
        cov.sigma_xx_inv(flavor)
    return cov


def heterogeneity_diagnostics(design: ValidatedDesign, v: np.ndarray) -> dict:
    """Max-abs norms of the within-plot covariate variability measures."""
    cov = CovariateMoments.from_x(design, v)
    dev = cov.x - cov.xbar_w[design.plot_of_unit]
    dev[:, ~cov.active[cov.L:2 * cov.L]] = 0.0
    q_in = dev.T @ dev / (design.N - 1)
    return {"Psi_vv_norm": float(np.abs(cov.Psi_xx).max()), "Q_in_vv_norm": float(np.abs(q_in).max()), "Q_in_vv": q_in}


def gamma_wls_limit(design: ValidatedDesign, v: np.ndarray, potential: np.ndarray) -> np.ndarray:
    """Population slopes Q_vv^-1 Q_vY(z), one row per arm."""
    vc, _ = _center_v(design, v)
    qvv = vc.T @ vc / (design.N - 1)
    qvy = vc.T @ np.asarray(potential, float) / (design.N - 1)
    return np.linalg.solve(qvv, qvy).T


def gamma_ag_limit(design: ValidatedDesign, v: np.ndarray, potential: np.ndarray) -> np.ndarray:
    """Population limits of the aggregate-regression slopes, one row per arm."""
    pm = population_moments(design, potential, v)
    J = pm.cov.L
    out = np.zeros((4, J))
    for z in range(4):
        a = z // 2
        blk = slice(z * J, (z + 1) * J)
        tvv = pm.cov.S_xx["ht"] + design.p[a] * pm.cov.Psi_xx[blk, blk]
        tvy = pm.S_xY["ht"][:, z] + design.p[a] * pm.Psi_xY[blk, z]
        out[z] = np.linalg.solve(tvv, tvy)
    return out
