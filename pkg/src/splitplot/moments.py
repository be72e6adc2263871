"""Population and estimated covariance blocks for effect and covariate contrasts.

Layout conventions used throughout:

* arm order 00, 01, 10, 11;
* a 4L stacked covariate vector is arm-major (all L entries of arm 00 first);
* 3L covariate contrasts are effect-major (A block, B block, AB block),
  i.e. the image of a 4L vector under G (x) I_L.
"""

from dataclasses import dataclass
from typing import Dict, Optional, Type

import numpy as np

from .design import Assignment, ValidatedDesign
from .errors import DegenerateWholePlot, InsufficientArms, SingularMatrix, SingularSigmaXX
from .estimators import G, arm_estimate_z, check_flavor, kron_g
from .numkernels import psd_clamp, psd_project, sym_inverse, symmetrize


def h_matrix(design: ValidatedDesign) -> np.ndarray:
    """Between-plot design factor: diag(1/p0, 1/p1) (x) 1_{2x2} - 1_{4x4}."""
    return np.kron(np.diag(1.0 / design.p), np.ones((2, 2))) - np.ones((4, 4))


def h_within(design: ValidatedDesign) -> np.ndarray:
    """Per-plot within factors, shape (W, 4, 4)."""
    inner = np.zeros((design.W, 2, 2))
    inner[:, 0, 0] = 1.0 / design.q[:, 0]
    inner[:, 1, 1] = 1.0 / design.q[:, 1]
    inner -= 1.0
    outer = np.diag(1.0 / design.p)
    return np.einsum("ac,wbd->wabcd", outer, inner).reshape(design.W, 4, 4)


def plot_sums(design: ValidatedDesign, values: np.ndarray) -> np.ndarray:
    return np.add.reduceat(values, design.offsets[:-1], axis=0)


def plot_means(design: ValidatedDesign, values: np.ndarray) -> np.ndarray:
    sums = plot_sums(design, values)
    return sums / design.m.reshape((-1,) + (1,) * (sums.ndim - 1))


def _check_plots(design: ValidatedDesign) -> None:
    bad = np.flatnonzero(design.m < 2)
    if bad.size:
        raise DegenerateWholePlot("whole plots with a single subplot have no within-plot covariance", {"plots": bad.tolist()})


def _between(design: ValidatedDesign, left_w, left_bar, right_w, right_bar, flavor: str) -> np.ndarray:
    """(W-1)^-1 sum over plots of the flavor-specific scaled deviations."""
    a = design.alpha[:, None]
    if flavor == "ht":
        dl = a * left_w - left_bar
        dr = a * right_w - right_bar
    else:
        dl = a * (left_w - left_bar)
        dr = a * (right_w - right_bar)
    return dl.T @ dr / (design.W - 1)


def _within(design: ValidatedDesign, left_dev: np.ndarray, right: np.ndarray) -> np.ndarray:
    """Per-plot (M_w-1)^-1 alpha_w^2 sum_s left_dev right^T, shape (W, l, r)."""
    outer = plot_sums(design, left_dev[:, :, None] * right[:, None, :])
    scale = design.alpha**2 / (design.m - 1)
    return outer * scale[:, None, None]


def _psi_weights(design: ValidatedDesign) -> np.ndarray:
    return 1.0 / (design.W * design.m)


def psi_scalar(design: ValidatedDesign, hw: np.ndarray, s_w: np.ndarray) -> np.ndarray:
    return np.einsum("w,wab,wab->ab", _psi_weights(design), hw, s_w)


def psi_kron(design: ValidatedDesign, hw: np.ndarray, s_w: np.ndarray) -> np.ndarray:
    """W^-1 sum M_w^-1 (H_w (x) S_w) for per-plot L x L blocks."""
    L = s_w.shape[1]
    return np.einsum("w,wab,wij->aibj", _psi_weights(design), hw, s_w).reshape(4 * L, 4 * L)


def psi_cross(design: ValidatedDesign, hw: np.ndarray, s_w: np.ndarray) -> np.ndarray:
    """W^-1 sum M_w^-1 (H_w (x) 1_L) o (1_4 (x) S_w) for per-plot L x 4 blocks; 4L x 4."""
    L = s_w.shape[1]
    return np.einsum("w,wab,wib->aib", _psi_weights(design), hw, s_w).reshape(4 * L, 4)


def cross_core(H: np.ndarray, s_xy: np.ndarray) -> np.ndarray:
    """(H (x) 1_L) o (1_4 (x) S_xY) for an L x 4 matrix S_xY; 4L x 4."""
    L = s_xy.shape[0]
    return np.einsum("ab,ib->aib", H, s_xy).reshape(4 * L, 4)


@dataclass
class CovariateMoments:
    """Covariate-only blocks; everything is a known function of the design and x."""

    design: ValidatedDesign
    x: np.ndarray  # centered, N x L
    center: np.ndarray
    xbar_w: np.ndarray  # W x L plot means of centered x
    S_xx: Dict[str, np.ndarray]
    S_w_xx: np.ndarray
    Psi_xx: np.ndarray
    active: np.ndarray  # mask over the 3L contrast components that are not identically zero
    error: Type[SingularMatrix] = SingularSigmaXX

    @classmethod
    def from_x(cls, design: ValidatedDesign, x: np.ndarray, center: bool = True, error: Type[SingularMatrix] = SingularSigmaXX) -> "CovariateMoments":
        _check_plots(design)
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        mu = x.mean(axis=0) if center else np.zeros(x.shape[1])
        xc = x - mu
        xbar_w = plot_means(design, xc)
        xbar = xc.mean(axis=0)
        S = {f: _between(design, xbar_w, xbar, xbar_w, xbar, f) for f in ("ht", "haj")}
        dev = xc - xbar_w[design.plot_of_unit]
        # a covariate constant within every whole plot has B and AB contrasts
        # equal to zero under every assignment (both flavors); drop them
        L = xc.shape[1]
        scale = np.maximum(1.0, np.abs(xc).max(axis=0)) if xc.size else np.ones(L)
        plot_const = np.abs(dev).max(axis=0) <= 1e-12 * scale if xc.size else np.zeros(L, bool)
        dev[:, plot_const] = 0.0  # rounding residue of the plot means
        S_w = _within(design, dev, dev)
        psi = psi_kron(design, h_within(design), S_w)
        active = np.ones(3 * L, dtype=bool)
        active[L:2 * L] = ~plot_const
        active[2 * L:] = ~plot_const
        return cls(design, xc, mu, xbar_w, S, S_w, psi, active, error)

    @property
    def L(self) -> int:
        return self.x.shape[1]

    @property
    def k(self) -> int:
        """Number of retained contrast components (3L unless some vanish identically)."""
        return int(self.active.sum())

    def full_sigma_xx(self, flavor: str) -> np.ndarray:
        check_flavor(flavor)
        K = kron_g(self.L)
        V = np.kron(h_matrix(self.design), self.S_xx[flavor]) + self.Psi_xx
        return symmetrize(K @ V @ K.T)

    def sigma_xx(self, flavor: str) -> np.ndarray:
        """Covariance of the retained contrast components."""
        return self.full_sigma_xx(flavor)[np.ix_(self.active, self.active)]

    def sigma_xx_inv(self, flavor: str) -> np.ndarray:
        cache = self.__dict__.setdefault("_inv_cache", {})
        if flavor not in cache:
            cache[flavor] = sym_inverse(self.sigma_xx(flavor), self.error, "covariate contrast covariance")
        return cache[flavor]


@dataclass
class PopulationMoments:
    H: np.ndarray
    H_w: np.ndarray
    S: Dict[str, np.ndarray]  # S_ht, S_haj (4 x 4)
    S_w: np.ndarray  # W x 4 x 4
    Psi: np.ndarray
    cov: Optional[CovariateMoments]
    S_xY: Dict[str, np.ndarray]  # L x 4 per flavor
    S_w_xY: Optional[np.ndarray]  # W x L x 4
    Psi_xY: Optional[np.ndarray]  # 4L x 4
    tau: np.ndarray
    Ybar: np.ndarray


def population_moments(design: ValidatedDesign, potential: np.ndarray, x: Optional[np.ndarray] = None, center: bool = True) -> PopulationMoments:
    _check_plots(design)
    Y = np.asarray(potential, dtype=float)
    H = h_matrix(design)
    hw = h_within(design)
    yw = plot_means(design, Y)
    ybar = Y.mean(axis=0)
    S = {f: _between(design, yw, ybar, yw, ybar, f) for f in ("ht", "haj")}
    ydev = Y - yw[design.plot_of_unit]
    S_w = _within(design, ydev, ydev)
    psi = psi_scalar(design, hw, S_w)
    cov = None
    S_xY: Dict[str, np.ndarray] = {}
    S_w_xY = None
    psi_xY = None
    if x is not None:
        cov = x if isinstance(x, CovariateMoments) else CovariateMoments.from_x(design, x, center)
        xbar = cov.x.mean(axis=0)
        S_xY = {f: _between(design, cov.xbar_w, xbar, yw, ybar, f) for f in ("ht", "haj")}
        xdev = cov.x - cov.xbar_w[design.plot_of_unit]
        S_w_xY = _within(design, xdev, Y)
        psi_xY = psi_cross(design, hw, S_w_xY)
    return PopulationMoments(H, hw, S, S_w, psi, cov, S_xY, S_w_xY, psi_xY, G @ ybar, ybar)


@dataclass
class SigmaBlocks:
    sigma_tt: np.ndarray
    sigma_tx: np.ndarray
    sigma_xx: np.ndarray
    sigma_xx_inv: np.ndarray
    parallel: np.ndarray
    perp: np.ndarray
    perp_raw: np.ndarray
    flavor: str
    provenance: str
    projected: bool = False  # perp was pulled onto the PSD cone beyond the tolerance band

    @property
    def sigma_xt(self) -> np.ndarray:
        return self.sigma_tx.T


def split_blocks(
    sigma_tt, sigma_tx, cov: Optional[CovariateMoments], flavor: str, provenance: str, strict: bool = True
) -> SigmaBlocks:
    """Assemble the parallel / perpendicular split of an effect covariance.

    strict: an indefinite residual block raises NotPSD; otherwise it is projected
    onto the PSD cone and `projected` is set.
    """
    sigma_tt = symmetrize(sigma_tt)
    if cov is None:
        sigma_tx = np.zeros((3, 0))
        sxx = inv = np.zeros((0, 0))
        par = np.zeros((3, 3))
    else:
        sxx = cov.sigma_xx(flavor)
        inv = cov.sigma_xx_inv(flavor)
        par = symmetrize(sigma_tx @ inv @ sigma_tx.T)
    raw = sigma_tt - par
    perp, projected = psd_project(raw)
    if projected and strict:
        psd_clamp(raw)  # raises NotPSD with diagnostics
    return SigmaBlocks(sigma_tt, sigma_tx, sxx, inv, par, perp, raw, flavor, provenance, projected)


def sigma_population(moments: PopulationMoments, flavor: str) -> SigmaBlocks:
    check_flavor(flavor)
    stt = G @ (moments.H * moments.S[flavor] + moments.Psi) @ G.T
    if moments.cov is None:
        return split_blocks(stt, None, None, flavor, "population")
    K = kron_g(moments.cov.L)
    vxy = cross_core(moments.H, moments.S_xY[flavor]) + moments.Psi_xY
    sxt = (K @ vxy @ G.T)[moments.cov.active]
    return split_blocks(stt, sxt.T, moments.cov, flavor, "population")


# ---------------------------------------------------------------- estimated blocks


def within_arm_means(design: ValidatedDesign, assignment: Assignment, y: np.ndarray) -> np.ndarray:
    """Per-plot means over the B=0 and B=1 subplots, shape (W, 2)."""
    key = 2 * design.plot_of_unit + assignment.b
    sums = np.bincount(key, weights=y, minlength=2 * design.W).reshape(design.W, 2)
    return sums / np.column_stack([design.m0, design.m1])


def estimated_tt(design: ValidatedDesign, assignment: Assignment, y: np.ndarray, flavor: str, arm_means: Optional[np.ndarray] = None) -> np.ndarray:
    """Block-diagonal (in A) estimate of the effect covariance, 3 x 3."""
    check_flavor(flavor)
    if design.W0 < 2 or design.W1 < 2:
        raise InsufficientArms("each factor-A arm needs at least two whole plots", {"W0": design.W0, "W1": design.W1})
    if arm_means is None:
        arm_means = arm_estimate_z(y, assignment.z(design), design, flavor).values[:, 0]
    yw = within_arm_means(design, assignment, y)
    V = np.zeros((4, 4))
    for a in (0, 1):
        sel = assignment.a == a
        centre = arm_means[2 * a: 2 * a + 2]
        if flavor == "ht":
            dev = design.alpha[sel, None] * yw[sel] - centre
        else:
            dev = design.alpha[sel, None] * (yw[sel] - centre)
        s_hat = dev.T @ dev / (sel.sum() - 1)
        V[2 * a: 2 * a + 2, 2 * a: 2 * a + 2] = s_hat / design.p[a]
    return symmetrize(G @ V @ G.T)


def estimated_xt(design: ValidatedDesign, assignment: Assignment, y: np.ndarray, cov: CovariateMoments, flavor: str) -> np.ndarray:
    """Unbiased plug-in estimate of the covariate/effect cross covariance, k x 3."""
    check_flavor(flavor)
    z = assignment.z(design)
    inv_p = 1.0 / design.inclusion_probabilities(z)
    yht_unit = y * inv_p  # HT plug-in of Y_ws(z) for the realized z
    onehot = np.zeros((design.N, 4))
    onehot[np.arange(design.N), z] = 1.0
    yht_w = plot_sums(design, onehot * yht_unit[:, None]) / design.m[:, None]  # W x 4
    yht = yht_w.T @ design.m / design.N  # equals the HT arm means
    xbar = cov.x.mean(axis=0)
    s_xy = _between(design, cov.xbar_w, xbar, yht_w, yht, flavor)
    xdev = cov.x - cov.xbar_w[design.plot_of_unit]
    s_w_xy = _within(design, xdev, onehot * yht_unit[:, None])
    H = h_matrix(design)
    vxy = cross_core(H, s_xy) + psi_cross(design, h_within(design), s_w_xy)
    return (kron_g(cov.L) @ vxy @ G.T)[cov.active]


def sigma_estimated(
    design: ValidatedDesign,
    assignment: Assignment,
    y: np.ndarray,
    cov: Optional[CovariateMoments],
    flavor: str,
    strict: bool = True,
) -> SigmaBlocks:
    stt = estimated_tt(design, assignment, y, flavor)
    if cov is None:
        return split_blocks(stt, None, None, flavor, "estimated", strict)
    sxt = estimated_xt(design, assignment, y, cov, flavor)
    return split_blocks(stt, sxt.T, cov, flavor, "estimated", strict)
