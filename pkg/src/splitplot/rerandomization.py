"""Mahalanobis balance criteria and the accept/reject loop."""

from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from .design import Assignment, AssignmentBatch, ValidatedDesign, draw_b_groups, randomize_batch
from .errors import RejectionBudgetExceeded
from .estimators import G, arm_estimate, check_flavor, covariate_contrasts
from .moments import CovariateMoments
from .numkernels import as_generator, chi2_cdf, chi2_quantile

DEFAULT_MAX_DRAWS = 10**6
_BATCH_CELLS = 2_000_000


@dataclass
class BalanceCriterion:
    flavor: str
    threshold_d: float
    inv_cov: np.ndarray  # inverse covariance of the retained covariate contrasts
    cov: CovariateMoments
    alpha: float

    @property
    def L(self) -> int:
        return self.cov.L

    @property
    def k(self) -> int:
        return self.cov.k


@dataclass
class RerandomizationResult:
    assignment: Assignment
    draws_used: int
    distance: float


def build_criterion(
    design: ValidatedDesign,
    x: Union[np.ndarray, CovariateMoments],
    flavor: str,
    alpha: float = 0.01,
    threshold: Optional[float] = None,
) -> BalanceCriterion:
    """Accept when the contrast Mahalanobis distance is at most the alpha quantile of chi2_k.

    k = 3L unless some contrasts vanish identically (covariates constant within
    whole plots), in which case those components are left out.

    `threshold` overrides the quantile (use inf to accept everything).
    """
    check_flavor(flavor)
    cov = x if isinstance(x, CovariateMoments) else CovariateMoments.from_x(design, x)
    if threshold is None:
        if not 0.0 < alpha < 1.0:
            raise ValueError("acceptance rate must lie in (0, 1)")
        threshold = chi2_quantile(cov.k, alpha)
    elif not threshold > 0:
        raise ValueError("threshold must be positive")
    inv_cov = design.W * cov.sigma_xx_inv(flavor)
    return BalanceCriterion(flavor, float(threshold), inv_cov, cov, alpha)


def mahalanobis(criterion: BalanceCriterion, assignment: Assignment, design: ValidatedDesign) -> float:
    t = covariate_contrasts(arm_estimate(criterion.cov.x, assignment, design, criterion.flavor))[criterion.cov.active]
    return float(t @ criterion.inv_cov @ t)


class _BatchScorer:
    """Vectorised covariate contrasts for batches of assignments."""

    def __init__(self, design: ValidatedDesign, criterion: BalanceCriterion):
        self.design = design
        self.criterion = criterion
        x = criterion.cov.x
        self.x_groups = [x[units] for _, _, units in design.size_groups]  # W_m x m x L
        self.x_tot = np.add.reduceat(x, design.offsets[:-1], axis=0) if x.shape[1] else np.zeros((design.W, 0))
        # plot-constant covariates make the subplot stage irrelevant to the distance
        spread = [np.ptp(g, axis=1).max() if g.size else 0.0 for g in self.x_groups]
        self.plot_constant = max(spread, default=0.0) <= 1e-12 * (1.0 + np.abs(x).max(initial=0.0))
        self.scale = 1.0 / (design.N * design.p)  # per A level

    def subplot_sums(self, batch: AssignmentBatch) -> np.ndarray:
        d = self.design
        if self.plot_constant:
            return np.broadcast_to(d.q[None, :, 1, None] * self.x_tot[None], (batch.n,) + self.x_tot.shape)
        s1 = np.empty((batch.n,) + self.x_tot.shape)
        for (_, plots, _), xg, bg in zip(d.size_groups, self.x_groups, batch.B_groups):
            s1[:, plots] = np.einsum("nwm,wml->nwl", bg.astype(float), xg)
        return s1

    def contrasts(self, batch: AssignmentBatch) -> np.ndarray:
        d = self.design
        A = batch.A
        s1 = self.subplot_sums(batch)
        s0 = self.x_tot[None] - s1
        t0 = s0 / d.q[None, :, 0, None]
        t1 = s1 / d.q[None, :, 1, None]
        af = A.astype(float)
        vals = np.stack(
            [
                self.scale[0] * np.einsum("nw,nwl->nl", 1 - af, t0),
                self.scale[0] * np.einsum("nw,nwl->nl", 1 - af, t1),
                self.scale[1] * np.einsum("nw,nwl->nl", af, t0),
                self.scale[1] * np.einsum("nw,nwl->nl", af, t1),
            ],
            axis=1,
        )  # n x 4 x L
        if self.criterion.flavor == "haj":
            m1 = af @ d.m
            m0 = d.N - m1
            ones = np.column_stack([self.scale[0] * m0, self.scale[0] * m0, self.scale[1] * m1, self.scale[1] * m1])
            vals = vals / ones[:, :, None]
        full = np.einsum("jz,nzl->njl", G, vals).reshape(A.shape[0], -1)
        return full[:, self.criterion.cov.active]

    def distances(self, batch: AssignmentBatch) -> np.ndarray:
        t = self.contrasts(batch)
        return np.einsum("ni,ij,nj->n", t, self.criterion.inv_cov, t)

    def draw(self, rng, n: int) -> AssignmentBatch:
        return randomize_batch(self.design, rng, n, with_b=not self.plot_constant)

    def materialize(self, batch: AssignmentBatch, i: int, rng) -> Assignment:
        if batch.B_groups is None:
            # subplot stage drawn only for the kept proposal; independent of the distance
            b = AssignmentBatch(batch.A[i : i + 1], draw_b_groups(self.design, rng, 1))
            return b.assignment(self.design, 0)
        return batch.assignment(self.design, i)


def propose_batch(design: ValidatedDesign, criterion: BalanceCriterion, rng, n: int) -> Tuple[AssignmentBatch, np.ndarray]:
    """Draw n full assignments and score them."""
    batch = randomize_batch(design, rng, n)
    return batch, _BatchScorer(design, criterion).distances(batch)


def rerandomize(
    design: ValidatedDesign,
    criterion: BalanceCriterion,
    rng,
    max_draws: int = DEFAULT_MAX_DRAWS,
) -> RerandomizationResult:
    """Draw assignments until the Mahalanobis distance is within the threshold."""
    if max_draws < 1:
        raise ValueError("max_draws must be at least 1")
    scorer = _BatchScorer(design, criterion)
    gen = as_generator(rng)
    rate = chi2_cdf(criterion.k, criterion.threshold_d) if np.isfinite(criterion.threshold_d) else 1.0
    width = design.W if scorer.plot_constant else design.N
    cap = max(1, _BATCH_CELLS // width)
    batch_size = int(min(cap, max(8, 0.7 / max(rate, 1e-9))))
    used = 0
    best = None
    while used < max_draws:
        n = min(batch_size, max_draws - used)
        batch = scorer.draw(gen, n)
        dist = scorer.distances(batch)
        hits = np.flatnonzero(dist <= criterion.threshold_d)
        if hits.size:
            i = int(hits[0])
            return RerandomizationResult(scorer.materialize(batch, i, gen), used + i + 1, float(dist[i]))
        i = int(np.argmin(dist))
        if best is None or dist[i] < best[1]:
            best = (scorer.materialize(batch, i, gen), float(dist[i]))
        used += n
    raise RejectionBudgetExceeded(
        "no assignment met the balance threshold within the draw budget",
        {"max_draws": max_draws, "threshold": criterion.threshold_d, "best_distance": best[1]},
        best=best,
    )
