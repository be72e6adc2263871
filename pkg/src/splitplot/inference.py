"""Limit-law sampling, Monte-Carlo quantiles, confidence regions and intervals."""

import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from scipy import special

from .errors import SingularPerp
from .moments import SigmaBlocks
from .numkernels import (
    RngStream,
    chi2_quantile,
    psd_sqrt,
    r_factor,
    sample_truncated_normal_ball,
    sym_inv_sqrt,
    sym_inverse,
)

DEFAULT_MC_SIZE = 100_000
RANDOMIZED = "randomized"
RERANDOMIZED = "rerandomized"


@dataclass
class NoisePool:
    """Standard normal and ball-truncated normal draws, reusable across samplers."""

    eps: np.ndarray  # n x 3
    zeta: np.ndarray  # n x k

    @classmethod
    def draw(cls, k: int, d: float, n: int, rng: RngStream) -> "NoisePool":
        eps = rng.child(0).generator.standard_normal((n, 3))
        zeta = sample_truncated_normal_ball(k, d, rng.child(1), size=n) if k else np.zeros((n, 0))
        return cls(eps, zeta)


@dataclass
class LimitLawSampler:
    """phi = perp_sqrt eps + coupling zeta, zeta standard normal truncated to |zeta|^2 <= d."""

    perp: np.ndarray
    perp_sqrt: np.ndarray
    coupling: np.ndarray
    d: float
    mc_size: int = DEFAULT_MC_SIZE
    rng: Optional[RngStream] = None
    pool: Optional[NoisePool] = None
    _cache: Optional[np.ndarray] = field(default=None, init=False, repr=False)

    @classmethod
    def from_blocks(
        cls,
        blocks: SigmaBlocks,
        d: float,
        mc_size: int = DEFAULT_MC_SIZE,
        rng: Optional[RngStream] = None,
        pool: Optional[NoisePool] = None,
    ) -> "LimitLawSampler":
        if blocks.sigma_tx.shape[1]:
            coupling = blocks.sigma_tx @ sym_inv_sqrt(blocks.sigma_xx, what="covariate contrast covariance")
        else:
            coupling = np.zeros((3, 0))
        return cls(blocks.perp, psd_sqrt(blocks.perp), coupling, float(d), int(mc_size), rng, pool)

    def draws(self) -> np.ndarray:
        if self._cache is None:
            self._cache = sample_phi(self, self.mc_size)
        return self._cache


def sample_phi(sampler: LimitLawSampler, n: int) -> np.ndarray:
    """n draws of the limit law; noise comes from the pool when one is attached."""
    k = sampler.coupling.shape[1]
    pool = sampler.pool
    if pool is not None and pool.eps.shape[0] >= n and pool.zeta.shape[1] == k:
        eps, zeta = pool.eps[:n], pool.zeta[:n]
    else:
        if sampler.rng is None:
            raise ValueError("sampler needs an rng or a large enough noise pool")
        eps = sampler.rng.child(0).generator.standard_normal((n, 3))
        zeta = sample_truncated_normal_ball(k, sampler.d, sampler.rng.child(1), size=n) if k else np.zeros((n, 0))
    return eps @ sampler.perp_sqrt.T + zeta @ sampler.coupling.T


def limit_covariance(sampler: LimitLawSampler) -> np.ndarray:
    """Exact covariance of phi: perp + r_k(d) coupling coupling'."""
    k = sampler.coupling.shape[1]
    r = r_factor(k, sampler.d) if k else 0.0
    return sampler.perp + r * sampler.coupling @ sampler.coupling.T


def c_quantile(sampler: LimitLawSampler, xi: float) -> float:
    """1 - xi quantile of phi' perp^-1 phi over the sampler's draws."""
    inv = sym_inverse(sampler.perp, SingularPerp, "residual covariance")
    phi = sampler.draws()
    q = np.einsum("ni,ij,nj->n", phi, inv, phi)
    return float(np.quantile(q, 1.0 - xi))


@dataclass
class ConfidenceRegion:
    center: np.ndarray
    shape: np.ndarray
    radius: float
    kind: str  # "wald_chi2" or "monte_carlo_quantile"
    scale: int

    def statistic(self, tau0: np.ndarray) -> float:
        """W (tau_hat - tau0)' shape^+ (tau_hat - tau0); inf off the range of a singular shape."""
        diff = self.center - np.asarray(tau0, float)
        vals, vecs = np.linalg.eigh(self.shape)
        coef = vecs.T @ diff
        keep = vals > 1e-12 * max(vals.max(), 0.0)
        off = np.abs(coef[~keep]).max(initial=0.0)
        if off > 1e-12 * max(1.0, np.abs(diff).max()):
            return math.inf
        return float(self.scale * np.sum(coef[keep] ** 2 / vals[keep]))

    def contains(self, tau0: np.ndarray) -> bool:
        return self.statistic(tau0) <= self.radius

    def volume(self) -> float:
        det = max(float(np.linalg.det(self.shape)), 0.0)
        return 4.0 / 3.0 * math.pi * math.sqrt(det) * (self.radius / self.scale) ** 1.5


def joint_region(
    tau_hat: np.ndarray,
    blocks: SigmaBlocks,
    scheme: str,
    xi: float,
    W: int,
    sampler: Optional[LimitLawSampler] = None,
) -> ConfidenceRegion:
    """Classic: Wald ellipsoid with chi2_3. Rerandomized: residual-covariance
    ellipsoid with the Monte-Carlo quantile when a sampler is given, chi2_3 otherwise."""
    if scheme == RANDOMIZED:
        return ConfidenceRegion(np.asarray(tau_hat, float), blocks.sigma_tt, chi2_quantile(3, 1.0 - xi), "wald_chi2", W)
    if scheme != RERANDOMIZED:
        raise ValueError(f"unknown scheme {scheme!r}")
    if sampler is None:
        # normal limit with the residual covariance (projection estimators)
        return ConfidenceRegion(np.asarray(tau_hat, float), blocks.perp, chi2_quantile(3, 1.0 - xi), "wald_chi2", W)
    return ConfidenceRegion(np.asarray(tau_hat, float), blocks.perp, c_quantile(sampler, xi), "monte_carlo_quantile", W)


@dataclass
class EffectIntervals:
    lower: np.ndarray
    upper: np.ndarray
    half_width: np.ndarray
    se: np.ndarray

    def covers(self, tau: np.ndarray) -> np.ndarray:
        return (self.lower <= tau) & (tau <= self.upper)

    @property
    def length(self) -> np.ndarray:
        return 2.0 * self.half_width


def normal_intervals(tau_hat: np.ndarray, cov: np.ndarray, W: int, xi: float) -> EffectIntervals:
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None) / W)
    half = special.ndtri(1.0 - xi / 2.0) * se
    return EffectIntervals(tau_hat - half, tau_hat + half, half, se)


def mc_intervals(tau_hat: np.ndarray, sampler: LimitLawSampler, W: int, xi: float) -> EffectIntervals:
    """Symmetric intervals from the 1 - xi quantile of |phi_j| (equal-tailed by symmetry)."""
    phi = sampler.draws()
    q = np.quantile(np.ascontiguousarray(np.abs(phi).T), 1.0 - xi, axis=1)
    half = q / math.sqrt(W)
    se = np.sqrt(np.diag(limit_covariance(sampler)) / W)
    return EffectIntervals(tau_hat - half, tau_hat + half, half, se)


def per_effect_intervals(
    tau_hat: np.ndarray,
    source: Union[SigmaBlocks, LimitLawSampler],
    scheme: str,
    xi: float,
    W: int,
) -> EffectIntervals:
    """Classic scheme: normal with the full covariance. Rerandomized: the
    convolution law when a sampler is given, otherwise normal with the
    residual covariance."""
    tau_hat = np.asarray(tau_hat, float)
    if isinstance(source, LimitLawSampler):
        if scheme != RERANDOMIZED:
            raise ValueError("a limit-law sampler only applies to rerandomized schemes")
        return mc_intervals(tau_hat, source, W, xi)
    if scheme == RANDOMIZED:
        return normal_intervals(tau_hat, source.sigma_tt, W, xi)
    if scheme == RERANDOMIZED:
        return normal_intervals(tau_hat, source.perp, W, xi)
    raise ValueError(f"unknown scheme {scheme!r}")


def quantile_mcse(values: np.ndarray, prob: float, batches: int = 20) -> float:
    """Batch-means Monte-Carlo standard error of an empirical quantile."""
    parts = np.array_split(np.asarray(values), batches)
    qs = np.array([np.quantile(p, prob) for p in parts])
    return float(qs.std(ddof=1) / math.sqrt(batches))
