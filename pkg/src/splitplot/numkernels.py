"""Numerical substrate: symmetric linear algebra, chi-square functions, samplers."""

from dataclasses import dataclass, field
from typing import Optional, Tuple, Type, Union

import numpy as np
from scipy import optimize, special

from .errors import NotPSD, RejectionBudgetExceeded, SingularMatrix, Underflow

PSD_TOL = 1e-9
RCOND_MIN = 1e-12
TRUNC_CHUNK = 10_000
DEFAULT_PROPOSAL_CAP = 10_000_000


@dataclass
class RngStream:
    """Seeded random stream; (seed, stream_id, path) fixes the draw sequence.

    Children obtained with `child` are independent of the parent and of each
    other (they extend the SeedSequence spawn key).
    """

    seed: int
    stream_id: int = 0
    path: Tuple[int, ...] = ()
    _gen: Optional[np.random.Generator] = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if not (0 <= int(self.seed) < 2**64) or not (0 <= int(self.stream_id) < 2**64):
            raise ValueError("seed and stream_id must be 64-bit unsigned integers")

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            ss = np.random.SeedSequence(int(self.seed), spawn_key=(int(self.stream_id),) + tuple(self.path))
            self._gen = np.random.Generator(np.random.PCG64(ss))
        return self._gen

    def child(self, *keys: int) -> "RngStream":
        return RngStream(self.seed, self.stream_id, tuple(self.path) + tuple(int(k) for k in keys))


def as_generator(rng: Union[RngStream, np.random.Generator]) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator
    return rng


# ---------------------------------------------------------------- linear algebra


def symmetrize(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    return 0.5 * (m + m.T)


def _eig_floor(m: np.ndarray):
    m = symmetrize(m)
    vals, vecs = np.linalg.eigh(m)
    tr = float(np.trace(m))
    floor = -PSD_TOL * max(abs(tr), np.finfo(float).tiny)
    if vals.size and vals.min() < floor:
        raise NotPSD(
            "matrix has an eigenvalue below the PSD tolerance",
            {"min_eigenvalue": float(vals.min()), "trace": tr},
        )
    return np.clip(vals, 0.0, None), vecs


def psd_clamp(m: np.ndarray) -> np.ndarray:
    """Set eigenvalues in the tolerance band below zero to zero."""
    vals, vecs = _eig_floor(m)
    return symmetrize((vecs * vals) @ vecs.T)


def psd_project(m: np.ndarray) -> Tuple[np.ndarray, bool]:
    """Nearest PSD matrix (negative eigenvalues zeroed); flag set when beyond the tolerance band."""
    try:
        return psd_clamp(m), False
    except NotPSD:
        vals, vecs = np.linalg.eigh(symmetrize(m))
        return symmetrize((vecs * np.clip(vals, 0.0, None)) @ vecs.T), True


def psd_sqrt(m: np.ndarray) -> np.ndarray:
    """Symmetric square root of a PSD matrix."""
    vals, vecs = _eig_floor(m)
    return symmetrize((vecs * np.sqrt(vals)) @ vecs.T)


def _checked_eigh(m: np.ndarray, error: Type[SingularMatrix], what: str):
    m = symmetrize(m)
    vals, vecs = np.linalg.eigh(m)
    big = np.abs(vals).max() if vals.size else 0.0
    rcond = np.abs(vals).min() / big if big > 0 else 0.0
    if rcond < RCOND_MIN:
        raise error(f"{what} is numerically singular", {"rcond": float(rcond)})
    return vals, vecs


def sym_inverse(m: np.ndarray, error: Type[SingularMatrix] = SingularMatrix, what: str = "matrix") -> np.ndarray:
    """Inverse of a symmetric matrix; raises `error` when rcond < 1e-12."""
    vals, vecs = _checked_eigh(m, error, what)
    return symmetrize((vecs / vals) @ vecs.T)


def sym_inv_sqrt(m: np.ndarray, error: Type[SingularMatrix] = SingularMatrix, what: str = "matrix") -> np.ndarray:
    """Symmetric inverse square root of a positive definite matrix."""
    vals, vecs = _checked_eigh(m, error, what)
    if vals.min() <= 0:
        raise error(f"{what} is not positive definite", {"min_eigenvalue": float(vals.min())})
    return symmetrize((vecs / np.sqrt(vals)) @ vecs.T)


# ---------------------------------------------------------------- chi-square


def _check_dof(k) -> None:
    if int(k) != k or k < 1:
        raise ValueError(f"degrees of freedom must be a positive integer, got {k!r}")


def chi2_cdf(k: int, x: float) -> float:
    _check_dof(k)
    if x < 0 or np.isnan(x):
        raise ValueError(f"chi2_cdf needs x >= 0, got {x!r}")
    if np.isinf(x):
        return 1.0
    return float(special.gammainc(0.5 * k, 0.5 * x))


def chi2_quantile(k: int, p: float) -> float:
    """Invert chi2_cdf by bracketing and Brent's method."""
    _check_dof(k)
    if not 0.0 < p < 1.0:
        raise ValueError(f"chi2_quantile needs p in (0, 1), got {p!r}")
    hi = max(1.0, float(k))
    while chi2_cdf(k, hi) < p:
        hi *= 2.0
    lo = 0.0
    return float(optimize.brentq(lambda t: chi2_cdf(k, t) - p, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500))


def r_factor(k: int, d: float) -> float:
    """Variance shrinkage P(chi2_{k+2} <= d) / P(chi2_k <= d)."""
    if not d > 0:
        raise ValueError("threshold d must be positive")
    if np.isinf(d):
        return 1.0
    den = chi2_cdf(k, d)
    if den < 1e-300:
        raise Underflow("chi-square probability underflows", {"k": k, "d": d})
    return chi2_cdf(k + 2, d) / den


# ---------------------------------------------------------------- samplers


def sample_truncated_normal_ball(
    k: int,
    d: float,
    rng,
    size: Optional[int] = None,
    max_proposals: int = DEFAULT_PROPOSAL_CAP,
) -> np.ndarray:
    """Standard normal vectors in R^k conditioned on squared norm <= d.

    Plain rejection. Requests are served in chunks of at most 10^4 draws and
    each chunk may use at most `max_proposals` proposals.
    """
    if not d > 0:
        raise ValueError("threshold d must be positive")
    gen = as_generator(rng)
    n = 1 if size is None else int(size)
    out = np.empty((n, k))
    if np.isinf(d):
        out[:] = gen.standard_normal((n, k))
        return out[0] if size is None else out
    acc = max(chi2_cdf(k, d), 1e-12)
    filled = 0
    while filled < n:
        need = min(TRUNC_CHUNK, n - filled)
        got = 0
        used = 0
        while got < need:
            if used >= max_proposals:
                raise RejectionBudgetExceeded(
                    "truncated normal sampler exceeded its proposal budget",
                    {"k": k, "d": d, "proposals": used},
                )
            block = int(min(max_proposals - used, max(1024, 1.25 * (need - got) / acc + 64), 2**20))
            z = gen.standard_normal((block, k))
            keep = z[np.einsum("ij,ij->i", z, z) <= d]
            used += block
            take = min(len(keep), need - got)
            out[filled + got: filled + got + take] = keep[:take]
            got += take
        filled += need
    return out[0] if size is None else out


def sample_poisson(lam: float, rng, size=None):
    if lam < 0:
        raise ValueError("Poisson mean must be nonnegative")
    return as_generator(rng).poisson(lam, size)


def sample_uniform(lo: float, hi: float, rng, size=None):
    if not hi > lo:
        raise ValueError("uniform bounds need lo < hi")
    return as_generator(rng).uniform(lo, hi, size)


def sample_normal(mean, var, rng, size=None):
    """Normal draws with the given mean and variance (componentwise if arrays)."""
    var = np.asarray(var, dtype=float)
    if np.any(var < 0):
        raise ValueError("variance must be nonnegative")
    mean = np.asarray(mean, dtype=float)
    shape = size if size is not None else np.broadcast(mean, var).shape
    z = as_generator(rng).standard_normal(shape)
    out = mean + np.sqrt(var) * z
    return float(out) if np.ndim(out) == 0 else out
