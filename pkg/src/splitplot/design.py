"""2x2 split-plot designs, the two-stage randomization, and full enumeration."""

import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import CountMismatch, InvalidDesign, SpaceTooLarge
from .numkernels import as_generator

ARMS = ("00", "01", "10", "11")
DEFAULT_ENUMERATION_CAP = 10**6


@dataclass(frozen=True)
class PlotSize:
    M: int
    M1: int

    @property
    def M0(self) -> int:
        return self.M - self.M1


@dataclass
class DesignSpec:
    """Raw design: W whole plots, W1 of them get A=1, per-plot subplot splits."""

    W: int
    W1: int
    plot_sizes: List[PlotSize]

    @classmethod
    def from_arrays(cls, W1: int, M: Sequence[int], M1: Sequence[int]) -> "DesignSpec":
        if len(M) != len(M1):
            raise InvalidDesign("plot size arrays differ in length", {"len_M": len(M), "len_M1": len(M1)})
        return cls(len(M), int(W1), [PlotSize(int(m), int(m1)) for m, m1 in zip(M, M1)])

    def to_dict(self) -> dict:
        return {"W1": self.W1, "M": [p.M for p in self.plot_sizes], "M1": [p.M1 for p in self.plot_sizes]}


@dataclass
class ValidatedDesign:
    """Design with every derived quantity precomputed.

    Units are indexed plot-major: unit offsets[w] + s is subplot s of plot w.
    """

    W: int
    W1: int
    m: np.ndarray
    m1: np.ndarray
    warnings: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.m = np.asarray(self.m, dtype=np.int64)
        self.m1 = np.asarray(self.m1, dtype=np.int64)
        self.m0 = self.m - self.m1
        self.W0 = self.W - self.W1
        self.N = int(self.m.sum())
        self.p = np.array([self.W0 / self.W, self.W1 / self.W])
        self.q = np.column_stack([self.m0 / self.m, self.m1 / self.m])
        self.mbar = self.N / self.W
        self.alpha = self.m / self.mbar
        self.offsets = np.concatenate([[0], np.cumsum(self.m)])
        self.plot_of_unit = np.repeat(np.arange(self.W), self.m)
        self.mmax = int(self.m.max())
        pad = np.arange(self.mmax)[None, :] < self.m[:, None]
        self.pad_valid = pad
        self.arm_sizes = np.array([self.W0, self.W1])
        self.size_groups = []
        for size in np.unique(self.m):
            plots = np.flatnonzero(self.m == size)
            units = self.offsets[plots][:, None] + np.arange(size)[None, :]
            self.size_groups.append((int(size), plots, units))

    @property
    def spec(self) -> DesignSpec:
        return DesignSpec.from_arrays(self.W1, self.m.tolist(), self.m1.tolist())

    def unit_slice(self, w: int) -> slice:
        return slice(int(self.offsets[w]), int(self.offsets[w + 1]))

    def to_padded(self, values: np.ndarray, fill=0.0) -> np.ndarray:
        """Map unit-indexed rows onto a (W, max M_w, ...) array."""
        values = np.asarray(values)
        out = np.full((self.W, self.mmax) + values.shape[1:], fill, dtype=values.dtype)
        out[self.pad_valid] = values
        return out

    def inclusion_probabilities(self, z: np.ndarray) -> np.ndarray:
        """p_ws(z_ws) = p_a q_wb for each unit given arm codes z (0..3)."""
        a = z // 2
        b = z % 2
        return self.p[a] * self.q[self.plot_of_unit, b]

    def space_size(self) -> int:
        total = math.comb(self.W, self.W1)
        for mw, m1 in zip(self.m.tolist(), self.m1.tolist()):
            total *= math.comb(mw, m1)
        return total


def validate_design(spec: DesignSpec) -> ValidatedDesign:
    W = int(spec.W)
    if W != len(spec.plot_sizes):
        raise InvalidDesign("W does not match the number of plot records", {"W": W, "records": len(spec.plot_sizes)})
    if not 1 <= spec.W1 <= W - 1:
        raise InvalidDesign("both factor-A arms need at least one whole plot", {"W": W, "W1": spec.W1})
    m = np.array([p.M for p in spec.plot_sizes], dtype=np.int64)
    m1 = np.array([p.M1 for p in spec.plot_sizes], dtype=np.int64)
    bad = np.flatnonzero(m < 2)
    if bad.size:
        raise InvalidDesign("every whole plot needs at least two subplots", {"plots": bad.tolist()})
    bad = np.flatnonzero((m1 < 1) | (m - m1 < 1))
    if bad.size:
        raise InvalidDesign("every whole plot needs both factor-B arms non-empty", {"plots": bad.tolist()})
    notes = []
    single = np.flatnonzero((m1 == 1) | (m - m1 == 1))
    if single.size:
        notes.append(f"{single.size} whole plot(s) have a factor-B arm of size 1")
        warnings.warn(notes[-1], stacklevel=2)
    return ValidatedDesign(W, int(spec.W1), m, m1, notes)


@dataclass
class Assignment:
    """Factor-A level per whole plot and factor-B level per unit (flat, plot-major)."""

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.int8)
        self.b = np.asarray(self.b, dtype=np.int8)

    @classmethod
    def from_levels(cls, a_levels: Sequence[int], b_levels: Sequence[Sequence[int]]) -> "Assignment":
        return cls(np.asarray(a_levels), np.concatenate([np.asarray(x) for x in b_levels]))

    def b_levels(self, design: ValidatedDesign) -> List[np.ndarray]:
        return [self.b[design.unit_slice(w)] for w in range(design.W)]

    def z(self, design: ValidatedDesign) -> np.ndarray:
        """Arm code 0..3 (00, 01, 10, 11) for every unit."""
        return 2 * self.a[design.plot_of_unit].astype(np.int64) + self.b

    def check(self, design: ValidatedDesign) -> None:
        if self.a.shape != (design.W,) or self.b.shape != (design.N,):
            raise CountMismatch("assignment shape does not match the design")
        if int(self.a.sum()) != design.W1:
            raise CountMismatch("factor-A arm count mismatch", {"expected": design.W1, "got": int(self.a.sum())})
        per_plot = np.bincount(design.plot_of_unit, weights=self.b, minlength=design.W)
        bad = np.flatnonzero(per_plot != design.m1)
        if bad.size:
            raise CountMismatch("factor-B arm count mismatch", {"plots": bad[:10].tolist()})


@dataclass
class AssignmentBatch:
    """n assignments: A levels (n, W) and, per plot-size group, B levels (n, W_m, m)."""

    A: np.ndarray
    B_groups: Optional[List[np.ndarray]]

    @property
    def n(self) -> int:
        return self.A.shape[0]

    def b_flat(self, design: ValidatedDesign, i: int) -> np.ndarray:
        out = np.zeros(design.N, dtype=np.int8)
        for (_, _, units), grp in zip(design.size_groups, self.B_groups):
            out[units.ravel()] = grp[i].ravel()
        return out

    def assignment(self, design: ValidatedDesign, i: int) -> Assignment:
        return Assignment(self.A[i], self.b_flat(design, i))


def _smallest_k(keys: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Mask of the k smallest keys along the last axis (k broadcast over rows)."""
    srt = np.sort(keys, axis=-1)
    idx = np.broadcast_to(np.asarray(k)[..., None] - 1, keys.shape[:-1] + (1,))
    return keys <= np.take_along_axis(srt, idx, axis=-1)


def draw_a_levels(design: ValidatedDesign, rng, n: int) -> np.ndarray:
    gen = as_generator(rng)
    return _smallest_k(gen.random((n, design.W)), np.full(n, design.W1))


def draw_b_groups(design: ValidatedDesign, rng, n: int) -> List[np.ndarray]:
    gen = as_generator(rng)
    out = []
    for size, plots, _ in design.size_groups:
        keys = gen.random((n, plots.size, size))
        out.append(_smallest_k(keys, design.m1[plots][None, :]))
    return out


def randomize_batch(design: ValidatedDesign, rng, n: int, with_b: bool = True) -> AssignmentBatch:
    """n independent two-stage draws (uniform random subsets via sorted uniform keys).

    With `with_b=False` only the whole-plot stage is drawn.
    """
    A = draw_a_levels(design, rng, n)
    return AssignmentBatch(A, draw_b_groups(design, rng, n) if with_b else None)


def randomize(design: ValidatedDesign, rng) -> Assignment:
    """Cluster-randomize A over whole plots, then stratify B within each plot."""
    out = randomize_batch(design, rng, 1).assignment(design, 0)
    out.check(design)
    return out


def enumerate_assignments(design: ValidatedDesign, cap: int = DEFAULT_ENUMERATION_CAP) -> Iterator[Tuple[Assignment, float]]:
    total = design.space_size()
    if total > cap:
        raise SpaceTooLarge("assignment space exceeds the enumeration cap", {"size": total, "cap": cap})
    prob = 1.0 / total
    a_choices = []
    for ones in itertools.combinations(range(design.W), design.W1):
        a = np.zeros(design.W, dtype=np.int8)
        a[list(ones)] = 1
        a_choices.append(a)
    per_plot = []
    for mw, m1 in zip(design.m.tolist(), design.m1.tolist()):
        opts = []
        for ones in itertools.combinations(range(mw), m1):
            b = np.zeros(mw, dtype=np.int8)
            b[list(ones)] = 1
            opts.append(b)
        per_plot.append(opts)
    for a in a_choices:
        for bs in itertools.product(*per_plot):
            yield Assignment(a, np.concatenate(bs)), prob


@dataclass
class PopulationData:
    """Per-unit covariates and outcomes, rows in plot-major unit order.

    `potential` is N x 4 with columns 00, 01, 10, 11; `observed` is length N.
    """

    x: np.ndarray
    v: Optional[np.ndarray] = None
    C: Optional[np.ndarray] = None
    observed: Optional[np.ndarray] = None
    potential: Optional[np.ndarray] = None

    def __post_init__(self):
        self.x = _as_2d(self.x)
        if self.v is not None:
            self.v = _as_2d(self.v)
        if self.potential is not None:
            self.potential = np.asarray(self.potential, dtype=float)
        if self.observed is not None:
            self.observed = np.asarray(self.observed, dtype=float)
        if self.C is not None:
            self.C = np.atleast_2d(np.asarray(self.C, dtype=float))
            if self.v is None:
                raise CountMismatch("a linking matrix needs analysis covariates")
            err = np.abs(self.x - self.v @ self.C.T).max() if self.x.size else 0.0
            if err > 1e-10:
                raise CountMismatch("design covariates are not C times the analysis covariates", {"max_abs_error": float(err)})

    def check(self, design: ValidatedDesign) -> None:
        for name in ("x", "v", "observed", "potential"):
            arr = getattr(self, name)
            if arr is not None and arr.shape[0] != design.N:
                raise CountMismatch(f"{name} has {arr.shape[0]} rows, design has {design.N} units")
        if self.potential is not None and self.potential.shape[1] != 4:
            raise CountMismatch("potential outcome table needs four columns")

    def observe(self, design: ValidatedDesign, assignment: Assignment) -> np.ndarray:
        if self.potential is None:
            if self.observed is None:
                raise CountMismatch("population carries no outcomes")
            return self.observed
        z = assignment.z(design)
        return self.potential[np.arange(design.N), z]


def _as_2d(arr) -> np.ndarray:
    arr = np.asarray(arr, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    return arr
