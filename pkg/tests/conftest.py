import warnings

import numpy as np
import pytest

from splitplot.design import DesignSpec, validate_design
from splitplot.numkernels import RngStream


def make_design(W1, M, M1):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return validate_design(DesignSpec.from_arrays(W1, M, M1))


@pytest.fixture
def toy():
    """W=4 design with unequal plot sizes (216 assignments)."""
    return make_design(2, [2, 2, 3, 3], [1, 1, 1, 2])


@pytest.fixture
def tiny():
    """W=2, W1=1, M=(2,2): eight assignments."""
    return make_design(1, [2, 2], [1, 1])


@pytest.fixture
def medium():
    """W=40 design with varying sizes for per-realization checks."""
    gen = np.random.default_rng(11)
    m = gen.integers(4, 9, size=40)
    m1 = np.maximum(2, m // 2 - gen.integers(0, 2, size=40))
    return make_design(14, m.tolist(), m1.tolist())


def toy_population(design, seed=0, L=2):
    gen = RngStream(seed).generator
    Y = 3.0 * gen.standard_normal((design.N, 4)) + np.arange(4.0)
    x = gen.standard_normal((design.N, L))
    return Y, x


def linear_population(design, seed=0, J=2, noise=1.0):
    """Outcomes linear in v with arm-specific slopes plus noise; x = v."""
    gen = np.random.default_rng(seed)
    vw = gen.normal(size=(design.W, J))
    v = vw[design.plot_of_unit] + 0.7 * gen.normal(size=(design.N, J))
    slopes = gen.normal(size=(4, J))
    Y = np.arange(4.0) + v @ slopes.T + noise * gen.normal(size=(design.N, 4))
    return Y, v
