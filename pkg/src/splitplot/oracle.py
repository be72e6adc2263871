"""Enumeration oracle: exact design-based invariants on small designs."""

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .design import DesignSpec, PopulationData, ValidatedDesign, enumerate_assignments, validate_design
from .estimators import G, arm_estimate_z, covariate_contrasts
from .moments import estimated_tt, estimated_xt, population_moments, sigma_population
from .numkernels import RngStream

TOY_DESIGN = {"W1": 2, "M": [2, 2, 3, 3], "M1": [1, 1, 1, 2]}


@dataclass
class OracleCheck:
    name: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.error <= self.tol)

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: max abs error {self.error:.3e} (tol {self.tol:.0e})"


def toy_population(design: ValidatedDesign, seed: int = 0, L: int = 2):
    """Heterogeneous potential outcomes and covariates for oracle runs."""
    gen = RngStream(seed).generator
    Y = 3.0 * gen.standard_normal((design.N, 4)) + np.arange(4.0)
    x = gen.standard_normal((design.N, L))
    return Y, x


def _wcov(values: np.ndarray, probs: np.ndarray) -> np.ndarray:
    mean = probs @ values
    dev = values - mean
    return (dev * probs[:, None]).T @ dev


def run_oracle_suite(design: ValidatedDesign, potential: np.ndarray, x: np.ndarray) -> List[OracleCheck]:
    """Average over every assignment and compare with the closed forms (HT flavor)."""
    pm = population_moments(design, potential, x)
    cov = pm.cov
    blocks = sigma_population(pm, "ht")
    rows = np.arange(design.N)
    probs, taus, txs, stt, sxt = [], [], [], [], []
    for asg, p in enumerate_assignments(design):
        z = asg.z(design)
        y = potential[rows, z]
        yhat = arm_estimate_z(y, z, design, "ht").values[:, 0]
        probs.append(p)
        taus.append(G @ yhat)
        txs.append(covariate_contrasts(arm_estimate_z(cov.x, z, design, "ht")))
        stt.append(estimated_tt(design, asg, y, "ht", arm_means=yhat))
        sxt.append(estimated_xt(design, asg, y, cov, "ht"))
    probs = np.array(probs)
    taus, txs = np.array(taus), np.array(txs)
    W = design.W
    gap = G @ pm.S["ht"] @ G.T
    checks = [
        ("E[tau_ht] = tau", np.abs(probs @ taus - pm.tau).max(), 1e-12),
        ("E[tau_ht,x] = 0", np.abs(probs @ txs).max(), 1e-12),
        ("W cov(tau_ht) = G(H*S + Psi)G'", np.abs(W * _wcov(taus, probs) - blocks.sigma_tt).max(), 1e-10),
        ("W cov(tau_ht,x) = closed form", np.abs(W * _wcov(txs, probs) - cov.full_sigma_xx("ht")).max(), 1e-10),
        ("E[Sigma_hat_xtau] = Sigma_xtau", np.abs(np.tensordot(probs, np.array(sxt), 1) - blocks.sigma_xt).max(), 1e-10),
        ("E[Sigma_hat_tautau] - Sigma_tautau = G S G'", np.abs(np.tensordot(probs, np.array(stt), 1) - blocks.sigma_tt - gap).max(), 1e-10),
    ]
    return [OracleCheck(n, float(e), t) for n, e, t in checks]


def oracle_from_dict(doc: Optional[dict] = None) -> List[OracleCheck]:
    """Run the suite for a design document {W1, M, M1} with optional
    `potential` (N x 4) and `x` (N x L) tables or a `seed` for a toy population."""
    doc = dict(TOY_DESIGN if doc is None else doc)
    design = validate_design(DesignSpec.from_arrays(doc["W1"], doc["M"], doc["M1"]))
    if "potential" in doc:
        Y = np.asarray(doc["potential"], float)
        x = np.asarray(doc.get("x", np.zeros((design.N, 0))), float)
        if x.ndim == 1:
            x = x[:, None]
        PopulationData(x=x, potential=Y).check(design)
    else:
        Y, x = toy_population(design, int(doc.get("seed", 0)), int(doc.get("L", 2)))
    return run_oracle_suite(design, Y, x)
