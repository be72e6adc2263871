"""Contrast matrix and Horvitz-Thompson / Hajek arm-mean estimators."""

from dataclasses import dataclass

import numpy as np

from .design import Assignment, ValidatedDesign
from .errors import EmptyArm

# rows: main effect A, main effect B, interaction; columns: arms 00, 01, 10, 11
G = np.array(
    [
        [-0.5, -0.5, 0.5, 0.5],
        [-0.5, 0.5, -0.5, 0.5],
        [1.0, -1.0, -1.0, 1.0],
    ]
)
G.setflags(write=False)

FLAVORS = ("ht", "haj")
EFFECTS = ("A", "B", "AB")


def check_flavor(flavor: str) -> str:
    if flavor not in FLAVORS:
        raise ValueError(f"flavor must be one of {FLAVORS}, got {flavor!r}")
    return flavor


def kron_g(L: int) -> np.ndarray:
    """G (x) I_L, acting on arm-major stacked 4L vectors."""
    return np.kron(G, np.eye(L))


@dataclass
class ArmMeans:
    values: np.ndarray  # 4 x dim
    flavor: str
    normalizers: np.ndarray  # HT estimate of the constant 1, per arm


@dataclass
class EffectEstimate:
    tau_hat: np.ndarray
    flavor: str
    adjustment: str = "none"


def arm_onehot(z: np.ndarray) -> np.ndarray:
    out = np.zeros((z.shape[0], 4))
    out[np.arange(z.shape[0]), z] = 1.0
    return out


def arm_estimate_z(values: np.ndarray, z: np.ndarray, design: ValidatedDesign, flavor: str) -> ArmMeans:
    """Arm means given per-unit arm codes z."""
    check_flavor(flavor)
    vals = np.asarray(values, dtype=float)
    squeeze = vals.ndim == 1
    if squeeze:
        vals = vals[:, None]
    if vals.shape[0] != design.N:
        raise ValueError("values need one row per unit")
    w = 1.0 / design.inclusion_probabilities(z)
    onehot = arm_onehot(z)
    counts = onehot.sum(axis=0)
    if np.any(counts == 0):
        raise EmptyArm("an arm received no units", {"counts": counts.tolist()})
    weighted = onehot * w[:, None]
    ht = weighted.T @ vals / design.N
    ones = weighted.sum(axis=0) / design.N
    out = ht if flavor == "ht" else ht / ones[:, None]
    return ArmMeans(out, flavor, ones)


def arm_estimate(values: np.ndarray, assignment: Assignment, design: ValidatedDesign, flavor: str) -> ArmMeans:
    return arm_estimate_z(values, assignment.z(design), design, flavor)


def effect_estimate(arm: ArmMeans, adjustment: str = "none") -> EffectEstimate:
    if arm.values.ndim == 2 and arm.values.shape[1] != 1:
        raise ValueError("effect_estimate needs a scalar outcome")
    return EffectEstimate(G @ arm.values.reshape(4), arm.flavor, adjustment)


def covariate_contrasts(arm: ArmMeans) -> np.ndarray:
    """Stacked (A-block, B-block, AB-block) covariate contrasts, length 3L."""
    return (G @ arm.values).reshape(-1)
