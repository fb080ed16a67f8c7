"""Separable Jensen surrogates of the data term and the regulariser.

With weights ``r_ij = h_ij / Z`` the data term is majorised, up to a
constant, by ``sum_j b_j t_j + (bhat_j / Z) exp(-Z t_j)`` with
``t_j = x_j - xhat_j``.  Each directed neighbour pair (row of C) splits its
penalty evenly between its two voxels, so voxel ``j`` sees
``(w/2) * huber(2 x_j - xhat_j - xhat_j')`` once per C row touching it.
In a symmetric neighbourhood both ``(j, j')`` and ``(j', j)`` touch ``j``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import (
    NeighborhoodSystem,
    ReconstructionProblem,
    RegularizerParams,
    gradient,
    huber_log,
    objective,
    regularizer_gradient,
    regularizer_value,
)
from .projector import back_project, compute_Z, forward_project

__all__ = [
    "DataSurrogateCoeffs",
    "RegSurrogate1D",
    "VoxelSurrogate",
    "data_surrogate_eval",
    "reg_surrogate_eval",
    "reg_surrogate_for_voxel",
    "closed_form_update",
    "data_surrogate_coeffs",
    "data_surrogate_total",
    "reg_surrogate_total",
    "majorization_gaps",
    "surrogate_majorization_check",
]

# floor used in place of b_j when every ray through voxel j measured zero counts
B_FLOOR = 1e-12


@dataclass(frozen=True)
class DataSurrogateCoeffs:
    b: np.ndarray
    b_hat: np.ndarray
    Z: float

    def __post_init__(self):
        if not self.Z > 0:
            raise ValueError("Z must be positive")


@dataclass(frozen=True)
class RegSurrogate1D:
    """Regulariser surrogate of a single voxel.

    ``neighbor_values[k]`` and ``weights[k]`` describe one C row touching the
    voxel; ``lam_scale`` is the regularisation weight actually applied.
    """

    x_hat: float
    neighbor_values: np.ndarray
    weights: np.ndarray
    delta: float
    lam_scale: float = 1.0


def _rho(u):
    a = np.abs(u)
    return a - np.log1p(a)


def _rho1(u):
    return u / (1.0 + np.abs(u))


def _rho2(u):
    return 1.0 / (1.0 + np.abs(u)) ** 2


def data_surrogate_eval(coeffs: DataSurrogateCoeffs, x, x_hat):
    """Value, first and second derivative of the data surrogate in ``x``."""
    Z = coeffs.Z
    t = np.asarray(x, dtype=np.float64) - x_hat
    e = np.exp(-Z * t)
    value = coeffs.b * t + coeffs.b_hat / Z * e
    d1 = coeffs.b - coeffs.b_hat * e
    d2 = Z * coeffs.b_hat * e
    return value, d1, d2


def reg_surrogate_eval(rs: RegSurrogate1D, x):
    nv = np.asarray(rs.neighbor_values, dtype=np.float64)
    w = np.asarray(rs.weights, dtype=np.float64)
    u = (2.0 * x - rs.x_hat - nv) / rs.delta
    value = rs.lam_scale * np.sum(0.5 * w * rs.delta**2 * _rho(u))
    d1 = rs.lam_scale * np.sum(w * rs.delta * _rho1(u))
    d2 = rs.lam_scale * np.sum(2.0 * w * _rho2(u))
    return float(value), float(d1), float(d2)


def reg_surrogate_for_voxel(nbhd: NeighborhoodSystem, x_hat, j: int, delta: float,
                            lam_scale: float = 1.0) -> RegSurrogate1D:
    """Collect every C row touching voxel ``j`` (outgoing and incoming pairs)."""
    x_hat = np.asarray(x_hat, dtype=np.float64)
    src, dst, w = nbhd.pairs()
    out = src == j
    inc = dst == j
    others = np.concatenate([dst[out], src[inc]])
    weights = np.concatenate([w[out], w[inc]])
    return RegSurrogate1D(float(x_hat[j]), x_hat[others], weights, delta, lam_scale)


def closed_form_update(b, b_hat, Z, x_hat):
    """Exact nonnegative minimiser of the unregularised surrogate.

    Returns ``(x_new, degenerate)``.  ``degenerate`` flags voxels with
    ``b_hat == 0`` (minimiser 0) or ``b == 0`` (unbounded minimiser, capped
    at ``x_hat + log(b_hat / B_FLOOR) / Z``).  Voxels with both zero keep
    ``x_hat``.
    """
    b = np.asarray(b, dtype=np.float64)
    b_hat = np.asarray(b_hat, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    b_eff = np.where(b > 0, b, B_FLOOR)
    with np.errstate(divide="ignore", invalid="ignore"):
        x = x_hat - np.log(b_eff / b_hat) / Z
    x = np.where(b_hat > 0, x, 0.0)
    both_zero = (b <= 0) & (b_hat <= 0)
    x = np.where(both_zero, x_hat, x)
    degenerate = ((b_hat <= 0) | (b <= 0)) & ~both_zero
    return np.maximum(x, 0.0), degenerate


class VoxelSurrogate:
    """All ``N`` one-dimensional voxel problems evaluated as arrays.

    ``psi_j(x) = lin_j (x - xhat_j) + (expo_j / Z) exp(-Z (x - xhat_j))
    + lam * sum_rows (w/2) delta^2 rho((2x - xhat_j - xhat_j') / delta)``.
    """

    def __init__(self, x_hat, lin, expo, Z, nbhd: NeighborhoodSystem | None = None,
                 lam: float = 0.0, delta: float = 1.0):
        self.x_hat = np.asarray(x_hat, dtype=np.float64)
        self.lin = np.asarray(lin, dtype=np.float64)
        self.expo = np.asarray(expo, dtype=np.float64)
        self.Z = float(Z)
        self.lam = float(lam)
        self.delta = float(delta)
        if self.lam and nbhd is not None:
            # both C rows of a symmetric pair land on voxel j: (w/2) * 2 rows
            self._w = nbhd.weights
            self._c = self.x_hat[:, None] + self.x_hat[nbhd.neighbors]
        else:
            self._w = None

    def _u(self, x):
        return (2.0 * np.asarray(x)[..., None] - self._c) / self.delta

    def _expo_term(self, x):
        # far below x_hat the exponential overflows; a zero coefficient still means zero
        with np.errstate(over="ignore", invalid="ignore"):
            e = self.expo * np.exp(-self.Z * (x - self.x_hat))
        return np.where(self.expo > 0, e, 0.0)

    def value(self, x):
        v = self.lin * (x - self.x_hat) + self._expo_term(x) / self.Z
        if self._w is not None:
            v = v + self.lam * np.sum(self._w * self.delta**2 * _rho(self._u(x)), axis=-1)
        return v

    def grad(self, x):
        g = self.lin - self._expo_term(x)
        if self._w is not None:
            g = g + self.lam * np.sum(2.0 * self._w * self.delta * _rho1(self._u(x)), axis=-1)
        return g

    def hess(self, x):
        h = self.Z * self._expo_term(x)
        if self._w is not None:
            h = h + self.lam * np.sum(4.0 * self._w * _rho2(self._u(x)), axis=-1)
        return h


def data_surrogate_coeffs(x_hat, problem: ReconstructionProblem, Z=None) -> DataSurrogateCoeffs:
    H, data = problem.H, problem.data
    Z = compute_Z(H) if Z is None else Z
    q_hat = data.I0 * np.exp(-forward_project(H, x_hat))
    return DataSurrogateCoeffs(back_project(H, data.d), back_project(H, q_hat), Z)


def data_surrogate_total(x, x_hat, problem: ReconstructionProblem, Z=None) -> float:
    """Data surrogate summed over voxels, constant terms dropped."""
    c = data_surrogate_coeffs(x_hat, problem, Z)
    value, _, _ = data_surrogate_eval(c, np.asarray(x, dtype=np.float64), np.asarray(x_hat))
    return float(np.sum(value))


def reg_surrogate_total(x, x_hat, nbhd: NeighborhoodSystem, delta: float) -> float:
    """Regulariser surrogate summed over voxels (no lambda)."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    src, dst, w = nbhd.pairs()
    # row (j, j') contributes half to each endpoint; huber is even
    a = huber_log(2.0 * x[src] - x_hat[src] - x_hat[dst], 0.5 * w, delta)
    b = huber_log(2.0 * x[dst] - x_hat[dst] - x_hat[src], 0.5 * w, delta)
    return float(np.sum(a) + np.sum(b))


def majorization_gaps(x, x_hat, problem: ReconstructionProblem, Z=None) -> dict:
    """Both sides of the majorisation inequalities and tangency errors."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    free = RegularizerParams(0.0, problem.reg.delta)
    f_x = objective(x, problem.H, problem.data, problem.nbhd, free)
    f_hat = objective(x_hat, problem.H, problem.data, problem.nbhd, free)
    g_x = data_surrogate_total(x, x_hat, problem, Z)
    g_hat = data_surrogate_total(x_hat, x_hat, problem, Z)

    delta, nbhd = problem.reg.delta, problem.nbhd
    beta_x = regularizer_value(x, nbhd, delta)
    beta_hat = regularizer_value(x_hat, nbhd, delta)
    B_x = reg_surrogate_total(x, x_hat, nbhd, delta)
    B_hat = reg_surrogate_total(x_hat, x_hat, nbhd, delta)

    c = data_surrogate_coeffs(x_hat, problem, Z)
    _, g_sur, _ = data_surrogate_eval(c, x_hat, x_hat)
    g_true = gradient(x_hat, problem.H, problem.data, nbhd, free)
    vs = VoxelSurrogate(x_hat, 0.0, 0.0, 1.0, nbhd, 1.0, delta)
    r_sur = vs.grad(x_hat)
    r_true = regularizer_gradient(x_hat, nbhd, delta)

    def rel(a, b):
        scale = max(np.max(np.abs(b)), 1e-300)
        return float(np.max(np.abs(a - b)) / scale)

    return {
        "data_surrogate_increase": g_x - g_hat,
        "data_increase": f_x - f_hat,
        "data_tolerance": 1e-9 * (1.0 + abs(f_x)),
        "reg_surrogate_increase": B_x - B_hat,
        "reg_increase": beta_x - beta_hat,
        "reg_tolerance": 1e-9 * (1.0 + abs(beta_x)),
        "data_tangency_error": rel(g_sur, g_true),
        "reg_tangency_error": rel(r_sur, r_true) if np.any(r_true) else 0.0,
    }


def surrogate_majorization_check(x, x_hat, problem: ReconstructionProblem, Z=None) -> bool:
    g = majorization_gaps(x, x_hat, problem, Z)
    return bool(
        g["data_surrogate_increase"] >= g["data_increase"] - g["data_tolerance"]
        and g["reg_surrogate_increase"] >= g["reg_increase"] - g["reg_tolerance"]
        and g["data_tangency_error"] <= 1e-8
        and g["reg_tangency_error"] <= 1e-8
    )
