"""Penalised Poisson transmission objective, its gradient and curvature bound."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .projector import SystemMatrix, back_project, forward_project

logger = logging.getLogger(__name__)

__all__ = [
    "PoissonData",
    "RegularizerParams",
    "NeighborhoodSystem",
    "ReconstructionProblem",
    "LipschitzConvergenceError",
    "datafit_term",
    "huber_log",
    "huber_log_derivative",
    "huber_log_second_derivative",
    "objective",
    "gradient",
    "regularizer_value",
    "regularizer_gradient",
    "lipschitz_constant",
]


@dataclass(frozen=True)
class PoissonData:
    """Measured counts ``d`` and incident counts ``I0`` per ray."""

    d: np.ndarray
    I0: np.ndarray

    def __post_init__(self):
        d = np.array(self.d, dtype=np.float64).ravel()
        I0 = np.array(self.I0, dtype=np.float64)
        I0 = np.full(d.shape, float(I0)) if I0.ndim == 0 else I0.ravel()
        if I0.shape != d.shape:
            raise ValueError(f"d has {d.size} rays but I0 has {I0.size}")
        if np.any(d < 0) or not np.all(np.isfinite(d)):
            raise ValueError("measured counts must be finite and nonnegative")
        if np.any(I0 <= 0) or not np.all(np.isfinite(I0)):
            raise ValueError("incident counts must be finite and positive")
        d.flags.writeable = False
        I0.flags.writeable = False
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "I0", I0)

    @property
    def m(self) -> int:
        return self.d.size


@dataclass(frozen=True)
class RegularizerParams:
    lam: float = 0.0
    delta: float = 1e-3

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if not self.delta > 0:
            raise ValueError(f"delta must be > 0, got {self.delta}")


class NeighborhoodSystem:
    """Voxel neighbour lists stored as padded ``(N, K)`` arrays.

    Missing neighbours are encoded by weight 0 and point at the voxel itself.
    The directed pairs ``(j, nbr[j, k])`` with positive weight are the rows of
    the finite-difference matrix C; a symmetric system lists every unordered
    pair twice.
    """

    def __init__(self, neighbors, weights):
        neighbors = np.array(neighbors, dtype=np.int64)
        weights = np.array(weights, dtype=np.float64)
        if neighbors.ndim != 2 or neighbors.shape != weights.shape:
            raise ValueError("neighbors and weights must be matching (N, K) arrays")
        n = neighbors.shape[0]
        if neighbors.size and (neighbors.min() < 0 or neighbors.max() >= n):
            raise ValueError("neighbour index out of range")
        if np.any(weights < 0):
            raise ValueError("neighbour weights must be positive")
        valid = weights > 0
        own = np.arange(n)[:, None]
        if np.any(valid & (neighbors == own)):
            raise ValueError("a voxel cannot be its own neighbour")
        neighbors = np.where(valid, neighbors, own)
        for arr in (neighbors, weights, valid):
            arr.flags.writeable = False
        self.neighbors = neighbors
        self.weights = weights
        self.valid = valid
        rows, cols = np.nonzero(valid)
        self._src = rows
        self._dst = neighbors[rows, cols]
        self._w = weights[rows, cols]

    @classmethod
    def grid(cls, shape, connectivity: int = 4) -> "NeighborhoodSystem":
        """Regular-grid neighbourhood.

        ``connectivity`` is 4 or 8 for 2D shapes (diagonals weighted
        ``1/sqrt(2)``) and 6 for 3D ``(slices, rows, cols)`` shapes.
        """
        shape = tuple(int(s) for s in shape)
        if len(shape) == 2 and connectivity == 4:
            offsets = [(-1, 0, 1.0), (1, 0, 1.0), (0, -1, 1.0), (0, 1, 1.0)]
        elif len(shape) == 2 and connectivity == 8:
            r = 1.0 / np.sqrt(2.0)
            offsets = [(-1, 0, 1.0), (1, 0, 1.0), (0, -1, 1.0), (0, 1, 1.0),
                       (-1, -1, r), (-1, 1, r), (1, -1, r), (1, 1, r)]
        elif len(shape) == 3 and connectivity == 6:
            offsets = [(dz, dr, dc, 1.0) for dz, dr, dc in
                       ((-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1))]
        else:
            raise ValueError(f"unsupported connectivity {connectivity} for shape {shape}")
        n = int(np.prod(shape))
        coords = np.indices(shape).reshape(len(shape), -1)
        nbr = np.empty((n, len(offsets)), dtype=np.int64)
        w = np.zeros((n, len(offsets)))
        for k, off in enumerate(offsets):
            step, weight = np.array(off[:-1]), off[-1]
            c = coords + step[:, None]
            inside = np.all((c >= 0) & (c < np.array(shape)[:, None]), axis=0)
            nbr[:, k] = np.where(inside, np.ravel_multi_index(np.where(inside, c, 0), shape), np.arange(n))
            w[:, k] = np.where(inside, weight, 0.0)
        return cls(nbr, w)

    @property
    def n(self) -> int:
        return self.neighbors.shape[0]

    @property
    def n_pairs(self) -> int:
        """Number of directed pairs, i.e. rows of C."""
        return self._src.size

    @property
    def max_weight(self) -> float:
        return float(self._w.max()) if self._w.size else 0.0

    def pairs(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self._src, self._dst, self._w

    def is_symmetric(self) -> bool:
        fwd = set(zip(self._src.tolist(), self._dst.tolist(), self._w.tolist()))
        return all((b, a, w) in fwd for a, b, w in fwd)

    def apply_C(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return x[self._src] - x[self._dst]

    def apply_Ct(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        return (np.bincount(self._src, weights=y, minlength=self.n)
                - np.bincount(self._dst, weights=y, minlength=self.n))

    def to_dense_C(self) -> np.ndarray:
        C = np.zeros((self.n_pairs, self.n))
        k = np.arange(self.n_pairs)
        C[k, self._src] = 1.0
        C[k, self._dst] = -1.0
        return C


@dataclass(frozen=True)
class ReconstructionProblem:
    H: SystemMatrix
    data: PoissonData
    nbhd: NeighborhoodSystem
    reg: RegularizerParams = field(default_factory=RegularizerParams)
    geometry: object = None

    def __post_init__(self):
        if self.data.m != self.H.m:
            raise ValueError(f"data has {self.data.m} rays, system matrix has {self.H.m}")
        if self.nbhd.n != self.H.n:
            raise ValueError(f"neighbourhood has {self.nbhd.n} voxels, system matrix has {self.H.n}")

    @property
    def n(self) -> int:
        return self.H.n

    @property
    def m(self) -> int:
        return self.H.m


def datafit_term(l, d, I0):
    """Per-ray negative log-likelihood ``d*l + I0*exp(-l)`` (constants dropped)."""
    return d * l + I0 * np.exp(-l)


def huber_log(t, omega=1.0, delta=1.0):
    u = np.abs(t / delta)
    return omega * delta**2 * (u - np.log1p(u))


def huber_log_derivative(t, omega=1.0, delta=1.0):
    return omega * t / (1.0 + np.abs(t / delta))


def huber_log_second_derivative(t, omega=1.0, delta=1.0):
    return omega / (1.0 + np.abs(t / delta)) ** 2


def _check_image(x, n, nonneg=True):
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size != n:
        raise ValueError(f"image has {x.size} voxels, expected {n}")
    if nonneg and np.any(x < 0):
        raise ValueError("image has negative voxels")
    return x


def regularizer_value(x, nbhd: NeighborhoodSystem, delta: float) -> float:
    """Sum of ``huber_log`` over all directed neighbour pairs."""
    _, _, w = nbhd.pairs()
    return float(np.sum(huber_log(nbhd.apply_C(x), w, delta)))


def regularizer_gradient(x, nbhd: NeighborhoodSystem, delta: float) -> np.ndarray:
    _, _, w = nbhd.pairs()
    return nbhd.apply_Ct(huber_log_derivative(nbhd.apply_C(x), w, delta))


def objective(x, H, data, nbhd, reg) -> float:
    x = _check_image(x, H.n)
    l = forward_project(H, x)
    phi = float(np.sum(datafit_term(l, data.d, data.I0)))
    if reg.lam:
        phi += reg.lam * regularizer_value(x, nbhd, reg.delta)
    return phi


def gradient(x, H, data, nbhd, reg) -> np.ndarray:
    x = _check_image(x, H.n, nonneg=False)
    q = data.I0 * np.exp(-forward_project(H, x))
    g = back_project(H, data.d - q)
    if reg.lam:
        g += reg.lam * regularizer_gradient(x, nbhd, reg.delta)
    return g


class LipschitzConvergenceError(RuntimeError):
    def __init__(self, estimate, iterations):
        super().__init__(
            f"power iteration did not converge in {iterations} iterations "
            f"(last estimate {estimate:.6g})"
        )
        self.estimate = estimate
        self.iterations = iterations


def lipschitz_constant(H, data, nbhd, reg, tol=1e-6, max_iter=1000) -> float:
    """Largest eigenvalue of ``max(I0) H^T H + lam*max(w) C^T C`` by power iteration.

    Converged when successive Rayleigh quotients differ by less than ``tol``
    relative.
    """
    if H.nnz == 0:
        raise ValueError("system matrix is zero")
    i0_max = float(data.I0.max())
    lam_eff = reg.lam * nbhd.max_weight

    def apply(v):
        out = i0_max * back_project(H, forward_project(H, v))
        if lam_eff:
            out += lam_eff * nbhd.apply_Ct(nbhd.apply_C(v))
        return out

    v = np.full(H.n, 1.0 / np.sqrt(H.n))
    prev = None
    for it in range(1, max_iter + 1):
        w = apply(v)
        rq = float(v @ w)
        norm = np.linalg.norm(w)
        if norm == 0:
            return 0.0
        if prev is not None and abs(rq - prev) < tol * abs(rq):
            logger.debug("power iteration converged after %d iterations", it)
            return rq
        prev = rq
        v = w / norm
    raise LipschitzConvergenceError(rq, max_iter)
