"""scikit-learn style wrapper around :func:`jsct.algorithms.run`.

``X`` is the system matrix (rays by voxels) and ``y`` the measured counts,
so ``fit`` reconstructs an image and ``predict`` returns the expected counts
of any set of rays through it.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .algorithms import DEFAULT_X0, AlgorithmConfig, run
from .model import (
    NeighborhoodSystem,
    PoissonData,
    ReconstructionProblem,
    RegularizerParams,
    datafit_term,
    objective,
)
from .projector import Geometry, SystemMatrix
from .solver1d import Solver1DConfig

__all__ = ["JensenCTReconstructor"]


def _as_system_matrix(X) -> SystemMatrix:
    if isinstance(X, SystemMatrix):
        return X
    X = check_array(X, accept_sparse="csr", dtype=np.float64, ensure_min_samples=1)
    if sp.issparse(X):
        if X.nnz and X.data.min() < 0:
            raise ValueError("system matrix entries must be nonnegative")
        return SystemMatrix(sp.csr_array(X))
    return SystemMatrix.from_dense(X)


class JensenCTReconstructor(BaseEstimator):
    """Penalised Poisson transmission reconstruction.

    Parameters
    ----------
    scheme : one of ``jsct.algorithms.SCHEMES``.
    n_subsets : subset count for the incremental schemes.
    max_passes : effective data passes to run.
    lam, delta : regularisation weight and Huber-log scale.
    image_shape : ``(rows, cols)``; defaults to a single row of voxels.
    n_views : views in ``X``, rays ordered view-major.  Needed only when
        ``n_subsets > 1``; defaults to one view per ray.
    connectivity : 4 or 8 neighbours.
    x0 : starting image (scalar or array).
    solver : ``Solver1DConfig`` for the voxel updates.
    random_state : seed of the subset selection.
    """

    def __init__(self, scheme="sa_js", n_subsets=8, max_passes=20, lam=20.0, delta=1e-3,
                 image_shape=None, n_views=None, connectivity=4, x0=DEFAULT_X0,
                 solver=None, random_state=0):
        self.scheme = scheme
        self.n_subsets = n_subsets
        self.max_passes = max_passes
        self.lam = lam
        self.delta = delta
        self.image_shape = image_shape
        self.n_views = n_views
        self.connectivity = connectivity
        self.x0 = x0
        self.solver = solver
        self.random_state = random_state

    def _problem(self, H, y, I0):
        y = check_array(y, ensure_2d=False, dtype=np.float64).ravel()
        if y.size != H.m:
            raise ValueError(f"y has {y.size} entries, X has {H.m} rays")
        shape = tuple(self.image_shape) if self.image_shape is not None else (1, H.n)
        if int(np.prod(shape)) != H.n:
            raise ValueError(f"image_shape {shape} does not hold {H.n} voxels")
        n_views = H.m if self.n_views is None else int(self.n_views)
        if n_views < 1 or H.m % n_views:
            raise ValueError(f"{H.m} rays cannot be split into {n_views} views")
        geom = Geometry(shape[0], shape[1], 1.0, n_views, H.m // n_views, 1.0)
        nbhd = NeighborhoodSystem.grid(shape, self.connectivity)
        data = PoissonData(y, I0)
        return ReconstructionProblem(H, data, nbhd, RegularizerParams(self.lam, self.delta), geom)

    def fit(self, X, y, I0=1e5):
        """Reconstruct from system matrix ``X`` and counts ``y``."""
        H = _as_system_matrix(X)
        problem = self._problem(H, y, I0)
        cfg = AlgorithmConfig(self.scheme, self.n_subsets, max_passes=self.max_passes,
                              seed=self.random_state, x0=self.x0,
                              solver=self.solver or Solver1DConfig())
        res = run(problem, cfg)
        self.x_ = res.x
        self.image_ = res.x.reshape(problem.geometry.image_shape)
        self.objective_history_ = np.array([[p.passes, p.objective] for p in res.history])
        self.n_iter_ = res.n_iter
        self.passes_ = res.passes
        self.diagnostics_ = res.diagnostics
        self.n_features_in_ = H.n
        self.I0_ = problem.data.I0
        self.problem_ = problem
        return self

    def _line_integrals(self, X):
        check_is_fitted(self, "x_")
        H = _as_system_matrix(X)
        if H.n != self.n_features_in_:
            raise ValueError(f"X has {H.n} voxels, the fitted image has {self.n_features_in_}")
        return H, H.csr @ self.x_

    def predict(self, X, I0=None):
        """Expected counts ``I0 exp(-X x)``; ``I0`` defaults to the fitted one."""
        H, l = self._line_integrals(X)
        I0 = self._i0(H, I0)
        return I0 * np.exp(-l)

    def _i0(self, H, I0):
        if I0 is not None:
            return np.broadcast_to(np.asarray(I0, dtype=np.float64), (H.m,))
        if H.m != self.I0_.size and np.ptp(self.I0_) > 0:
            raise ValueError("pass I0 for rays other than the fitted ones")
        return np.broadcast_to(self.I0_[0] if H.m != self.I0_.size else self.I0_, (H.m,))

    def score(self, X, y, I0=None):
        """Negative Poisson data-fit term (constants dropped); larger is better."""
        H, l = self._line_integrals(X)
        y = check_array(y, ensure_2d=False, dtype=np.float64).ravel()
        return -float(np.sum(datafit_term(l, y, self._i0(H, I0))))

    def objective(self):
        """Penalised objective of the fitted image on the training data."""
        check_is_fitted(self, "x_")
        p = self.problem_
        return objective(self.x_, p.H, p.data, p.nbhd, p.reg)
