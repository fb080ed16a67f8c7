import numpy as np
import pytest

from jsct.model import NeighborhoodSystem, PoissonData, ReconstructionProblem, RegularizerParams
from jsct.projector import Geometry, build_system_matrix
from jsct.simulate import make_phantom, simulate_counts

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def small_problem(n_rows=8, n_cols=8, n_views=12, n_dets=12, lam=0.0, delta=0.05,
                  I0=1e3, seed=0, phantom="uniform_disc", noiseless=False, scale=1.0):
    geom = Geometry(n_rows, n_cols, 1.0, n_views, n_dets, 1.0)
    H = build_system_matrix(geom)
    x_true = make_phantom(phantom, geom).x * scale
    data = simulate_counts(H, x_true, I0, seed=seed, noiseless=noiseless)
    nbhd = NeighborhoodSystem.grid(geom.image_shape)
    return ReconstructionProblem(H, data, nbhd, RegularizerParams(lam, delta), geom), x_true


@pytest.fixture
def problem8():
    return small_problem(lam=2.0)[0]


def dense_problem(rng, m=10, n=8, shape=(2, 4), lam=0.5, delta=0.1, I0=None):
    """Random dense system with a grid neighbourhood."""
    from jsct.projector import SystemMatrix

    A = rng.uniform(0.0, 1.0, size=(m, n)) * (rng.uniform(size=(m, n)) < 0.7)
    H = SystemMatrix.from_dense(A)
    I0 = rng.uniform(5.0, 50.0, size=m) if I0 is None else I0
    x = rng.uniform(0.0, 0.5, size=n)
    d = rng.poisson(I0 * np.exp(-A @ x)).astype(float)
    return ReconstructionProblem(H, PoissonData(d, I0), NeighborhoodSystem.grid(shape),
                                 RegularizerParams(lam, delta)), A
